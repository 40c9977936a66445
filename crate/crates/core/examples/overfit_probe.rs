use bridge_ddim::bridges::*;
use bridge_ddim::rng::stream;
use bridge_ddim::schedule::DiffusionSchedule;
use bridge_ddim::trainer::*;
use bridge_ddim::unet::{UNetConfig, UNetModel};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let wd: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let same_class: bool = args.get(3).map(|s| s == "same").unwrap_or(false);
    let width: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(96);

    let cfg = RenderConfig { width, height: 24 };
    let dir = std::env::temp_dir().join(format!("overfit_{}_{}", same_class, width));
    let per_class = if same_class { 4 } else { 1 };
    generate_corpus(per_class, 23, &dir, &cfg).unwrap();
    let corpus = load_corpus(&dir).unwrap();
    let stats = compute_norm_stats(&corpus).unwrap();
    let batch: Vec<_> = corpus[..4].iter().map(|i| stats.normalize(i)).collect();

    let mut ucfg = UNetConfig::desk();
    ucfg.image_width = width;
    let mut model = UNetModel::<f32>::init(ucfg, &mut stream(23, "init")).unwrap();
    let tc = TrainConfig { learning_rate: lr, weight_decay: wd, ..TrainConfig::default() };
    let mut opt = AdamW::new(&tc);
    let mut rng = stream(29, "train");
    let schedule = DiffusionSchedule::default();
    for step in 1..=500 {
        let l = train_step(&mut model, &schedule, &batch, &mut opt, &mut rng).unwrap();
        if step % 250 == 0 { println!("step {step} loss {l:.4}"); }
    }
    let eval_cfg = TrainConfig { learning_rate: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
    let mut eval_opt = AdamW::new(&eval_cfg);
    let mut eval_rng = stream(31, "eval");
    let mean: f64 = (0..25)
        .map(|_| train_step(&mut model, &schedule, &batch, &mut eval_opt, &mut eval_rng).unwrap())
        .sum::<f64>() / 25.0;
    println!("lr {lr} wd {wd} same_class {same_class} width {width}: post-training MAE {mean:.4}");
}
