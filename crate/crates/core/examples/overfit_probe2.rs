use bridge_ddim::bridges::*;
use bridge_ddim::rng::stream;
use bridge_ddim::schedule::DiffusionSchedule;
use bridge_ddim::trainer::*;
use bridge_ddim::unet::{UNetConfig, UNetModel};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let same_class: bool = args.get(1).map(|s| s == "same").unwrap_or(true);
    let cfg = RenderConfig { width: 96, height: 24 };
    let dir = std::env::temp_dir().join(format!("overfit2_{same_class}"));
    generate_corpus(if same_class { 4 } else { 1 }, 23, &dir, &cfg).unwrap();
    let corpus = load_corpus(&dir).unwrap();
    let stats = compute_norm_stats(&corpus).unwrap();
    let batch: Vec<_> = corpus[..4].iter().map(|i| stats.normalize(i)).collect();

    let ucfg = UNetConfig {
        image_height: 24,
        image_width: 96,
        ..UNetConfig::full()
    };
    let mut model = UNetModel::<f32>::init(ucfg, &mut stream(23, "init")).unwrap();
    println!("params: {}", model.param_count());
    let tc = TrainConfig::default();
    let mut opt = AdamW::new(&tc);
    let mut rng = stream(29, "train");
    let schedule = DiffusionSchedule::default();
    let t0 = Instant::now();
    for step in 1..=500 {
        let l = train_step(&mut model, &schedule, &batch, &mut opt, &mut rng).unwrap();
        if step % 100 == 0 { println!("step {step} loss {l:.4} [{:.0}s]", t0.elapsed().as_secs_f64()); }
    }
    let eval_cfg = TrainConfig { learning_rate: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
    let mut eval_opt = AdamW::new(&eval_cfg);
    let mut eval_rng = stream(31, "eval");
    let mean: f64 = (0..25)
        .map(|_| train_step(&mut model, &schedule, &batch, &mut eval_opt, &mut eval_rng).unwrap())
        .sum::<f64>() / 25.0;
    println!("full-widths same_class {same_class}: post-training MAE {mean:.4} in {:.0}s", t0.elapsed().as_secs_f64());
}
