use bridge_ddim::bridges::*;
use bridge_ddim::rng::stream;
use bridge_ddim::schedule::DiffusionSchedule;
use bridge_ddim::trainer::*;
use bridge_ddim::unet::{UNetConfig, UNetModel};
use std::time::Instant;

fn main() {
    let cfg = RenderConfig { width: 96, height: 24 };
    let dir = std::env::temp_dir().join("bench_corpus");
    generate_corpus(8, 1, &dir, &cfg).unwrap();
    let corpus = load_corpus(&dir).unwrap();
    let stats = compute_norm_stats(&corpus).unwrap();
    let normalized: Vec<_> = corpus.iter().map(|i| stats.normalize(i)).collect();
    let batch: Vec<_> = (0..32).map(|i| normalized[i % normalized.len()].clone()).collect();

    let mut model = UNetModel::<f32>::init(UNetConfig::desk(), &mut stream(1, "init")).unwrap();
    let tc = TrainConfig::default();
    let mut opt = AdamW::new(&tc);
    let mut rng = stream(2, "train");
    let schedule = DiffusionSchedule::default();

    // warmup
    train_step(&mut model, &schedule, &batch, &mut opt, &mut rng).unwrap();
    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n {
        train_step(&mut model, &schedule, &batch, &mut opt, &mut rng).unwrap();
    }
    let per = t0.elapsed().as_secs_f64() / n as f64;
    println!("train_step (batch 32, desk): {:.3} s", per);
    println!("desk run estimate (380 steps): {:.1} min", per * 380.0 / 60.0);
}
