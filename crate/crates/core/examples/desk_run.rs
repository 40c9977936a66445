use bridge_ddim::bridges::*;
use bridge_ddim::rng::stream;
use bridge_ddim::schedule::DiffusionSchedule;
use bridge_ddim::trainer::*;
use bridge_ddim::unet::{UNetConfig, UNetModel};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let cfg = RenderConfig { width: 96, height: 24 };
    let dir = std::env::temp_dir().join("desk_corpus");
    generate_corpus(150, 17, &dir, &cfg).unwrap();
    let corpus = load_corpus(&dir).unwrap();
    let stats = compute_norm_stats(&corpus).unwrap();
    println!("corpus: {} images, mean {:.4} std {:.4}", corpus.len(), stats.mean, stats.std);
    let normalized: Vec<_> = corpus.iter().map(|i| stats.normalize(i)).collect();
    let mut model = UNetModel::<f32>::init(UNetConfig::desk(), &mut stream(17, "init")).unwrap();
    let tc = TrainConfig { batch_size: 32, epochs, learning_rate: lr, seed: 17, ..TrainConfig::default() };
    let t0 = Instant::now();
    fit(&mut model, &DiffusionSchedule::default(), &stats, &normalized, &tc, None, |e, l| {
        println!("epoch {e} loss {l:.6}  [{:.1} s]", t0.elapsed().as_secs_f64());
    }).unwrap();
}
