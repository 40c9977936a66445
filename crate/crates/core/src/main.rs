use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::Rng;
use rand_distr::StandardNormal;

use bridge_ddim::bridges::{self, RenderConfig};
use bridge_ddim::checkpoint;
use bridge_ddim::noising;
use bridge_ddim::pgm;
use bridge_ddim::rng::stream;
use bridge_ddim::sampler::{self, OracleDenoiser, SamplerConfig, UNetDenoiser};
use bridge_ddim::schedule::DiffusionSchedule;
use bridge_ddim::tensor::Tensor;
use bridge_ddim::trainer::{self, TrainConfig};
use bridge_ddim::unet::{UNetConfig, UNetModel};

#[derive(Parser)]
#[command(name = "bridge-ddim", version, about = "Train and sample a bridge-silhouette diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural bridge corpus plus its manifest
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1200)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 192)]
        width: usize,
        #[arg(long, default_value_t = 48)]
        height: usize,
    },
    /// Train the noise predictor on a rendered corpus
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        /// Channel widths per resolution level
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [32, 64, 96])]
        widths: Vec<usize>,
        /// Bottleneck width; defaults to 4/3 of the last level width
        #[arg(long)]
        bottleneck: Option<usize>,
        #[arg(long, default_value_t = 2)]
        block_depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write `epoch <n> loss <value>` lines here as well as stdout
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        max_signal_rate: f64,
        #[arg(long, default_value_t = 0.02)]
        min_signal_rate: f64,
    },
    /// Draw latents and decode them into candidate images
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a tiled contact sheet for screening
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Noise one corpus image at evenly spaced diffusion times
    NoisifyDemo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 8)]
        levels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-recovery suite with a noise oracle standing in for the model
    ReconstructOracle {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print checkpoint header fields and the parameter count
    Info {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("DDIM_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: DDIM_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenDataset { out, per_class, seed, width, height } => {
            if per_class == 0 {
                bail!("--per-class must be >= 1");
            }
            let cfg = RenderConfig { width, height };
            let entries = bridges::generate_corpus(per_class, seed, &out, &cfg)
                .context("generating corpus")?;
            println!(
                "wrote {} images ({per_class} per class) at {width}x{height} to {}",
                entries.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            data,
            out,
            epochs,
            batch,
            lr,
            weight_decay,
            widths,
            bottleneck,
            block_depth,
            seed,
            loss_log,
            max_signal_rate,
            min_signal_rate,
        } => {
            let corpus = bridges::load_corpus(&data).context("loading corpus")?;
            if corpus.is_empty() {
                bail!("corpus at {} is empty", data.display());
            }
            let shape = corpus[0].shape().to_vec();
            if corpus.iter().any(|t| t.shape() != shape) {
                bail!("corpus images disagree on dimensions");
            }
            let stats = trainer::compute_norm_stats(&corpus).context("standardizing corpus")?;
            let normalized: Vec<Tensor<f32>> = corpus.iter().map(|t| stats.normalize(t)).collect();

            let last = *widths.last().context("--widths needs at least one entry")?;
            let config = UNetConfig {
                image_height: shape[0],
                image_width: shape[1],
                widths,
                bottleneck: bottleneck.unwrap_or(last * 4 / 3),
                block_depth,
                ..UNetConfig::full()
            };
            let schedule = DiffusionSchedule::new(max_signal_rate, min_signal_rate)
                .context("building schedule")?;
            let mut model =
                UNetModel::<f32>::init(config, &mut stream(seed, "init")).context("building model")?;
            println!("model: {} parameters", model.param_count());

            let train_config = TrainConfig {
                batch_size: batch,
                epochs,
                learning_rate: lr,
                weight_decay,
                seed,
                ..TrainConfig::default()
            };
            let mut log = match &loss_log {
                Some(path) => Some(fs::File::create(path).with_context(|| {
                    format!("creating loss log {}", path.display())
                })?),
                None => None,
            };
            trainer::fit(&mut model, &schedule, &stats, &normalized, &train_config, Some(&out), |epoch, loss| {
                let line = format!("epoch {epoch} loss {loss:.6}");
                println!("{line}");
                if let Some(f) = log.as_mut() {
                    let _ = writeln!(f, "{line}");
                }
            })
            .context("training")?;
            println!("checkpoint written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sample { ckpt, count, steps, seed, out, grid } => {
            if count == 0 {
                bail!("--count must be >= 1");
            }
            let (model, norm, schedule) =
                checkpoint::load_checkpoint(&ckpt).context("loading checkpoint")?;
            fs::create_dir_all(&out)
                .with_context(|| format!("creating output directory {}", out.display()))?;
            let config = SamplerConfig { steps, schedule, norm };
            let denoiser = UNetDenoiser { model: &model };
            let mut rng = stream(seed, "sampling");
            let images = sampler::generate(
                count,
                &mut rng,
                &denoiser,
                &config,
                model.config.image_height,
                model.config.image_width,
            )
            .context("sampling")?;
            for (i, image) in images.iter().enumerate() {
                pgm::write_pgm(image, &out.join(format!("sample_{i:03}.pgm")))
                    .context("writing sample")?;
            }
            if let Some(grid_path) = grid {
                pgm::write_pgm(&sampler::contact_sheet(&images), &grid_path)
                    .context("writing contact sheet")?;
            }
            println!("wrote {count} samples to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::NoisifyDemo { data, index, levels, out } => {
            if levels < 2 {
                bail!("--levels must be >= 2 to span diffusion time");
            }
            let corpus = bridges::load_corpus(&data).context("loading corpus")?;
            let image = corpus
                .get(index)
                .with_context(|| format!("--index {index} out of range (corpus has {})", corpus.len()))?;
            let stats = trainer::compute_norm_stats(&corpus)?;
            let x0 = stats.normalize(image);
            let schedule = DiffusionSchedule::default();
            let mut rng = stream(0, "noisify-demo");
            let eps = Tensor::new(
                x0.shape().to_vec(),
                (0..x0.numel()).map(|_| rng.sample(StandardNormal)).collect(),
            )
            .expect("noise sized to image");
            fs::create_dir_all(&out)
                .with_context(|| format!("creating output directory {}", out.display()))?;
            for k in 0..levels {
                let t = k as f64 / (levels - 1) as f64;
                let pair = noising::noisify(&schedule, &x0, &eps, t).context("noising")?;
                let img = sampler::quantize(&pair.x_t, &stats);
                pgm::write_pgm(&img, &out.join(format!("noisy_{k:02}.pgm")))
                    .context("writing noised image")?;
            }
            println!("wrote {levels} noised views of image {index} to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ReconstructOracle { trials, steps, seed, tolerance } => {
            if trials == 0 || steps == 0 {
                bail!("--trials and --steps must be >= 1");
            }
            let config = SamplerConfig {
                steps,
                schedule: DiffusionSchedule::default(),
                norm: trainer::NormStats { mean: 0.0, std: 1.0 },
            };
            let mut rng = stream(seed, "reconstruct-oracle");
            let (h, w) = (48usize, 192usize);
            let mut max_err = 0.0f64;
            for _ in 0..trials {
                let mut draw = || -> Tensor<f32> {
                    Tensor::new(
                        vec![h, w, 1],
                        (0..h * w).map(|_| rng.sample(StandardNormal)).collect(),
                    )
                    .expect("image sized")
                };
                let x0 = draw();
                let eps = draw();
                let oracle = OracleDenoiser { x0: x0.clone() };
                let recovered = sampler::sample(&eps, &oracle, &config).context("sampling")?;
                max_err = max_err.max(recovered.max_abs_diff(&x0));
            }
            println!("reconstruct-oracle: trials {trials}, steps {steps}, max error {max_err:.3e}");
            if max_err <= tolerance {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("max error exceeds tolerance {tolerance:.1e}");
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Info { ckpt } => {
            let (model, norm, schedule) =
                checkpoint::load_checkpoint(&ckpt).context("loading checkpoint")?;
            let cfg = &model.config;
            println!("image: {}x{}", cfg.image_height, cfg.image_width);
            println!("widths: {:?} + bottleneck {}", cfg.widths, cfg.bottleneck);
            println!("block depth: {}", cfg.block_depth);
            println!("embedding size: {}", cfg.embedding_size);
            println!("max signal rate: {}", schedule.max_signal_rate());
            println!("min signal rate: {}", schedule.min_signal_rate());
            println!("norm mean: {}", norm.mean);
            println!("norm std: {}", norm.std);
            println!("parameters: {}", model.param_count());
            Ok(ExitCode::SUCCESS)
        }
    }
}
