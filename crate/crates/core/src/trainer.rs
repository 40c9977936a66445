//! Corpus standardization and the minibatch training loop.
//!
//! Training minimizes the mean absolute error between drawn noise and the
//! network's prediction of it. Per image the loop draws a uniform diffusion
//! time and a standard-normal noise field, noisifies, and takes one
//! adaptive-moment step with decoupled weight decay.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{self, CheckpointError};
use crate::noising;
use crate::rng::stream;
use crate::schedule::DiffusionSchedule;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};
use crate::unet::{NormMode, UNetError, UNetModel};

/// Momentum of the moving normalization statistics.
pub const STATS_MOMENTUM: f64 = 0.99;

#[derive(Debug)]
pub enum TrainError {
    EmptyCorpus,
    /// Every pixel identical; standardization would divide by zero.
    ConstantCorpus,
    /// Loss or a parameter went non-finite; names the first offender.
    NonFinite { name: String },
    BadBatch { reason: String },
    Net(UNetError),
    Shape(TensorError),
    Checkpoint(CheckpointError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptyCorpus => write!(f, "training corpus is empty"),
            TrainError::ConstantCorpus => {
                write!(f, "corpus has zero pixel variance; cannot standardize")
            }
            TrainError::NonFinite { name } => {
                write!(f, "training diverged: {name} is not finite")
            }
            TrainError::BadBatch { reason } => write!(f, "bad batch: {reason}"),
            TrainError::Net(e) => e.fmt(f),
            TrainError::Shape(e) => e.fmt(f),
            TrainError::Checkpoint(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<UNetError> for TrainError {
    fn from(e: UNetError) -> Self {
        TrainError::Net(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Shape(e)
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

/// Pixel statistics of the [0,1]-scaled corpus; standardized pixel =
/// (p - mean) / std.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn normalize(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let (m, s) = (self.mean as f32, self.std as f32);
        image.map(|p| (p - m) / s)
    }

    pub fn denormalize(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let (m, s) = (self.mean as f32, self.std as f32);
        image.map(|p| p * s + m)
    }
}

/// Population mean and standard deviation over every pixel of the corpus.
pub fn compute_norm_stats(corpus: &[Tensor<f32>]) -> Result<NormStats, TrainError> {
    let count: usize = corpus.iter().map(Tensor::numel).sum();
    if count == 0 {
        return Err(TrainError::EmptyCorpus);
    }
    let mut sum = 0.0f64;
    for image in corpus {
        for &p in image.data() {
            sum += p as f64;
        }
    }
    let mean = sum / count as f64;
    let mut sq = 0.0f64;
    for image in corpus {
        for &p in image.data() {
            let d = p as f64 - mean;
            sq += d * d;
        }
    }
    let std = (sq / count as f64).sqrt();
    if !(std > 1e-9) {
        return Err(TrainError::ConstantCorpus);
    }
    Ok(NormStats { mean, std })
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 10,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

/// Adaptive moment estimation with decoupled weight decay and bias
/// correction. Moments live per parameter name.
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        AdamW {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per batch before
    /// updating the parameters of that batch.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<f32>, grad: &[f32]) {
        debug_assert_eq!(param.numel(), grad.len());
        let m = self
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = self
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let corr1 = (1.0 - self.beta1.powi(self.step as i32)) as f32;
        let corr2 = (1.0 - self.beta2.powi(self.step as i32)) as f32;
        let lr = self.learning_rate as f32;
        let wd = self.weight_decay as f32;
        let eps = self.epsilon as f32;
        for ((p, &g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *p = *p - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * *p;
        }
    }
}

/// One optimization step over a batch of standardized images.
/// Returns the pre-update loss.
pub fn train_step(
    model: &mut UNetModel<f32>,
    schedule: &DiffusionSchedule,
    batch: &[Tensor<f32>],
    opt: &mut AdamW,
    rng: &mut impl Rng,
) -> Result<f64, TrainError> {
    let n = batch.len();
    if n == 0 {
        return Err(TrainError::BadBatch { reason: "empty batch".into() });
    }
    let (h, w) = (model.config.image_height, model.config.image_width);
    let item = h * w;
    for image in batch {
        if image.shape() != [h, w, 1] {
            return Err(TrainError::BadBatch {
                reason: format!("image shape {:?}, model expects [{h}, {w}, 1]", image.shape()),
            });
        }
    }

    // Per image: a uniform diffusion time, then its noise field.
    let mut x_t = Tensor::<f32>::zeros(vec![n, h, w, 1]);
    let mut eps = Tensor::<f32>::zeros(vec![n, h, w, 1]);
    let mut variances = Vec::with_capacity(n);
    for (i, image) in batch.iter().enumerate() {
        let t: f64 = rng.random();
        let noise_field = Tensor::new(
            vec![h, w, 1],
            (0..item).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .expect("noise sized to image");
        let pair = noising::noisify(schedule, image, &noise_field, t).map_err(|e| match e {
            noising::NoisingError::Shape(s) => TrainError::Shape(s),
            other => TrainError::BadBatch { reason: other.to_string() },
        })?;
        variances.push(pair.noise_rate * pair.noise_rate);
        x_t.data_mut()[i * item..][..item].copy_from_slice(pair.x_t.data());
        eps.data_mut()[i * item..][..item].copy_from_slice(noise_field.data());
    }

    let mut tape = Tape::new();
    let x_id = tape.constant(x_t);
    let pass = model.forward(&mut tape, x_id, &variances, NormMode::Train)?;
    let eps_id = tape.constant(eps);
    let loss_id = tape.mean_abs(pass.output, eps_id)?;
    let loss = tape.value(loss_id).data()[0] as f64;

    let grads = tape.backward(loss_id)?;
    opt.begin_step();
    for (name, id) in &pass.param_ids {
        if let Some(grad) = grads.get(*id) {
            let param = model.params.get_mut(name).expect("forward used existing params");
            opt.update(name, param, grad.data());
        }
    }
    model.update_moving_stats(&pass.batch_stats, STATS_MOMENTUM);

    if !loss.is_finite() {
        for (name, param) in &model.params {
            if !param.is_finite() {
                return Err(TrainError::NonFinite { name: name.clone() });
            }
        }
        return Err(TrainError::NonFinite { name: "loss".into() });
    }
    Ok(loss)
}

/// Runs the full loop: shuffles the standardized corpus every epoch, takes
/// one step per batch, reports the per-epoch mean loss through `on_epoch`,
/// and writes a final checkpoint when a path is given.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut UNetModel<f32>,
    schedule: &DiffusionSchedule,
    norm: &NormStats,
    corpus: &[Tensor<f32>],
    config: &TrainConfig,
    checkpoint_out: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if config.batch_size == 0 {
        return Err(TrainError::BadBatch { reason: "batch size must be >= 1".into() });
    }
    let mut rng = stream(config.seed, "train");
    let mut opt = AdamW::new(config);
    let mut losses = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    let mut batch_buf: Vec<Tensor<f32>> = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.epochs {
        // Fisher-Yates with the shared training stream.
        for i in (1..indices.len()).rev() {
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }
        let mut weighted = 0.0f64;
        let mut seen = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            batch_buf.clear();
            batch_buf.extend(chunk.iter().map(|&i| corpus[i].clone()));
            let loss = train_step(model, schedule, &batch_buf, &mut opt, &mut rng)?;
            weighted += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean = weighted / seen as f64;
        losses.push(mean);
        on_epoch(epoch, mean);
    }

    if let Some(path) = checkpoint_out {
        checkpoint::save_checkpoint(model, norm, schedule, path)?;
    }
    Ok(losses)
}
