//! Compact U-Net noise predictor.
//!
//! Maps a batch of noisy images plus their noise variances to a predicted
//! noise field of the same shape. Three resolution levels of residual
//! blocks with average-pool downsampling, bilinear upsampling and channel
//! concat skip connections across the two halves; the noise variance
//! enters once, sinusoidally embedded and tiled over the full-resolution
//! grid.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;

use rand::Rng;

use crate::kernels;
use crate::schedule::{DiffusionSchedule, ScheduleError};
use crate::tape::{Tape, ValueId};
use crate::tensor::{elem, image_dims, Element, Tensor, TensorError};

/// Signal rates below this would make the marginal inversion blow up.
const MIN_SIGNAL_RATE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum UNetError {
    /// Spatial extent not divisible by 2^levels.
    BadImageSize { height: usize, width: usize, levels: usize },
    BadConfig { reason: String },
    NonPositiveVariance { variance: f64 },
    SignalRateTooSmall { signal_rate: f64 },
    MissingParam { name: String },
    Shape(TensorError),
    Schedule(ScheduleError),
}

impl fmt::Display for UNetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UNetError::BadImageSize { height, width, levels } => write!(
                f,
                "image {height}x{width} not divisible by 2^{levels} as the {levels}-level network requires"
            ),
            UNetError::BadConfig { reason } => write!(f, "invalid network config: {reason}"),
            UNetError::NonPositiveVariance { variance } => {
                write!(f, "noise variance must be positive, got {variance}")
            }
            UNetError::SignalRateTooSmall { signal_rate } => {
                write!(f, "signal rate {signal_rate} too small to invert the marginal")
            }
            UNetError::MissingParam { name } => write!(f, "model parameter {name} missing"),
            UNetError::Shape(e) => e.fmt(f),
            UNetError::Schedule(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for UNetError {}

impl From<TensorError> for UNetError {
    fn from(e: TensorError) -> Self {
        UNetError::Shape(e)
    }
}

impl From<ScheduleError> for UNetError {
    fn from(e: ScheduleError) -> Self {
        UNetError::Schedule(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Channel width per resolution level.
    pub widths: Vec<usize>,
    pub bottleneck: usize,
    /// Residual blocks per level half.
    pub block_depth: usize,
    /// Sinusoidal embedding size; half sine lanes, half cosine lanes.
    pub embedding_size: usize,
    pub min_freq: f64,
    pub max_freq: f64,
}

impl UNetConfig {
    /// Full-scale profile for 48x192 images.
    pub fn full() -> Self {
        UNetConfig {
            image_height: 48,
            image_width: 192,
            widths: vec![32, 64, 96],
            bottleneck: 128,
            block_depth: 2,
            embedding_size: 32,
            min_freq: 1.0,
            max_freq: 1000.0,
        }
    }

    /// Reduced profile for fast 24x96 experiments.
    pub fn desk() -> Self {
        UNetConfig {
            image_height: 24,
            image_width: 96,
            widths: vec![16, 32, 48],
            bottleneck: 64,
            block_depth: 2,
            embedding_size: 32,
            min_freq: 1.0,
            max_freq: 1000.0,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        let levels = self.levels();
        if levels == 0 {
            return Err(UNetError::BadConfig { reason: "need at least one level width".into() });
        }
        let div = 1usize << levels;
        if self.image_height % div != 0 || self.image_width % div != 0 {
            return Err(UNetError::BadImageSize {
                height: self.image_height,
                width: self.image_width,
                levels,
            });
        }
        if self.block_depth == 0 {
            return Err(UNetError::BadConfig { reason: "block_depth must be >= 1".into() });
        }
        if self.embedding_size == 0 || self.embedding_size % 2 != 0 {
            return Err(UNetError::BadConfig { reason: "embedding size must be even and > 0".into() });
        }
        if self.widths.iter().any(|&w| w == 0) || self.bottleneck == 0 {
            return Err(UNetError::BadConfig { reason: "channel widths must be positive".into() });
        }
        if !(self.min_freq > 0.0 && self.max_freq >= self.min_freq) {
            return Err(UNetError::BadConfig { reason: "need 0 < min_freq <= max_freq".into() });
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a noise variance: sine lanes at geometrically
/// spaced frequencies followed by the matching cosine lanes.
pub fn sinusoidal_embedding(config: &UNetConfig, variance: f64) -> Result<Vec<f64>, UNetError> {
    if variance <= 0.0 {
        return Err(UNetError::NonPositiveVariance { variance });
    }
    let half = config.embedding_size / 2;
    let mut out = vec![0.0; config.embedding_size];
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = config.min_freq * (config.max_freq / config.min_freq).powf(frac);
        let angle = TAU * freq * variance;
        out[k] = angle.sin();
        out[half + k] = angle.cos();
    }
    Ok(out)
}

/// Normalization mode: training uses statistics of the current batch and
/// reports them for the moving-average update; inference replays the
/// stored moving averages so outputs do not depend on batch composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Result of one tape forward pass.
pub struct ForwardPass<T> {
    pub output: ValueId,
    /// Tape leaf of every trainable parameter, keyed by name.
    pub param_ids: BTreeMap<String, ValueId>,
    /// Batch statistics per normalization layer (training mode only).
    pub batch_stats: Vec<(String, Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone)]
pub struct UNetModel<T> {
    pub config: UNetConfig,
    /// Trainable parameters; BTreeMap so every traversal is in name order.
    pub params: BTreeMap<String, Tensor<T>>,
    /// Moving normalization statistics (not trained, but persisted).
    pub stats: BTreeMap<String, Tensor<T>>,
}

/// Shapes of all parameters and stat buffers implied by a config.
/// Returns (params, stats) maps of name -> shape.
pub fn parameter_spec(
    config: &UNetConfig,
) -> Result<(BTreeMap<String, Vec<usize>>, BTreeMap<String, Vec<usize>>), UNetError> {
    config.validate()?;
    let mut params = BTreeMap::new();
    let mut stats = BTreeMap::new();

    fn res_block(
        params: &mut BTreeMap<String, Vec<usize>>,
        stats: &mut BTreeMap<String, Vec<usize>>,
        prefix: &str,
        cin: usize,
        cout: usize,
    ) {
        params.insert(format!("{prefix}.norm.scale"), vec![cin]);
        stats.insert(format!("{prefix}.norm.moving_mean"), vec![cin]);
        stats.insert(format!("{prefix}.norm.moving_var"), vec![cin]);
        params.insert(format!("{prefix}.conv1.kernel"), vec![3, 3, cin, cout]);
        params.insert(format!("{prefix}.conv1.bias"), vec![cout]);
        params.insert(format!("{prefix}.conv2.kernel"), vec![3, 3, cout, cout]);
        params.insert(format!("{prefix}.conv2.bias"), vec![cout]);
        if cin != cout {
            params.insert(format!("{prefix}.skip.kernel"), vec![1, 1, cin, cout]);
            params.insert(format!("{prefix}.skip.bias"), vec![cout]);
        }
    }

    params.insert("stem.kernel".into(), vec![1, 1, 1, config.widths[0]]);
    params.insert("stem.bias".into(), vec![config.widths[0]]);

    let mut ch = config.widths[0] + config.embedding_size;
    let mut skips: Vec<usize> = Vec::new();
    for (level, &width) in config.widths.iter().enumerate() {
        for block in 0..config.block_depth {
            res_block(&mut params, &mut stats, &format!("down{level}.res{block}"), ch, width);
            ch = width;
            skips.push(width);
        }
    }
    for block in 0..config.block_depth {
        res_block(&mut params, &mut stats, &format!("mid.res{block}"), ch, config.bottleneck);
        ch = config.bottleneck;
    }
    for (level, &width) in config.widths.iter().enumerate().rev() {
        for block in 0..config.block_depth {
            let skip = skips.pop().expect("skip stack balanced by construction");
            res_block(&mut params, &mut stats, &format!("up{level}.res{block}"), ch + skip, width);
            ch = width;
        }
    }
    params.insert("head.kernel".into(), vec![1, 1, ch, 1]);
    params.insert("head.bias".into(), vec![1]);
    Ok((params, stats))
}

impl<T: Element> UNetModel<T> {
    /// Builds a freshly initialized model: the output head and all biases
    /// start at zero, normalization scales at one, and every other kernel
    /// is drawn uniformly with bound 1/sqrt(fan_in) in name order from the
    /// given generator.
    pub fn init(config: UNetConfig, rng: &mut impl Rng) -> Result<Self, UNetError> {
        let (shapes, stat_shapes) = parameter_spec(&config)?;
        let mut params = BTreeMap::new();
        for (name, shape) in shapes {
            let tensor = if name.starts_with("head.") || name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else if name.ends_with(".norm.scale") {
                Tensor::full(shape, T::one())
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let numel = shape.iter().product();
                let data: Vec<T> =
                    (0..numel).map(|_| elem(rng.random_range(-bound..bound))).collect();
                Tensor::new(shape, data).expect("init data sized to shape")
            };
            params.insert(name, tensor);
        }
        let mut stats = BTreeMap::new();
        for (name, shape) in stat_shapes {
            let tensor = if name.ends_with(".moving_var") {
                Tensor::full(shape, T::one())
            } else {
                Tensor::zeros(shape)
            };
            stats.insert(name, tensor);
        }
        Ok(UNetModel { config, params, stats })
    }

    /// Number of trainable parameter values.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    fn param(&self, tape: &mut Tape<T>, ids: &mut BTreeMap<String, ValueId>, name: &str) -> ValueId {
        *ids.entry(name.to_string()).or_insert_with(|| {
            let tensor = self.params.get(name).unwrap_or_else(|| panic!("parameter {name} exists"));
            tape.parameter(tensor.clone())
        })
    }

    fn residual_block(
        &self,
        tape: &mut Tape<T>,
        ids: &mut BTreeMap<String, ValueId>,
        batch_stats: &mut Vec<(String, Vec<T>, Vec<T>)>,
        mode: NormMode,
        prefix: &str,
        x: ValueId,
        width: usize,
    ) -> Result<ValueId, UNetError> {
        let cin = *tape.value(x).shape().last().unwrap();
        let shortcut = if cin == width {
            x
        } else {
            let k = self.param(tape, ids, &format!("{prefix}.skip.kernel"));
            let b = self.param(tape, ids, &format!("{prefix}.skip.bias"));
            tape.conv2d(x, k, b)?
        };

        let scale = self.param(tape, ids, &format!("{prefix}.norm.scale"));
        let norm_name = format!("{prefix}.norm");
        let (mean, var) = match mode {
            NormMode::Train => {
                let (mean, var) = kernels::batch_moments(tape.value(x));
                batch_stats.push((norm_name, mean.clone(), var.clone()));
                (mean, var)
            }
            NormMode::Eval => {
                let mean = self
                    .stats
                    .get(&format!("{norm_name}.moving_mean"))
                    .ok_or_else(|| UNetError::MissingParam { name: format!("{norm_name}.moving_mean") })?;
                let var = self
                    .stats
                    .get(&format!("{norm_name}.moving_var"))
                    .ok_or_else(|| UNetError::MissingParam { name: format!("{norm_name}.moving_var") })?;
                (mean.data().to_vec(), var.data().to_vec())
            }
        };
        let normed = tape.norm(x, scale, mean, var, mode == NormMode::Train);
        let activated = tape.swish(normed);
        let k1 = self.param(tape, ids, &format!("{prefix}.conv1.kernel"));
        let b1 = self.param(tape, ids, &format!("{prefix}.conv1.bias"));
        let y = tape.conv2d(activated, k1, b1)?;
        let k2 = self.param(tape, ids, &format!("{prefix}.conv2.kernel"));
        let b2 = self.param(tape, ids, &format!("{prefix}.conv2.bias"));
        let y = tape.conv2d(y, k2, b2)?;
        Ok(tape.add(y, shortcut)?)
    }

    /// Runs the network over a batch already recorded on the tape.
    /// `noise_variances` holds one variance per batch item.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        noisy_images: ValueId,
        noise_variances: &[f64],
        mode: NormMode,
    ) -> Result<ForwardPass<T>, UNetError> {
        self.forward_seeded(tape, noisy_images, noise_variances, mode, BTreeMap::new())
    }

    /// Like [`UNetModel::forward`] but reuses pre-registered parameter
    /// leaves from `ids`; names absent from the map are registered from the
    /// model as usual. Verification harnesses use this to wire their own
    /// perturbed leaves into the network.
    pub fn forward_seeded(
        &self,
        tape: &mut Tape<T>,
        noisy_images: ValueId,
        noise_variances: &[f64],
        mode: NormMode,
        ids: BTreeMap<String, ValueId>,
    ) -> Result<ForwardPass<T>, UNetError> {
        self.config.validate()?;
        let (n, h, w, c) = image_dims(tape.value(noisy_images))?;
        if h != self.config.image_height || w != self.config.image_width || c != 1 {
            return Err(UNetError::BadConfig {
                reason: format!(
                    "input {h}x{w}x{c} does not match configured {}x{}x1",
                    self.config.image_height, self.config.image_width
                ),
            });
        }
        if noise_variances.len() != n {
            return Err(UNetError::BadConfig {
                reason: format!("{} variances for a batch of {n}", noise_variances.len()),
            });
        }

        // Embed each item's variance and tile it over the spatial grid.
        let e = self.config.embedding_size;
        let mut emb_data = Vec::with_capacity(n * h * w * e);
        for &variance in noise_variances {
            let lanes = sinusoidal_embedding(&self.config, variance)?;
            let lanes: Vec<T> = lanes.into_iter().map(elem).collect();
            for _ in 0..h * w {
                emb_data.extend_from_slice(&lanes);
            }
        }
        let emb_shape = if tape.value(noisy_images).shape().len() == 4 {
            vec![n, h, w, e]
        } else {
            vec![h, w, e]
        };
        let embedding = tape.constant(Tensor::new(emb_shape, emb_data).expect("embedding sized"));

        let mut ids = ids;
        let mut batch_stats = Vec::new();

        let stem_k = self.param(tape, &mut ids, "stem.kernel");
        let stem_b = self.param(tape, &mut ids, "stem.bias");
        let stem = tape.conv2d(noisy_images, stem_k, stem_b)?;
        let mut x = tape.concat_channels(stem, embedding)?;

        let mut skips: Vec<ValueId> = Vec::new();
        for (level, &width) in self.config.widths.iter().enumerate() {
            for block in 0..self.config.block_depth {
                x = self.residual_block(
                    tape,
                    &mut ids,
                    &mut batch_stats,
                    mode,
                    &format!("down{level}.res{block}"),
                    x,
                    width,
                )?;
                skips.push(x);
            }
            x = tape.avgpool2(x)?;
        }

        for block in 0..self.config.block_depth {
            x = self.residual_block(
                tape,
                &mut ids,
                &mut batch_stats,
                mode,
                &format!("mid.res{block}"),
                x,
                self.config.bottleneck,
            )?;
        }

        for (level, &width) in self.config.widths.iter().enumerate().rev() {
            x = tape.upsample_bilinear2(x)?;
            for block in 0..self.config.block_depth {
                let skip = skips.pop().expect("one skip per down-half residual block");
                x = tape.concat_channels(x, skip)?;
                x = self.residual_block(
                    tape,
                    &mut ids,
                    &mut batch_stats,
                    mode,
                    &format!("up{level}.res{block}"),
                    x,
                    width,
                )?;
            }
        }
        assert!(skips.is_empty(), "skip stack must balance after the up half");

        let head_k = self.param(tape, &mut ids, "head.kernel");
        let head_b = self.param(tape, &mut ids, "head.bias");
        let output = tape.conv2d(x, head_k, head_b)?;
        Ok(ForwardPass { output, param_ids: ids, batch_stats })
    }

    /// Folds freshly observed batch statistics into the moving averages.
    pub fn update_moving_stats(&mut self, batch_stats: &[(String, Vec<T>, Vec<T>)], momentum: f64) {
        let keep = elem::<T>(momentum);
        let take = elem::<T>(1.0 - momentum);
        for (name, mean, var) in batch_stats {
            for (suffix, fresh) in [(".moving_mean", mean), (".moving_var", var)] {
                let slot = self
                    .stats
                    .get_mut(&format!("{name}{suffix}"))
                    .expect("stat buffers exist for every norm layer");
                for (s, &f) in slot.data_mut().iter_mut().zip(fresh) {
                    *s = keep * *s + take * f;
                }
            }
        }
    }
}

/// Evaluation-mode prediction of both noise and clean-image components:
/// eps_pred = net(x_t, noise_rate^2), x0_pred = (x_t - noise_rate *
/// eps_pred) / signal_rate.
pub fn predict_components<T: Element>(
    model: &UNetModel<T>,
    schedule: &DiffusionSchedule,
    x_t: &Tensor<T>,
    ts: &[f64],
) -> Result<(Tensor<T>, Tensor<T>), UNetError> {
    let (n, h, w, c) = image_dims(x_t)?;
    if ts.len() != n {
        return Err(UNetError::BadConfig { reason: format!("{} times for a batch of {n}", ts.len()) });
    }
    let mut rates = Vec::with_capacity(n);
    for &t in ts {
        let (signal, noise) = schedule.rates(t)?;
        if signal < MIN_SIGNAL_RATE {
            return Err(UNetError::SignalRateTooSmall { signal_rate: signal });
        }
        rates.push((signal, noise));
    }
    let variances: Vec<f64> = rates.iter().map(|(_, noise)| noise * noise).collect();

    let mut tape = Tape::new();
    let x_id = tape.constant(x_t.clone());
    let pass = model.forward(&mut tape, x_id, &variances, NormMode::Eval)?;
    let eps_pred = tape.value(pass.output).clone();

    let mut x0_pred = Tensor::zeros(x_t.shape().to_vec());
    let item = h * w * c;
    for it in 0..n {
        let (signal, noise) = rates[it];
        let (s, nr) = (elem::<T>(signal), elem::<T>(noise));
        let xs = &x_t.data()[it * item..][..item];
        let es = &eps_pred.data()[it * item..][..item];
        let os = &mut x0_pred.data_mut()[it * item..][..item];
        for ((o, &x), &e) in os.iter_mut().zip(xs).zip(es) {
            *o = (x - nr * e) / s;
        }
    }
    Ok((eps_pred, x0_pred))
}
