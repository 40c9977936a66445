//! Bit-exact binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "DDIMBRG1"
//! version          u32      = 1
//! image_height     u32
//! image_width      u32
//! max_signal_rate  f64
//! min_signal_rate  f64
//! norm_mean        f64
//! norm_std         f64
//! widths_len       u32      level widths followed by the bottleneck width
//! widths           u32 * widths_len
//! block_depth      u32
//! embedding_size   u32
//! tensor_count     u32
//! per tensor:      name_len u16, name UTF-8, rank u8, dims u32 * rank,
//!                  values f32 * numel (row-major)
//! ```
//!
//! Tensors are ordered by name lexicographically, so two saves of the same
//! model produce identical files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;
use crate::trainer::NormStats;
use crate::unet::{parameter_spec, UNetConfig, UNetModel};

pub const MAGIC: &[u8; 8] = b"DDIMBRG1";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io { path: PathBuf, source: io::Error },
    BadMagic { path: PathBuf, found: Vec<u8> },
    BadVersion { path: PathBuf, found: u32 },
    Corrupt { path: PathBuf, offset: usize, what: &'static str },
    NonFinite { name: String },
    /// Stored tensors disagree with the shapes the header config implies.
    WiringMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    BadHeader { reason: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CheckpointError::BadMagic { path, found } => write!(
                f,
                "{}: bad magic {:?}, want {:?}",
                path.display(),
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(MAGIC)
            ),
            CheckpointError::BadVersion { path, found } => {
                write!(f, "{}: unsupported version {found}, want {VERSION}", path.display())
            }
            CheckpointError::Corrupt { path, offset, what } => {
                write!(f, "{}: corrupt at byte {offset}: expected {what}", path.display())
            }
            CheckpointError::NonFinite { name } => {
                write!(f, "refusing to save non-finite tensor {name}")
            }
            CheckpointError::WiringMismatch { name, expected, got } => {
                write!(f, "tensor {name}: shape {got:?} does not match configured {expected:?}")
            }
            CheckpointError::BadHeader { reason } => write!(f, "bad header: {reason}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

pub fn save_checkpoint(
    model: &UNetModel<f32>,
    stats: &NormStats,
    schedule: &DiffusionSchedule,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(model, stats, schedule)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn encode_checkpoint(
    model: &UNetModel<f32>,
    stats: &NormStats,
    schedule: &DiffusionSchedule,
) -> Result<Vec<u8>, CheckpointError> {
    // Merged, name-ordered view of parameters and stat buffers.
    let mut tensors: BTreeMap<&str, &Tensor<f32>> = BTreeMap::new();
    for (name, tensor) in model.params.iter().chain(model.stats.iter()) {
        if !tensor.is_finite() {
            return Err(CheckpointError::NonFinite { name: name.clone() });
        }
        tensors.insert(name, tensor);
    }

    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.image_height as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.image_width as u32).to_le_bytes());
    out.extend_from_slice(&schedule.max_signal_rate().to_le_bytes());
    out.extend_from_slice(&schedule.min_signal_rate().to_le_bytes());
    out.extend_from_slice(&stats.mean.to_le_bytes());
    out.extend_from_slice(&stats.std.to_le_bytes());
    out.extend_from_slice(&((cfg.widths.len() + 1) as u32).to_le_bytes());
    for &w in &cfg.widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(cfg.bottleneck as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.block_depth as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.embedding_size as u32).to_le_bytes());

    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt {
                path: self.path.to_path_buf(),
                offset: self.pos,
                what,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(
    bytes: &[u8],
    path: &Path,
) -> Result<(UNetModel<f32>, NormStats, DiffusionSchedule), CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_path_buf(), found: magic.to_vec() });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { path: path.to_path_buf(), found: version });
    }
    let image_height = cur.u32("image height")? as usize;
    let image_width = cur.u32("image width")? as usize;
    let max_signal_rate = cur.f64("max signal rate")?;
    let min_signal_rate = cur.f64("min signal rate")?;
    let norm_mean = cur.f64("norm mean")?;
    let norm_std = cur.f64("norm std")?;
    let widths_len = cur.u32("widths length")? as usize;
    if widths_len < 2 {
        return Err(CheckpointError::BadHeader {
            reason: format!("widths list needs >= 2 entries, got {widths_len}"),
        });
    }
    let mut widths = Vec::with_capacity(widths_len);
    for _ in 0..widths_len {
        widths.push(cur.u32("width entry")? as usize);
    }
    let bottleneck = widths.pop().expect("length checked above");
    let block_depth = cur.u32("block depth")? as usize;
    let embedding_size = cur.u32("embedding size")? as usize;

    let config = UNetConfig {
        image_height,
        image_width,
        widths,
        bottleneck,
        block_depth,
        embedding_size,
        min_freq: 1.0,
        max_freq: 1000.0,
    };
    let schedule = DiffusionSchedule::new(max_signal_rate, min_signal_rate)
        .map_err(|e| CheckpointError::BadHeader { reason: e.to_string() })?;
    let norm = NormStats { mean: norm_mean, std: norm_std };

    let tensor_count = cur.u32("tensor count")? as usize;
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..tensor_count {
        let name_len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::Corrupt {
                path: path.to_path_buf(),
                offset: cur.pos,
                what: "UTF-8 tensor name",
            })?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4, "tensor values")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|_| CheckpointError::BadHeader { reason: format!("tensor {name} shape") })?;
        tensors.insert(name, tensor);
    }

    // Wiring check: the stored tensor set must be exactly what the config
    // implies, shape for shape.
    let (param_shapes, stat_shapes) = parameter_spec(&config)
        .map_err(|e| CheckpointError::BadHeader { reason: e.to_string() })?;
    let mut params = BTreeMap::new();
    let mut stats = BTreeMap::new();
    for (name, shape) in param_shapes.iter().chain(stat_shapes.iter()) {
        let tensor = tensors.remove(name).ok_or_else(|| CheckpointError::WiringMismatch {
            name: name.clone(),
            expected: shape.clone(),
            got: vec![],
        })?;
        if tensor.shape() != &shape[..] {
            return Err(CheckpointError::WiringMismatch {
                name: name.clone(),
                expected: shape.clone(),
                got: tensor.shape().to_vec(),
            });
        }
        if param_shapes.contains_key(name) {
            params.insert(name.clone(), tensor);
        } else {
            stats.insert(name.clone(), tensor);
        }
    }
    if let Some((name, tensor)) = tensors.into_iter().next() {
        return Err(CheckpointError::WiringMismatch {
            name,
            expected: vec![],
            got: tensor.shape().to_vec(),
        });
    }

    Ok((UNetModel { config, params, stats }, norm, schedule))
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(UNetModel<f32>, NormStats, DiffusionSchedule), CheckpointError> {
    let bytes =
        fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes, path)
}
