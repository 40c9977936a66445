//! Denoising diffusion implicit model over procedurally generated bridge
//! silhouettes: a self-contained tensor/autodiff engine, a compact U-Net
//! noise predictor, deterministic reverse sampling, and the corpus
//! generator plus file formats that tie the pipeline together.

pub mod bridges;
pub mod checkpoint;
pub mod fdcheck;
pub mod kernels;
pub mod noising;
pub mod pgm;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use schedule::DiffusionSchedule;
pub use tensor::{Element, Tensor, TensorError};
