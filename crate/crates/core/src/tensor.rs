//! Dense row-major tensor storage.
//!
//! Images use height x width x channels layout; batches prepend a leading
//! batch axis. All numeric work is generic over [`Element`] so the same
//! kernels run in 32-bit compute mode and in the 64-bit verification mode
//! used by the gradient checker.

use std::fmt;

/// Scalar types the tensor engine operates on (`f32` for compute, `f64` for
/// verification). Mixing precisions inside one expression is rejected at
/// compile time because every op is generic over a single `T`.
pub trait Element: num_traits::Float + Send + Sync + fmt::Debug + 'static {}

impl Element for f32 {}
impl Element for f64 {}

/// Cast an `f64` constant into the active element type.
#[inline]
pub fn elem<T: Element>(x: f64) -> T {
    T::from(x).expect("finite f64 converts to any Element")
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// `shape` does not multiply out to `len` data values.
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    /// An op received a tensor whose rank it cannot interpret.
    BadRank { expected: &'static str, got: Vec<usize> },
    /// Input channel count does not match the kernel's input channels.
    ChannelMismatch { input: Vec<usize>, kernel: Vec<usize> },
    /// Only square 1x1 and 3x3 kernels are supported.
    KernelSize { kernel: Vec<usize> },
    /// Elementwise op over differently shaped operands.
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    /// Pooling requires even spatial extents; no implicit padding.
    OddSpatial { height: usize, width: usize },
    /// Channel concat requires matching spatial shapes.
    SpatialMismatch { left: Vec<usize>, right: Vec<usize> },
    /// Inner dimensions of a vector-matrix product disagree.
    DimMismatch { input: Vec<usize>, weight: Vec<usize> },
    /// Backpropagation can only start from a single-element loss.
    NonScalarLoss { shape: Vec<usize> },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, len } => {
                write!(f, "shape {shape:?} implies {} values, got {len}", shape.iter().product::<usize>())
            }
            TensorError::BadRank { expected, got } => {
                write!(f, "expected a {expected} tensor, got shape {got:?}")
            }
            TensorError::ChannelMismatch { input, kernel } => {
                write!(f, "input shape {input:?} and kernel shape {kernel:?} disagree on channels")
            }
            TensorError::KernelSize { kernel } => {
                write!(f, "unsupported kernel shape {kernel:?} (1x1 or 3x3 only)")
            }
            TensorError::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left:?} vs {right:?}")
            }
            TensorError::OddSpatial { height, width } => {
                write!(f, "pooling needs even spatial size, got {height}x{width}")
            }
            TensorError::SpatialMismatch { left, right } => {
                write!(f, "spatial mismatch for channel concat: {left:?} vs {right:?}")
            }
            TensorError::DimMismatch { input, weight } => {
                write!(f, "inner dimensions disagree: input {input:?} vs weight {weight:?}")
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Rank-N numeric array. Immutable once built; ops return fresh tensors.
///
/// Dimension sizes of zero are tolerated only as the degenerate case of a
/// zero-channel operand to channel concat.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// Single-element tensor of shape `[1]`; the representation of scalars
    /// (losses) on the tape.
    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major offset of a multi-index; test and renderer convenience.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            off = off * d + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combine; shapes must match.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| elem(x.to_f64().unwrap())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64().unwrap())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Interpret a tensor as a (possibly implicit) batch of images.
/// Rank 3 is one `[H, W, C]` image, rank 4 is `[N, H, W, C]`.
pub fn image_dims<T: Element>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize), TensorError> {
    match *t.shape() {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(TensorError::BadRank { expected: "rank-3 or rank-4 image", got: t.shape().to_vec() }),
    }
}

/// Rebuild an image-shaped tensor with a different channel count, keeping
/// the operand's rank (3 or 4).
pub fn with_channels(shape: &[usize], channels: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("image shape has a channel axis") = channels;
    s
}
