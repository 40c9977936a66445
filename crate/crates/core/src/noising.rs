//! Forward noising process.
//!
//! The closed-form marginal mixes a clean image with caller-supplied noise
//! at schedule rates; the single-step form and the collinearity
//! construction exist to make the underlying variance algebra directly
//! testable. Noise tensors are always passed in, never drawn here.

use std::fmt;

use crate::schedule::{DiffusionSchedule, ScheduleError};
use crate::tensor::{elem, Element, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum NoisingError {
    Shape(TensorError),
    Schedule(ScheduleError),
    BetaOutOfRange { beta: f64 },
    /// sigma must satisfy sigma <= noise_rate(t_target).
    SigmaTooLarge { sigma: f64, bound: f64 },
}

impl fmt::Display for NoisingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoisingError::Shape(e) => e.fmt(f),
            NoisingError::Schedule(e) => e.fmt(f),
            NoisingError::BetaOutOfRange { beta } => {
                write!(f, "beta {beta} outside the open interval (0, 1)")
            }
            NoisingError::SigmaTooLarge { sigma, bound } => {
                write!(f, "sigma {sigma} exceeds the noise rate bound {bound}")
            }
        }
    }
}

impl std::error::Error for NoisingError {}

impl From<TensorError> for NoisingError {
    fn from(e: TensorError) -> Self {
        NoisingError::Shape(e)
    }
}

impl From<ScheduleError> for NoisingError {
    fn from(e: ScheduleError) -> Self {
        NoisingError::Schedule(e)
    }
}

/// A noised image together with everything that produced it.
#[derive(Debug, Clone)]
pub struct NoisyPair<T> {
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: f64,
    pub signal_rate: f64,
    pub noise_rate: f64,
}

fn scaled_sum<T: Element>(
    a: &Tensor<T>,
    ca: f64,
    b: &Tensor<T>,
    cb: f64,
) -> Result<Tensor<T>, TensorError> {
    let (ca, cb) = (elem::<T>(ca), elem::<T>(cb));
    a.zip_map(b, |x, y| ca * x + cb * y)
}

/// Closed-form marginal: x_t = signal_rate * x0 + noise_rate * eps.
pub fn noisify<T: Element>(
    schedule: &DiffusionSchedule,
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    t: f64,
) -> Result<NoisyPair<T>, NoisingError> {
    let (signal_rate, noise_rate) = schedule.rates(t)?;
    let x_t = scaled_sum(x0, signal_rate, eps, noise_rate)?;
    Ok(NoisyPair { x_t, eps: eps.clone(), t, signal_rate, noise_rate })
}

/// One step of the incremental process:
/// sqrt(1 - beta) * x_prev + sqrt(beta) * eps.
pub fn single_step<T: Element>(
    x_prev: &Tensor<T>,
    eps: &Tensor<T>,
    beta: f64,
) -> Result<Tensor<T>, NoisingError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(NoisingError::BetaOutOfRange { beta });
    }
    Ok(scaled_sum(x_prev, (1.0 - beta).sqrt(), eps, beta.sqrt())?)
}

/// Collinearity construction with a free sigma:
/// sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar - sigma^2) * eps_shared + sigma * eps_fresh.
///
/// With sigma = 0 this reduces bit-exactly to [`noisify`] at `t_target`,
/// reusing `eps_shared` as the single noise value.
pub fn collinear_point<T: Element>(
    schedule: &DiffusionSchedule,
    x0: &Tensor<T>,
    eps_shared: &Tensor<T>,
    eps_fresh: &Tensor<T>,
    t_target: f64,
    sigma: f64,
) -> Result<Tensor<T>, NoisingError> {
    let (signal_rate, noise_rate) = schedule.rates(t_target)?;
    if sigma < 0.0 || sigma > noise_rate {
        return Err(NoisingError::SigmaTooLarge { sigma, bound: noise_rate });
    }
    if sigma == 0.0 {
        return Ok(scaled_sum(x0, signal_rate, eps_shared, noise_rate)?);
    }
    let shared_coef = (noise_rate * noise_rate - sigma * sigma).max(0.0).sqrt();
    let mixed = scaled_sum(x0, signal_rate, eps_shared, shared_coef)?;
    Ok(scaled_sum(&mixed, 1.0, eps_fresh, sigma)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::default()
    }

    #[test]
    fn zero_noise_scales_signal_only() {
        let x0 = Tensor::<f64>::new(vec![2, 2, 1], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let eps = Tensor::zeros(vec![2, 2, 1]);
        let pair = noisify(&sched(), &x0, &eps, 0.3).unwrap();
        let want = x0.map(|v| v * pair.signal_rate);
        assert_eq!(pair.x_t, want);
    }

    #[test]
    fn zero_signal_scales_noise_only() {
        let x0 = Tensor::<f64>::zeros(vec![3]);
        let eps = Tensor::new(vec![3], vec![1.0, -1.0, 2.0]).unwrap();
        let pair = noisify(&sched(), &x0, &eps, 0.7).unwrap();
        let want = eps.map(|v| v * pair.noise_rate);
        assert_eq!(pair.x_t, want);
    }

    #[test]
    fn scalar_endpoint_sum() {
        // x0 = eps = 1 at t = 0: 0.95 + 0.31225 = 1.26225.
        let one = Tensor::<f64>::scalar(1.0);
        let pair = noisify(&sched(), &one, &one, 0.0).unwrap();
        assert!((pair.x_t.data()[0] - 1.26225).abs() < 5e-6);
    }

    #[test]
    fn noisify_rejects_shape_mismatch() {
        let x0 = Tensor::<f32>::zeros(vec![2, 2, 1]);
        let eps = Tensor::<f32>::zeros(vec![2, 3, 1]);
        assert!(matches!(noisify(&sched(), &x0, &eps, 0.5), Err(NoisingError::Shape(_))));
    }

    #[test]
    fn single_step_near_zero_beta_is_identity() {
        let x = Tensor::<f64>::new(vec![4], vec![1.0, -0.5, 2.0, 0.25]).unwrap();
        let eps = Tensor::new(vec![4], vec![0.5, -0.9, 0.3, 0.7]).unwrap();
        let out = single_step(&x, &eps, 1e-12).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn single_step_sqrt_beta_arithmetic() {
        let zero = Tensor::<f64>::scalar(0.0);
        let one = Tensor::scalar(1.0);
        let out = single_step(&zero, &one, 0.25).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_step_rejects_bad_beta() {
        let t = Tensor::<f32>::scalar(0.0);
        assert!(matches!(single_step(&t, &t, 0.0), Err(NoisingError::BetaOutOfRange { .. })));
        assert!(matches!(single_step(&t, &t, 1.0), Err(NoisingError::BetaOutOfRange { .. })));
        assert!(matches!(single_step(&t, &t, -0.1), Err(NoisingError::BetaOutOfRange { .. })));
    }

    #[test]
    fn single_step_preserves_unit_variance_monte_carlo() {
        // (1 - beta) + beta = 1: with standard-normal inputs the output
        // variance stays 1. Checked statistically over 1e6 scalar draws.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &beta in &[0.1f64, 0.5, 0.9] {
            let n = 1_000_000usize;
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            let sb = beta.sqrt();
            let sa = (1.0 - beta).sqrt();
            for _ in 0..n {
                let x: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                let v = sa * x + sb * e;
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            assert!((var - 1.0).abs() < 0.01, "beta {beta}: sample variance {var}");
        }
    }

    #[test]
    fn collinear_sigma_zero_is_bit_identical_to_noisify() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..24).map(|_| rng.sample(StandardNormal)).collect();
        let noise: Vec<f32> = (0..24).map(|_| rng.sample(StandardNormal)).collect();
        let x0 = Tensor::new(vec![4, 6, 1], data).unwrap();
        let eps = Tensor::new(vec![4, 6, 1], noise).unwrap();
        for &t in &[0.0, 0.25, 0.5, 0.99, 1.0] {
            let a = collinear_point(&sched(), &x0, &eps, &Tensor::zeros(vec![4, 6, 1]), t, 0.0).unwrap();
            let b = noisify(&sched(), &x0, &eps, t).unwrap().x_t;
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b), "t = {t}");
        }
    }

    #[test]
    fn collinear_boundary_sigma_drops_shared_noise() {
        let x0 = Tensor::<f64>::scalar(2.0);
        let shared = Tensor::scalar(100.0);
        let fresh = Tensor::scalar(1.0);
        let t = 0.5;
        let (signal, noise) = sched().rates(t).unwrap();
        let out = collinear_point(&sched(), &x0, &shared, &fresh, t, noise).unwrap();
        let want = signal * 2.0 + noise * 1.0;
        assert!((out.data()[0] - want).abs() < 1e-9);
    }

    #[test]
    fn collinear_radical_evaluates_independently() {
        // Pick t so that alpha_bar(t) = 0.75, then with sigma = 0.3 the
        // shared coefficient is sqrt(0.25 - 0.09) = 0.4.
        let s = sched();
        let start = 0.95f64.acos();
        let end = 0.02f64.acos();
        let t = ((0.75f64.sqrt()).acos() - start) / (end - start);
        let x0 = Tensor::<f64>::scalar(0.0);
        let shared = Tensor::scalar(1.0);
        let fresh = Tensor::scalar(0.0);
        let out = collinear_point(&s, &x0, &shared, &fresh, t, 0.3).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-9);
    }

    #[test]
    fn collinear_rejects_sigma_above_bound() {
        let t = Tensor::<f64>::scalar(0.0);
        let err = collinear_point(&sched(), &t, &t, &t, 0.0, 0.5).unwrap_err();
        match err {
            NoisingError::SigmaTooLarge { sigma, bound } => {
                assert_eq!(sigma, 0.5);
                assert!((bound - 0.3122498999).abs() < 1e-9);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn coefficient_identity_of_nested_steps() {
        // alpha_t (1 - alpha_prev) + (1 - alpha_t) = 1 - alpha_t alpha_prev.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a_t: f64 = rng.random_range(1e-6..1.0);
            let a_p: f64 = rng.random_range(1e-6..1.0);
            let lhs = a_t * (1.0 - a_p) + (1.0 - a_t);
            let rhs = 1.0 - a_t * a_p;
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn noisify_inverts_exactly(t in 0.0f64..=1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            let noise: Vec<f32> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            let x0 = Tensor::new(vec![4, 4, 1], data).unwrap();
            let eps = Tensor::new(vec![4, 4, 1], noise).unwrap();
            let pair = noisify(&sched(), &x0, &eps, t).unwrap();
            let (s, n) = (pair.signal_rate as f32, pair.noise_rate as f32);
            let recovered = pair.x_t.zip_map(&eps, |xt, e| (xt - n * e) / s).unwrap();
            prop_assert!(recovered.max_abs_diff(&x0) < 1e-5);
        }
    }
}
