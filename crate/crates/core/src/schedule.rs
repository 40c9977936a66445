//! Offset cosine diffusion schedule.
//!
//! Maps continuous diffusion time t in [0, 1] to a variance-preserving
//! (signal_rate, noise_rate) pair on the unit circle: the diffusion angle
//! runs linearly from arccos(max_signal_rate) to arccos(min_signal_rate),
//! with signal_rate = cos(angle) and noise_rate = sin(angle).

use std::fmt;

pub const DEFAULT_MAX_SIGNAL_RATE: f64 = 0.95;
pub const DEFAULT_MIN_SIGNAL_RATE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleError {
    BadRates { max_signal_rate: f64, min_signal_rate: f64 },
    TimeOutOfRange { t: f64 },
}

impl fmt::Display for ScheduleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleError::BadRates { max_signal_rate, min_signal_rate } => write!(
                f,
                "invalid schedule rates: need 0 < min ({min_signal_rate}) < max ({max_signal_rate}) <= 1"
            ),
            ScheduleError::TimeOutOfRange { t } => {
                write!(f, "diffusion time {t} outside [0, 1]")
            }
        }
    }
}

impl std::error::Error for ScheduleError {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    max_signal_rate: f64,
    min_signal_rate: f64,
    start_angle: f64,
    end_angle: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule::new(DEFAULT_MAX_SIGNAL_RATE, DEFAULT_MIN_SIGNAL_RATE)
            .expect("default rates are valid")
    }
}

impl DiffusionSchedule {
    pub fn new(max_signal_rate: f64, min_signal_rate: f64) -> Result<Self, ScheduleError> {
        if !(min_signal_rate > 0.0 && min_signal_rate < max_signal_rate && max_signal_rate <= 1.0) {
            return Err(ScheduleError::BadRates { max_signal_rate, min_signal_rate });
        }
        Ok(DiffusionSchedule {
            max_signal_rate,
            min_signal_rate,
            start_angle: max_signal_rate.acos(),
            end_angle: min_signal_rate.acos(),
        })
    }

    pub fn max_signal_rate(&self) -> f64 {
        self.max_signal_rate
    }

    pub fn min_signal_rate(&self) -> f64 {
        self.min_signal_rate
    }

    /// (signal_rate, noise_rate) at diffusion time t; the squares sum to 1.
    pub fn rates(&self, t: f64) -> Result<(f64, f64), ScheduleError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(ScheduleError::TimeOutOfRange { t });
        }
        let angle = self.start_angle + t * (self.end_angle - self.start_angle);
        Ok((angle.cos(), angle.sin()))
    }

    /// Noise variance 1 - alpha_bar(t), i.e. noise_rate(t) squared.
    pub fn variance(&self, t: f64) -> Result<f64, ScheduleError> {
        let (_, noise) = self.rates(t)?;
        Ok(noise * noise)
    }
}
