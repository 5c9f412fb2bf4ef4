//! The ambiguity-fraction annealing schedule.
//!
//! Training starts with a wide sigmoid so a fraction `f0` of bit values
//! sit in the soft zone and gradients flow densely, then shrinks `f`
//! exponentially per epoch. The half-width `t` is recalibrated from
//! observed |bit values| so the soft zone keeps covering exactly the
//! scheduled fraction. Once `f` reaches the floor the run switches to
//! hard-mode fine-tuning: one active word, table updates only.

use convtab_core::fern::calibrate_t;

use crate::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    /// Ambiguous-bit fraction at epoch 0.
    pub f0: f64,
    /// Per-epoch multiplicative decay of the fraction.
    pub decay: f64,
    /// Epochs between half-width recalibrations.
    pub recalib_period: usize,
    /// Fraction at which soft training freezes into hard fine-tuning.
    pub f_floor: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule { f0: 0.2, decay: 0.85, recalib_period: 1, f_floor: 0.005 }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_floor > 0.0 && self.f_floor < self.f0 && self.f0 < 1.0) {
            return Err(TrainError::BadSchedule(format!(
                "need 0 < f_floor < f0 < 1, got f_floor={} f0={}",
                self.f_floor, self.f0
            )));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(TrainError::BadSchedule(format!("decay must be in (0,1), got {}", self.decay)));
        }
        if self.recalib_period == 0 {
            return Err(TrainError::BadSchedule("recalibration period must be positive".into()));
        }
        Ok(())
    }

    /// Scheduled ambiguous fraction at `epoch`: `max(f0 * decay^epoch,
    /// f_floor)`.
    pub fn fraction_at(&self, epoch: usize) -> f64 {
        (self.f0 * self.decay.powi(epoch as i32)).max(self.f_floor)
    }

    /// Whether `epoch` has hit the floor and trains hard.
    pub fn is_hard_at(&self, epoch: usize) -> bool {
        self.f0 * self.decay.powi(epoch as i32) <= self.f_floor
    }

    /// `(f, t)` for `epoch`: the scheduled fraction and the half-width
    /// that puts that fraction of the observed |bit values| inside the
    /// soft zone.
    pub fn step(&self, epoch: usize, observed_abs_values: &[f64]) -> Result<(f64, f64)> {
        let f = self.fraction_at(epoch);
        let t = calibrate_t(observed_abs_values, f)?;
        Ok((f, t))
    }
}
