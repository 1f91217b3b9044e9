//! Prune-fraction schedules, topology-update cadence and learning-rate decay.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{DstError, Result};

/// How the prune fraction `ρ_t` evolves with the optimizer step `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneSchedule {
    /// `ρ/2 · (1 + cos(tπ/T))` for `t ≤ T`, then 0.
    Cosine { rho: f64, stop: u64 },
    /// `ρ · factor^⌊t/every⌋`.
    Linear { rho: f64, factor: f64, every: u64 },
    /// `ρ` throughout.
    Constant { rho: f64 },
}

impl PruneSchedule {
    pub const LINEAR_FACTOR: f64 = 0.99;
    pub const LINEAR_EVERY: u64 = 600;

    pub fn validate(&self) -> Result<()> {
        let rho = self.initial();
        if !(0.0..=1.0).contains(&rho) {
            return Err(DstError::config(format!("prune_fraction must lie in [0, 1], got {rho}")));
        }
        match *self {
            PruneSchedule::Cosine { stop, .. } if stop < 1 => {
                Err(DstError::config("cosine schedule needs a stop iteration >= 1"))
            }
            PruneSchedule::Linear { factor, every, .. } if !(factor > 0.0 && factor <= 1.0) || every == 0 => {
                Err(DstError::config(format!(
                    "linear schedule needs 0 < factor <= 1 and every >= 1, got {factor}, {every}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn initial(&self) -> f64 {
        match *self {
            PruneSchedule::Cosine { rho, .. }
            | PruneSchedule::Linear { rho, .. }
            | PruneSchedule::Constant { rho } => rho,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        match self {
            PruneSchedule::Cosine { .. } => ScheduleKind::Cosine,
            PruneSchedule::Linear { .. } => ScheduleKind::Linear,
            PruneSchedule::Constant { .. } => ScheduleKind::Constant,
        }
    }
}

/// Prune fraction at optimizer step `t`.
pub fn prune_fraction_at(schedule: &PruneSchedule, t: u64) -> f64 {
    match *schedule {
        PruneSchedule::Cosine { rho, stop } => {
            if t > stop {
                0.0
            } else {
                // clamp guards against cos rounding slightly below -1 at t = stop
                (0.5 * rho * (1.0 + (t as f64 * PI / stop as f64).cos())).max(0.0)
            }
        }
        PruneSchedule::Linear { rho, factor, every } => rho * factor.powi((t / every) as i32),
        PruneSchedule::Constant { rho } => rho,
    }
}

/// Name-only form of a schedule, as written in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
    Constant,
}

impl FromStr for ScheduleKind {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            "constant" => Ok(ScheduleKind::Constant),
            other => Err(DstError::config(format!(
                "unknown prune_schedule '{other}'; valid options: cosine, linear, constant"
            ))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Constant => "constant",
        })
    }
}

/// When topology updates happen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateCadence {
    /// Optimizer steps between updates.
    pub period: u64,
    /// Last step eligible for an update.
    pub stop: u64,
}

/// Whether step `t` (counted from 1) performs a topology update.
pub fn is_update_step(cadence: &UpdateCadence, t: u64) -> bool {
    cadence.period >= 1 && t >= 1 && t.is_multiple_of(cadence.period) && t <= cadence.stop
}

/// Step decay at fixed fractions of the training epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// Fractions of the total epochs after which the rate is multiplied by
    /// `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DstError::config(format!("lr_decay must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(DstError::config(format!("lr must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }
}

/// `base_lr · γ^(milestones passed)` at 0-based `epoch`.
pub fn lr_at(schedule: &LrSchedule, epoch: usize, total_epochs: usize) -> f64 {
    let passed = schedule
        .milestones
        .iter()
        .filter(|&&m| epoch as f64 >= m * total_epochs as f64)
        .count();
    schedule.base_lr * schedule.gamma.powi(passed as i32)
}
