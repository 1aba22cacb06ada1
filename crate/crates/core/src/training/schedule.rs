use std::fmt;
use std::str::FromStr;

use super::TrainError;

/// Temperature decay rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TauSchedule {
    /// `1 / sqrt(alpha · epoch)` clamped into `[floor, 1]` before the switch epoch.
    #[default]
    InverseSqrt,
    /// Geometric decay from 1 at epoch 1 to the floor at the switch epoch.
    Geometric,
}

impl fmt::Display for TauSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TauSchedule::InverseSqrt => "inverse_sqrt",
            TauSchedule::Geometric => "geometric",
        })
    }
}

impl FromStr for TauSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inverse_sqrt" => Ok(TauSchedule::InverseSqrt),
            "geometric" => Ok(TauSchedule::Geometric),
            other => Err(format!("unknown tau schedule '{other}' (expected inverse_sqrt or geometric)")),
        }
    }
}

/// Phase lengths, learning rates and temperature settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub alpha: f64,
    pub tau_floor: f64,
    pub tau_switch_epoch: u32,
    pub tau_schedule: TauSchedule,
    pub warmup_epochs: u32,
    /// Upper bound on joint epochs; early stopping usually ends the phase sooner.
    pub joint_epochs: u32,
    pub early_stop_patience: u32,
    pub finetune_epochs: u32,
    pub lr_addon: f64,
    pub lr_pool: f64,
    pub lr_halving_every: u32,
    pub weight_decay: f64,
    pub lr_finetune: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// Train the add-on layer during warm-up as well.
    pub addon_in_warmup: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            alpha: 3.4e4,
            tau_floor: 1e-3,
            tau_switch_epoch: 30,
            tau_schedule: TauSchedule::InverseSqrt,
            warmup_epochs: 10,
            joint_epochs: 40,
            early_stop_patience: 12,
            finetune_epochs: 15,
            lr_addon: 1.5e-3,
            lr_pool: 1.5e-3,
            lr_halving_every: 5,
            weight_decay: 1e-3,
            lr_finetune: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            addon_in_warmup: true,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("alpha", self.alpha),
            ("tau_floor", self.tau_floor),
            ("lr_addon", self.lr_addon),
            ("lr_pool", self.lr_pool),
            ("lr_finetune", self.lr_finetune),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.tau_floor > 1.0 {
            return Err(TrainError::Config("tau_floor must not exceed 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("weight_decay must be non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.tau_switch_epoch == 0 || self.lr_halving_every == 0 || self.early_stop_patience == 0 {
            return Err(TrainError::Config(
                "batch_size, tau_switch_epoch, lr_halving_every and early_stop_patience must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Joint-phase learning rate at zero-based joint epoch `e`.
    pub fn joint_lr(&self, base: f64, e: u32) -> f64 {
        base * 0.5f64.powi((e / self.lr_halving_every) as i32)
    }
}

/// Gumbel-Softmax temperature at a one-based training epoch.
pub fn temperature(epoch: u32, schedule: &Schedule) -> Result<f64, TrainError> {
    if epoch < 1 {
        return Err(TrainError::Config("temperature epochs count from 1".into()));
    }
    if epoch >= schedule.tau_switch_epoch {
        return Ok(schedule.tau_floor);
    }
    Ok(match schedule.tau_schedule {
        TauSchedule::InverseSqrt => (1.0 / (schedule.alpha * f64::from(epoch)).sqrt()).clamp(schedule.tau_floor, 1.0),
        TauSchedule::Geometric => {
            let span = f64::from(schedule.tau_switch_epoch.saturating_sub(1).max(1));
            schedule.tau_floor.powf(f64::from(epoch - 1) / span)
        }
    })
}
