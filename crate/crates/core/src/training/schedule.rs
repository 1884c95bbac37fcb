use serde::{Deserialize, Serialize};

use crate::error::{IfrError, Result};

/// Learning rate at the first warmup iteration, relative to `base_lr`.
pub const WARMUP_START_FACTOR: f64 = 0.1;

fn default_base_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_total_iters() -> usize {
    9_000
}
fn default_decay_points() -> Vec<usize> {
    vec![6_000, 8_000]
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_warmup() -> usize {
    100
}
fn default_batch() -> usize {
    16
}
fn default_clip() -> f64 {
    10.0
}
fn default_log_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_total_iters")]
    pub total_iters: usize,
    #[serde(default = "default_decay_points")]
    pub decay_points: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_warmup")]
    pub warmup_iters: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Metrics are logged every this many iterations.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: default_base_lr(),
            momentum: default_momentum(),
            total_iters: default_total_iters(),
            decay_points: default_decay_points(),
            decay_factor: default_decay_factor(),
            warmup_iters: default_warmup(),
            batch_size: default_batch(),
            seed: 0,
            clip_norm: default_clip(),
            log_every: default_log_every(),
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 90k iterations, drops at 60k and 80k, 1k
    /// warmup.
    pub fn full_schedule() -> Self {
        Self {
            total_iters: 90_000,
            decay_points: vec![60_000, 80_000],
            warmup_iters: 1_000,
            ..Self::default()
        }
    }

    /// Same shape as the default schedule with every length multiplied by
    /// `total_iters / 9000`.
    pub fn scaled(total_iters: usize) -> Self {
        let d = Self::default();
        let s = |v: usize| v * total_iters / d.total_iters;
        Self {
            total_iters,
            decay_points: d.decay_points.iter().map(|&p| s(p)).collect(),
            warmup_iters: s(d.warmup_iters),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.base_lr) {
            return Err(IfrError::config("base_lr must be finite and positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(IfrError::config("momentum must lie in [0, 1)"));
        }
        if !finite_pos(self.decay_factor) {
            return Err(IfrError::config("decay_factor must be finite and positive"));
        }
        if self.batch_size == 0 {
            return Err(IfrError::config("batch_size must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(IfrError::config("log_every must be at least 1"));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(IfrError::config("clip_norm must be finite and non-negative"));
        }
        if self.decay_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IfrError::config("decay_points must be strictly increasing"));
        }
        // A zero-length run never reaches the schedule, so its points are not
        // checked against the run length.
        if self.total_iters > 0 {
            if let Some(&last) = self.decay_points.last() {
                if last >= self.total_iters {
                    return Err(IfrError::config(format!(
                        "decay point {last} is not below total_iters {}",
                        self.total_iters
                    )));
                }
            }
        }
        if let Some(&first) = self.decay_points.first() {
            if self.warmup_iters >= first {
                return Err(IfrError::config(format!(
                    "warmup_iters {} must end before the first decay point {first}",
                    self.warmup_iters
                )));
            }
        }
        Ok(())
    }
}

/// Linear warmup from `0.1 * base_lr` to `base_lr`, then a step drop by
/// `decay_factor` at every decay point reached.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    if iter < cfg.warmup_iters {
        let t = iter as f64 / cfg.warmup_iters as f64;
        return cfg.base_lr * (WARMUP_START_FACTOR + (1.0 - WARMUP_START_FACTOR) * t);
    }
    let drops = cfg.decay_points.iter().filter(|&&p| iter >= p).count();
    cfg.base_lr * cfg.decay_factor.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 0.1 * cfg.base_lr);
        assert_eq!(lr_at(&cfg, cfg.warmup_iters), cfg.base_lr);
        assert_eq!(lr_at(&cfg, 6_000), cfg.base_lr * 0.1);
        assert_eq!(lr_at(&cfg, 5_999), cfg.base_lr);
        assert!((lr_at(&cfg, 8_000) - cfg.base_lr * 0.01).abs() < 1e-18);
        assert!((lr_at(&cfg, 50) - 0.01 * 0.55).abs() < 1e-15);
    }

    #[test]
    fn warmup_is_monotone() {
        let cfg = TrainConfig::default();
        for i in 1..=cfg.warmup_iters {
            assert!(lr_at(&cfg, i) > lr_at(&cfg, i - 1));
        }
    }

    #[test]
    fn defaults_are_a_tenth_of_the_full_schedule() {
        let full = TrainConfig::full_schedule();
        let desk = TrainConfig::default();
        assert_eq!(full.total_iters, 10 * desk.total_iters);
        assert_eq!(full.warmup_iters, 10 * desk.warmup_iters);
        assert_eq!(full.decay_points, vec![60_000, 80_000]);
        assert!(full.validate().is_ok() && desk.validate().is_ok());
        assert_eq!(TrainConfig::scaled(900).decay_points, vec![600, 800]);
    }

    #[test]
    fn invalid_schedules() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.decay_points = vec![8_000, 6_000]));
        assert!(bad(|c| c.decay_points = vec![6_000, 9_000]));
        assert!(bad(|c| c.warmup_iters = 6_000));
        assert!(bad(|c| c.batch_size = 0));
        assert!(bad(|c| c.base_lr = 0.0));
        assert!(bad(|c| c.momentum = 1.0));
        let mut zero = TrainConfig::default();
        zero.total_iters = 0;
        assert!(zero.validate().is_ok());
    }
}
