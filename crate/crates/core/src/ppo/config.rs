use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::AdamConfig;

/// PPO hyperparameters. `seed` and `total_steps` are filled in by the run
/// configuration rather than read from the `[ppo]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PPOConfig {
    pub clip_range: f64,
    pub kl_enabled: bool,
    /// Initial KL coefficient.
    pub beta_kl: f64,
    pub kl_adaptive: bool,
    pub kl_target: f64,
    /// Proportional gain of the KL controller.
    pub kl_gain: f64,
    pub beta_ent: f64,
    pub beta_bent: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    /// Sequences (episode steps) per rollout batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub whiten_advantages: bool,
    /// Global gradient-norm cap; 0 disables clipping.
    pub max_grad_norm: f64,
    #[serde(skip)]
    pub total_steps: u64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            clip_range: 0.2,
            kl_enabled: false,
            beta_kl: 0.1,
            kl_adaptive: true,
            kl_target: 0.05,
            kl_gain: 0.1,
            beta_ent: 0.0,
            beta_bent: 0.0,
            value_coef: 0.5,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 4,
            minibatches: 1,
            whiten_advantages: true,
            max_grad_norm: 1.0,
            total_steps: 0,
            seed: 0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("ppo.{msg}")))
            }
        };
        check(
            self.clip_range > 0.0 && self.clip_range.is_finite(),
            "clip_range must be positive",
        )?;
        for (name, v) in [
            ("beta_kl", self.beta_kl),
            ("beta_ent", self.beta_ent),
            ("beta_bent", self.beta_bent),
            ("value_coef", self.value_coef),
            ("max_grad_norm", self.max_grad_norm),
            ("kl_gain", self.kl_gain),
        ] {
            check(
                v >= 0.0 && v.is_finite(),
                &format!("{name} must be a finite value >= 0"),
            )?;
        }
        check(self.kl_target > 0.0, "kl_target must be positive")?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be positive",
        )?;
        check(self.batch_size >= 2, "batch_size must be at least 2")?;
        check(self.epochs >= 1, "epochs must be at least 1")?;
        check(
            self.minibatches >= 1 && self.minibatches <= self.batch_size,
            "minibatches must be in 1..=batch_size",
        )?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    /// Multiplicative KL coefficient update after observing `kl`.
    pub fn update_beta_kl(&self, beta: f64, kl: f64) -> f64 {
        if !self.kl_enabled || !self.kl_adaptive {
            return beta;
        }
        let error = (kl / self.kl_target - 1.0).clamp(-0.2, 0.2);
        beta * (1.0 + self.kl_gain * error)
    }
}

/// Derives an independent stream seed from a base seed and a path of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut x = seed;
    for &p in path {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    splitmix(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
