// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of optimize-then-suppress fusion.
///
/// Defaults: 25 Adam steps at lr 2e-2 with weight decay 0.3, KL weight 0.2,
/// NLL weight 1, clamp factor 1, 20 Riemann steps, KED threshold 0.35 and
/// suppression strength 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Weight of the KL term that keeps the prompt's next-token distribution.
    pub alpha: f64,
    /// Weight of the new-object NLL term.
    pub beta: f64,
    /// Suppression strength applied to the KEDs.
    pub gamma: f64,
    /// KED cutoff as a fraction of the maximum attribution score.
    pub t_threshold: f64,
    pub riemann_n: usize,
    /// Number of model-sampled prefixes prepended to the prompt.
    pub prefix_count: usize,
    pub prefix_length: usize,
    pub opt_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Per-row norm cap on the delta, relative to the subject embedding norm.
    pub clamp_factor: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 1.0,
            gamma: 0.5,
            t_threshold: 0.35,
            riemann_n: 20,
            prefix_count: 10,
            prefix_length: 5,
            opt_steps: 25,
            learning_rate: 2e-2,
            weight_decay: 0.3,
            clamp_factor: 1.0,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.t_threshold) {
            return bad(format!("t_threshold must lie in [0, 1], got {}", self.t_threshold));
        }
        if self.riemann_n == 0 {
            return bad("riemann_n must be >= 1".into());
        }
        if self.opt_steps == 0 {
            return bad("opt_steps must be >= 1".into());
        }
        if !(self.clamp_factor > 0.0) {
            return bad(format!("clamp_factor must be > 0, got {}", self.clamp_factor));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = FusionConfig::default();
        c.validate().unwrap();
        assert_eq!((c.opt_steps, c.learning_rate, c.weight_decay), (25, 0.02, 0.3));
        assert_eq!((c.alpha, c.beta, c.clamp_factor), (0.2, 1.0, 1.0));
        assert_eq!((c.riemann_n, c.t_threshold, c.gamma), (20, 0.35, 0.5));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for c in [
            FusionConfig { alpha: -1.0, ..Default::default() },
            FusionConfig { t_threshold: 1.5, ..Default::default() },
            FusionConfig { riemann_n: 0, ..Default::default() },
            FusionConfig { opt_steps: 0, ..Default::default() },
            FusionConfig { clamp_factor: 0.0, ..Default::default() },
            FusionConfig { gamma: f64::NAN, ..Default::default() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
