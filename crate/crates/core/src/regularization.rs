use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// Regularization strengths and loss weights shared by every algorithm.
///
/// `kappa` weights the entropy bonus (as `1/kappa`) and `eta` weights the KL
/// anchor to the learner's baselines (as `1/eta`). The effective inverse
/// temperature `beta = kappa * eta / (kappa + eta)` is always derived, never
/// stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationConfig {
    pub kappa: f64,
    pub eta: f64,
    pub gamma: f64,
    #[serde(default = "one")]
    pub lambda_model: f64,
    #[serde(default = "one")]
    pub lambda_policy: f64,
    #[serde(default = "one")]
    pub lambda_qv: f64,
    #[serde(default = "one")]
    pub lambda_vq: f64,
}

fn one() -> f64 {
    1.0
}

impl RegularizationConfig {
    pub fn new(kappa: f64, eta: f64, gamma: f64) -> Result<Self> {
        let cfg = Self {
            kappa,
            eta,
            gamma,
            lambda_model: 1.0,
            lambda_policy: 1.0,
            lambda_qv: 1.0,
            lambda_vq: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_lambdas(mut self, model: f64, policy: f64, qv: f64, vq: f64) -> Result<Self> {
        self.lambda_model = model;
        self.lambda_policy = policy;
        self.lambda_qv = qv;
        self.lambda_vq = vq;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return arg(format!("kappa must be positive and finite, got {}", self.kappa));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return arg(format!("eta must be positive and finite, got {}", self.eta));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return arg(format!("gamma must lie strictly inside (0, 1), got {}", self.gamma));
        }
        for (name, v) in [
            ("lambda_model", self.lambda_model),
            ("lambda_policy", self.lambda_policy),
            ("lambda_qv", self.lambda_qv),
            ("lambda_vq", self.lambda_vq),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return arg(format!("{name} must be nonnegative, got {v}"));
            }
        }
        Ok(())
    }

    /// `kappa * eta / (kappa + eta)`.
    pub fn beta(&self) -> f64 {
        self.kappa * self.eta / (self.kappa + self.eta)
    }

    pub fn inv_kappa(&self) -> f64 {
        1.0 / self.kappa
    }

    pub fn inv_eta(&self) -> f64 {
        1.0 / self.eta
    }

    /// `beta / eta`, the exponent applied to a baseline density inside the
    /// softmax targets. Together with `beta / kappa` it sums to one.
    pub fn anchor_weight(&self) -> f64 {
        self.beta() / self.eta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_values() {
        assert!(RegularizationConfig::new(0.0, 1.0, 0.9).is_err());
        assert!(RegularizationConfig::new(1.0, -1.0, 0.9).is_err());
        assert!(RegularizationConfig::new(1.0, 1.0, 1.0).is_err());
        assert!(RegularizationConfig::new(1.0, 1.0, 0.0).is_err());
        let cfg = RegularizationConfig::new(2.0, 2.0, 0.9).unwrap();
        assert!(cfg.with_lambdas(1.0, -0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn equal_strengths_halve() {
        let cfg = RegularizationConfig::new(2.0, 2.0, 0.9).unwrap();
        assert_eq!(cfg.beta(), 1.0);
    }

    proptest! {
        #[test]
        fn beta_identities(kappa in 1e-3f64..1e3, eta in 1e-3f64..1e3) {
            let cfg = RegularizationConfig::new(kappa, eta, 0.5).unwrap();
            let beta = cfg.beta();
            prop_assert!((beta - kappa * eta / (kappa + eta)).abs() <= 1e-12 * beta.max(1.0));
            // beta/kappa + beta/eta = 1
            prop_assert!((beta / kappa + beta / eta - 1.0).abs() < 1e-12);
        }
    }
}
