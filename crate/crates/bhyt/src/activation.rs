//! Elementwise activations used by the MLP sublayer and the τ calibration.

use crate::error::{BhytError, Result};

/// Activation selector for the two-matrix MLP. Gated variants are treated as
/// plain activations; their gating effect is folded into the effective τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Silu,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(BhytError::param(
                "Activation::parse",
                format!("unknown activation identifier {other:?}"),
            )),
        }
    }

    pub fn apply(&self, u: f64) -> f64 {
        match self {
            Activation::Identity => u,
            Activation::Relu => u.max(0.0),
            Activation::Tanh => u.tanh(),
            Activation::Silu => u / (1.0 + (-u).exp()),
        }
    }

    pub fn derivative(&self, u: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = u.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-u).exp());
                s * (1.0 + u * (1.0 - s))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_and_unknown() {
        assert_eq!(Activation::parse("relu").unwrap(), Activation::Relu);
        assert!(Activation::parse("gelu").is_err());
    }

    #[test]
    fn all_activations_fix_zero() {
        for a in [Activation::Identity, Activation::Relu, Activation::Tanh, Activation::Silu] {
            assert_eq!(a.apply(0.0), 0.0);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for a in [Activation::Identity, Activation::Relu, Activation::Tanh, Activation::Silu] {
            for u in [-1.7, -0.3, 0.4, 2.2] {
                let fd = (a.apply(u + h) - a.apply(u - h)) / (2.0 * h);
                assert!(
                    (a.derivative(u) - fd).abs() < 1e-8,
                    "{a:?} at {u}: {} vs {fd}",
                    a.derivative(u)
                );
            }
        }
    }
}
