// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar MLP nonlinearities with closed-form first and second derivatives.
//!
//! The second derivative is needed when the Jacobian penalty is
//! differentiated through `φ'(z)`.

use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Nonlinearity applied inside the MLP hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ActivationKind {
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    #[default]
    GeluTanh,
    /// `x·Φ(x)` with the exact normal CDF.
    GeluErf,
    Relu,
    Identity,
}

const GELU_CUBIC: f64 = 0.044_715;

#[inline]
fn sqrt_2_over_pi() -> f64 {
    (2.0 / PI).sqrt()
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::GeluTanh => "gelu_tanh",
            Self::GeluErf => "gelu_erf",
            Self::Relu => "relu",
            Self::Identity => "identity",
        }
    }

    /// `φ(x)`.
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Self::GeluTanh => {
                let u = sqrt_2_over_pi() * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Self::GeluErf => x * normal_cdf(x),
            Self::Relu => {
                if x > 0.0 || x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            Self::Identity => x,
        }
    }

    /// `φ'(x)`. ReLU uses the subgradient 0 at exactly 0.
    #[inline]
    pub fn d1(self, x: f64) -> f64 {
        match self {
            Self::GeluTanh => {
                let c = sqrt_2_over_pi();
                let u = c * (x + GELU_CUBIC * x * x * x);
                let du = c * (1.0 + 3.0 * GELU_CUBIC * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Self::GeluErf => normal_cdf(x) + x * normal_pdf(x),
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else if x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            Self::Identity => 1.0,
        }
    }

    /// `φ''(x)`.
    #[inline]
    pub fn d2(self, x: f64) -> f64 {
        match self {
            Self::GeluTanh => {
                let c = sqrt_2_over_pi();
                let u = c * (x + GELU_CUBIC * x * x * x);
                let du = c * (1.0 + 3.0 * GELU_CUBIC * x * x);
                let ddu = c * 6.0 * GELU_CUBIC * x;
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                sech2 * du + 0.5 * x * sech2 * (ddu - 2.0 * t * du * du)
            }
            Self::GeluErf => normal_pdf(x) * (2.0 - x * x),
            Self::Relu => {
                if x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            Self::Identity => 0.0,
        }
    }
}

/// `φ(x)` for `kind`.
#[inline]
pub fn act(kind: ActivationKind, x: f64) -> f64 {
    kind.value(x)
}

/// `φ'(x)` for `kind`.
#[inline]
pub fn act_d1(kind: ActivationKind, x: f64) -> f64 {
    kind.d1(x)
}

/// `φ''(x)` for `kind`.
#[inline]
pub fn act_d2(kind: ActivationKind, x: f64) -> f64 {
    kind.d2(x)
}
