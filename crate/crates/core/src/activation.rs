//! Elementwise activations with analytic derivatives.

use crate::tensor::Tensor;

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 * pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    /// `x * Phi(x)` with the exact Gaussian CDF.
    Gelu,
    Tanh,
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Tanh => libm::tanh(x),
        }
    }

    /// Derivative at the pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Tanh => {
                let t = libm::tanh(x);
                1.0 - t * t
            }
        }
    }
}

/// Non-finite inputs propagate; they are not trapped.
pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// `dy * f'(x)` elementwise.
pub fn activation_backward(x: &Tensor, dy: &Tensor, kind: Activation) -> Tensor {
    assert_eq!(x.shape(), dy.shape());
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *g *= kind.derivative(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_map_to_zero() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
    }

    #[test]
    fn tanh_is_odd() {
        for &x in &[0.3, 1.7, 5.0] {
            assert_eq!(Activation::Tanh.apply(-x), -Activation::Tanh.apply(x));
        }
    }

    #[test]
    fn nan_propagates() {
        assert!(gelu(f64::NAN).is_nan());
    }
}
