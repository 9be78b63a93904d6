//! Scalar math helpers on top of `libm`.
//!
//! All transcendentals route through `libm` so that results are bit-identical
//! across platforms regardless of the host's math library.

pub const LN_2: f64 = core::f64::consts::LN_2;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn log2(x: f64) -> f64 {
    libm::log2(x)
}

#[inline]
pub fn log10(x: f64) -> f64 {
    libm::log10(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// Round half away from zero (the tie rule used by the inference quantizer).
#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

/// Numerically stable ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(exp(-x))
    } else {
        libm::log1p(exp(x))
    }
}

/// Inverse of `softplus`: ln(e^y - 1) for y > 0.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    ln(libm::expm1(y))
}

/// |a - b| / max(|a|, |b|, floor). The floor turns the comparison into an
/// absolute one when both values are tiny.
#[inline]
pub fn rel_err_with_floor(a: f64, b: f64, floor: f64) -> f64 {
    abs(a - b) / abs(a).max(abs(b)).max(floor)
}

/// Relative error with the default floor 1e-8.
#[inline]
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_with_floor(a, b, 1e-8)
}
