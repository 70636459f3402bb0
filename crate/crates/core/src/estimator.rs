//! Two-point zeroth-order estimator and clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, norm};
use crate::problems::LossOracle;
use crate::sampling::Direction;

/// Smallest smoothing parameter accepted; below this the central difference
/// is dominated by cancellation.
pub const MIN_SMOOTHING: f64 = 1e-12;

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= MIN_SMOOTHING {
        Ok(())
    } else {
        Err(Error::invalid(
            "lambda",
            format!("must be finite and >= {MIN_SMOOTHING}, got {lambda}"),
        ))
    }
}

pub(crate) fn check_clip(c: f64) -> Result<()> {
    if c > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid("C", format!("clipping threshold must be > 0, got {c}")))
    }
}

/// The pair of query points `x ± λu`.
pub(crate) struct Perturbed {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl Perturbed {
    pub fn new(x: &[f64], u: &[f64], lambda: f64) -> Self {
        let mut plus = vec![0.0; x.len()];
        let mut minus = vec![0.0; x.len()];
        linalg::add_scaled(x, lambda, u, &mut plus);
        linalg::add_scaled(x, -lambda, u, &mut minus);
        Self { plus, minus }
    }

    /// `(f(x+λu; ξ_i) - f(x-λu; ξ_i)) / (2λ)`.
    #[inline]
    pub fn difference<P: LossOracle + ?Sized>(&self, p: &P, i: usize, lambda: f64) -> f64 {
        (p.sample_loss(&self.plus, i) - p.sample_loss(&self.minus, i)) / (2.0 * lambda)
    }
}

fn check_inputs<P: LossOracle + ?Sized>(p: &P, x: &[f64], u: &Direction, i: usize) -> Result<()> {
    if x.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: x.len(),
        });
    }
    if u.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: u.dim(),
        });
    }
    if i >= p.num_samples() {
        return Err(Error::IndexOutOfRange {
            index: i,
            n: p.num_samples(),
        });
    }
    Ok(())
}

/// `(f(x+λu; ξ_i) - f(x-λu; ξ_i)) / (2λ)`, two loss evaluations.
pub fn finite_difference<P: LossOracle + ?Sized>(
    p: &P,
    x: &[f64],
    u: &Direction,
    lambda: f64,
    i: usize,
) -> Result<f64> {
    check_lambda(lambda)?;
    check_inputs(p, x, u, i)?;
    Ok(Perturbed::new(x, u.as_slice(), lambda).difference(p, i, lambda))
}

/// `g_λ(x; ξ_i) = finite_difference · u`.
pub fn two_point_gradient<P: LossOracle + ?Sized>(
    p: &P,
    x: &[f64],
    u: &Direction,
    lambda: f64,
    i: usize,
) -> Result<Vec<f64>> {
    let s = finite_difference(p, x, u, lambda, i)?;
    Ok(u.as_slice().iter().map(|v| s * v).collect())
}

/// A clipped scalar finite difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiff {
    pub value: f64,
    pub clipped: bool,
}

/// `clip_C(s) = s · min{1, C/|s|}`.
pub fn clip_scalar(s: f64, c: f64) -> Result<FiniteDiff> {
    check_clip(c)?;
    Ok(clip_scalar_unchecked(s, c))
}

#[inline]
pub(crate) fn clip_scalar_unchecked(s: f64, c: f64) -> FiniteDiff {
    if s.abs() > c {
        FiniteDiff {
            value: c.copysign(s),
            clipped: true,
        }
    } else {
        FiniteDiff {
            value: s,
            clipped: false,
        }
    }
}

/// A clipped vector and whether the clip was active.
#[derive(Clone, Debug, PartialEq)]
pub struct ClippedVector {
    pub value: Vec<f64>,
    pub clipped: bool,
}

/// `clip_C(v) = v · min{1, C/‖v‖}`; the zero vector is returned unchanged.
pub fn clip_vector(v: &[f64], c: f64) -> Result<ClippedVector> {
    check_clip(c)?;
    let nrm = norm(v);
    if nrm <= c {
        return Ok(ClippedVector {
            value: v.to_vec(),
            clipped: false,
        });
    }
    let scale = c / nrm;
    Ok(ClippedVector {
        value: v.iter().map(|x| x * scale).collect(),
        clipped: true,
    })
}

/// Vector clip of the rank-one vector `s · u`, returned as the coefficient
/// of `u`. Equivalent to `clip_vector(s·u, C)` without materializing it.
#[inline]
pub(crate) fn clip_along(s: f64, u_norm: f64, c: f64) -> FiniteDiff {
    let nrm = s.abs() * u_norm;
    if nrm > c {
        FiniteDiff {
            value: s * (c / nrm),
            clipped: true,
        }
    } else {
        FiniteDiff {
            value: s,
            clipped: false,
        }
    }
}
