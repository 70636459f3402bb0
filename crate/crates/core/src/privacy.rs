//! Gaussian-mechanism calibration under T-fold advanced composition, and a
//! brute-force sensitivity verifier over replace-one neighbors.
//!
//! Releases are per-iteration averages of per-sample clipped quantities, so
//! replacing one sample moves the average by at most `2C/n`. The noise scale
//! is `σ = 2Δ√(2T log(e + ε/δ))/ε` with `Δ = 2C/n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{check_clip, check_lambda, clip_along, clip_vector, Perturbed};
use crate::linalg::norm;
use crate::problems::LossOracle;
use crate::sampling::Direction;

/// An (ε, δ) pair with ε > 0 and 0 < δ < 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBudget", into = "RawBudget")]
pub struct PrivacyBudget {
    eps: f64,
    delta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBudget {
    eps: f64,
    delta: f64,
}

impl TryFrom<RawBudget> for PrivacyBudget {
    type Error = Error;
    fn try_from(r: RawBudget) -> Result<Self> {
        PrivacyBudget::new(r.eps, r.delta)
    }
}

impl From<PrivacyBudget> for RawBudget {
    fn from(b: PrivacyBudget) -> Self {
        RawBudget {
            eps: b.eps,
            delta: b.delta,
        }
    }
}

impl PrivacyBudget {
    pub fn new(eps: f64, delta: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidBudget(format!("eps must be positive, got {eps}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidBudget(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        Ok(Self { eps, delta })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// `log(e + ε/δ)`.
    pub fn log_term(&self) -> f64 {
        (std::f64::consts::E + self.eps / self.delta).ln()
    }
}

/// Noise scale and the quantities it was computed from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub sigma: f64,
    pub sensitivity: f64,
    pub iterations: usize,
    pub clip: f64,
    pub n: usize,
}

/// `2C/n`.
pub fn sensitivity_bound(c: f64, n: usize) -> Result<f64> {
    check_clip(c)?;
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    Ok(2.0 * c / n as f64)
}

/// `σ = 4C√(2T log(e + ε/δ)) / (nε)`.
pub fn noise_scale(
    c: f64,
    n: usize,
    iterations: usize,
    budget: &PrivacyBudget,
) -> Result<NoiseCalibration> {
    if !c.is_finite() {
        return Err(Error::invalid("C", "must be finite for a private release"));
    }
    let sensitivity = sensitivity_bound(c, n)?;
    if iterations == 0 {
        return Err(Error::invalid("T", "must be at least 1"));
    }
    let sigma = 4.0 * c * (2.0 * iterations as f64 * budget.log_term()).sqrt()
        / (n as f64 * budget.eps());
    Ok(NoiseCalibration {
        sigma,
        sensitivity,
        iterations,
        clip: c,
        n,
    })
}

/// Worst observed change of a release over all enumerated neighbors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// `max |mean clip_C(fd)(S) - mean clip_C(fd)(S')|`, the scalar release.
    pub scalar_max: f64,
    /// `max ‖mean clip_C(g)(S) - mean clip_C(g)(S')‖`, the vector release.
    pub vector_max: f64,
    /// `2C/n`.
    pub bound: f64,
    pub neighbors: usize,
}

impl SensitivityReport {
    pub fn within_bound(&self) -> bool {
        let slack = 1e-12 * self.bound;
        self.scalar_max <= self.bound + slack && self.vector_max <= self.bound + slack
    }
}

/// `dataset` with sample `replaced` swapped for `pool` sample `candidate`.
struct Neighbor<'a, P: ?Sized, Q: ?Sized> {
    dataset: &'a P,
    pool: &'a Q,
    replaced: usize,
    candidate: usize,
}

impl<P: LossOracle + ?Sized, Q: LossOracle + ?Sized> LossOracle for Neighbor<'_, P, Q> {
    fn dim(&self) -> usize {
        self.dataset.dim()
    }

    fn num_samples(&self) -> usize {
        self.dataset.num_samples()
    }

    fn sample_loss(&self, x: &[f64], i: usize) -> f64 {
        if i == self.replaced {
            self.pool.sample_loss(x, self.candidate)
        } else {
            self.dataset.sample_loss(x, i)
        }
    }

    fn sample_grad_into(&self, x: &[f64], i: usize, out: &mut [f64]) {
        if i == self.replaced {
            self.pool.sample_grad_into(x, self.candidate, out)
        } else {
            self.dataset.sample_grad_into(x, i, out)
        }
    }
}

fn scalar_release<P: LossOracle + ?Sized>(p: &P, pts: &Perturbed, lambda: f64, c: f64) -> f64 {
    let n = p.num_samples();
    let sum: f64 = (0..n)
        .map(|i| crate::estimator::clip_scalar_unchecked(pts.difference(p, i, lambda), c).value)
        .sum();
    sum / n as f64
}

fn vector_release<P: LossOracle + ?Sized>(
    p: &P,
    pts: &Perturbed,
    u: &[f64],
    lambda: f64,
    c: f64,
) -> Result<Vec<f64>> {
    let n = p.num_samples();
    let mut acc = vec![0.0; u.len()];
    for i in 0..n {
        let s = pts.difference(p, i, lambda);
        let g: Vec<f64> = u.iter().map(|v| s * v).collect();
        let clipped = clip_vector(&g, c)?;
        for (a, v) in acc.iter_mut().zip(&clipped.value) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

/// Enumerates every replace-one neighbor `S'` of `dataset` drawn from `pool`
/// and recomputes both releases from scratch on each.
pub fn verify_sensitivity<P, Q>(
    dataset: &P,
    pool: &Q,
    x: &[f64],
    u: &Direction,
    lambda: f64,
    c: f64,
) -> Result<SensitivityReport>
where
    P: LossOracle + ?Sized,
    Q: LossOracle + ?Sized,
{
    check_lambda(lambda)?;
    let bound = sensitivity_bound(c, dataset.num_samples())?;
    if pool.dim() != dataset.dim() || u.dim() != dataset.dim() || x.len() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dim(),
            actual: pool.dim(),
        });
    }
    let pts = Perturbed::new(x, u.as_slice(), lambda);
    let base_scalar = scalar_release(dataset, &pts, lambda, c);
    let base_vector = vector_release(dataset, &pts, u.as_slice(), lambda, c)?;

    let mut report = SensitivityReport {
        scalar_max: 0.0,
        vector_max: 0.0,
        bound,
        neighbors: 0,
    };
    for replaced in 0..dataset.num_samples() {
        for candidate in 0..pool.num_samples() {
            let nb = Neighbor {
                dataset,
                pool,
                replaced,
                candidate,
            };
            let s = scalar_release(&nb, &pts, lambda, c);
            let v = vector_release(&nb, &pts, u.as_slice(), lambda, c)?;
            let dv: Vec<f64> = v.iter().zip(&base_vector).map(|(a, b)| a - b).collect();
            report.scalar_max = report.scalar_max.max((s - base_scalar).abs());
            report.vector_max = report.vector_max.max(norm(&dv));
            report.neighbors += 1;
        }
    }
    Ok(report)
}

/// The clipped coefficient the vector release uses for one sample; exposed
/// so tests can compare the fast path against [`clip_vector`].
pub fn vector_clip_coefficient(s: f64, u: &Direction, c: f64) -> Result<f64> {
    check_clip(c)?;
    Ok(clip_along(s, norm(u.as_slice()), c).value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{LinearLoss, LogisticSpec, LowRankLogistic};
    use crate::sampling::{make_rng, sample_sphere};

    fn budget() -> PrivacyBudget {
        PrivacyBudget::new(2.0, 1e-5).unwrap()
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(0.0, 1e-5).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(-1.0, 0.5).is_err());
        assert!(PrivacyBudget::new(f64::NAN, 0.5).is_err());
        let b: std::result::Result<PrivacyBudget, _> =
            serde_json::from_str(r#"{"eps": 1.0, "delta": 2.0}"#);
        assert!(b.is_err());
    }

    #[test]
    fn noise_scale_reference_value() {
        // log(e + 2e5) = 12.206087..., σ = 4√(200·12.206087)/2000.
        let cal = noise_scale(1.0, 1000, 100, &budget()).unwrap();
        assert!((budget().log_term() - 12.2061).abs() < 1e-4);
        assert!((cal.sigma - 0.09882).abs() < 5e-6, "{}", cal.sigma);
        assert_eq!(cal.sensitivity, 0.002);
    }

    #[test]
    fn noise_scale_scaling() {
        let b = budget();
        let base = noise_scale(1.0, 100, 10, &b).unwrap().sigma;
        assert_eq!(noise_scale(2.0, 100, 10, &b).unwrap().sigma, 2.0 * base);
        assert!(noise_scale(1.0, 100, 20, &b).unwrap().sigma > base);
        assert!(noise_scale(1.0, 200, 10, &b).unwrap().sigma < base);
        let looser = PrivacyBudget::new(4.0, 1e-5).unwrap();
        assert!(noise_scale(1.0, 100, 10, &looser).unwrap().sigma < base);
        assert!(noise_scale(1.0, 100, 0, &b).is_err());
        assert!(noise_scale(0.0, 100, 1, &b).is_err());
        assert!(noise_scale(f64::INFINITY, 100, 1, &b).is_err());
    }

    #[test]
    fn noise_vanishes_as_eps_grows() {
        let mut last = f64::INFINITY;
        for eps in [1.0, 1e2, 1e4, 1e8] {
            let b = PrivacyBudget::new(eps, 1e-5).unwrap();
            let s = noise_scale(1.0, 10, 1, &b).unwrap().sigma;
            assert!(s < last);
            last = s;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn sensitivity_examples() {
        assert_eq!(sensitivity_bound(1.0, 2).unwrap(), 1.0);
        assert!((sensitivity_bound(5.0, 100).unwrap() - 0.1).abs() < 1e-16);
        assert_eq!(
            sensitivity_bound(1.0, 50).unwrap(),
            2.0 * sensitivity_bound(1.0, 100).unwrap()
        );
    }

    #[test]
    fn extremal_neighbors_attain_bound() {
        let u = Direction::from_vec(vec![1.0, 1.0]).unwrap();
        let a = vec![100.0, 100.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let dataset = LinearLoss::new(vec![a]).unwrap();
        let pool = LinearLoss::new(vec![neg]).unwrap();
        let c = 1.5;
        let r = verify_sensitivity(&dataset, &pool, &[0.0, 0.0], &u, 0.1, c).unwrap();
        assert_eq!(r.bound, 2.0 * c);
        assert!((r.scalar_max - 2.0 * c).abs() <= 1e-12 * c);
        assert!((r.vector_max - 2.0 * c).abs() <= 1e-12 * c);
        assert!(r.within_bound());
    }

    #[test]
    fn identical_replacement_has_zero_deviation() {
        let p = LinearLoss::new(vec![vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let pool = LinearLoss::new(vec![vec![1.0, 2.0]]).unwrap();
        let u = Direction::from_vec(vec![0.6, 0.8]).unwrap();
        // only replacing sample 0 by its copy is an identity; check that case
        let nb = Neighbor {
            dataset: &p,
            pool: &pool,
            replaced: 0,
            candidate: 0,
        };
        let pts = Perturbed::new(&[0.1, 0.2], u.as_slice(), 0.01);
        assert_eq!(
            scalar_release(&p, &pts, 0.01, 1.0),
            scalar_release(&nb, &pts, 0.01, 1.0)
        );
    }

    #[test]
    fn logistic_brute_force_within_bound() {
        let spec = LogisticSpec::new(10, 3, 5, 21, 2.0);
        let dataset = LowRankLogistic::generate(&spec).unwrap();
        // pool: same subspace, fresh coefficients
        let pool_spec = LogisticSpec::new(10, 3, 20, 22, 2.0);
        let pool_raw = LowRankLogistic::generate(&pool_spec).unwrap();
        let pool = LowRankLogistic::from_parts(
            10,
            dataset.basis().to_vec(),
            pool_raw.coefficients().to_vec(),
            pool_raw.labels().to_vec(),
        )
        .unwrap();
        let mut rng = make_rng(3);
        for c in [0.05, 0.5, 5.0] {
            let u = sample_sphere(10, &mut rng).unwrap();
            let x: Vec<f64> = (0..10).map(|_| rng.standard_normal()).collect();
            let r = verify_sensitivity(&dataset, &pool, &x, &u, 1e-3, c).unwrap();
            assert_eq!(r.neighbors, 100);
            assert!(r.within_bound(), "{r:?}");
        }
    }

    #[test]
    fn clip_coefficient_matches_full_clip() {
        let u = Direction::from_vec(vec![1.0, 2.0, 2.0]).unwrap();
        let s = 4.0;
        let coef = vector_clip_coefficient(s, &u, 1.0).unwrap();
        let full = clip_vector(&u.as_slice().iter().map(|v| s * v).collect::<Vec<_>>(), 1.0)
            .unwrap();
        for (a, b) in full.value.iter().zip(u.as_slice()) {
            assert!((a - coef * b).abs() < 1e-15);
        }
    }
}
