//! Per-sample loss oracles with analytically known constants.
//!
//! Two families back the experiments:
//!
//! * [`LowRankLogistic`]: logistic loss on features confined to an
//!   r-dimensional subspace of R^d. Lipschitz and smoothness constants are
//!   global, and the Hessian is bounded by `H = (1/4n) Σ a_i a_iᵀ`.
//! * [`SpectrumQuadratic`]: `½ (x - ξ_i)ᵀ H (x - ξ_i)` with `H` built from a
//!   prescribed spectrum in a random orthonormal basis.
//!
//! [`LinearLoss`] and [`QuarticLoss`] are small testbeds for the estimator
//! and the validators.
//!
//! Gradients here are measurement-only; the private algorithms use nothing
//! but `sample_loss`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm, norm_sq};
use crate::sampling::RngStream;

pub const PROBLEM_SCHEMA_VERSION: u32 = 1;

/// Zeroth-order access to a finite-sum objective `F_S(x) = (1/n) Σ f(x; ξ_i)`.
///
/// Implementations may assume `x.len() == dim()` and `i < num_samples()`;
/// the checked entry points are [`eval_loss`] and [`eval_grad`].
pub trait LossOracle {
    fn dim(&self) -> usize;
    fn num_samples(&self) -> usize;
    fn sample_loss(&self, x: &[f64], i: usize) -> f64;
    /// Writes `∇f(x; ξ_i)` into `out`.
    fn sample_grad_into(&self, x: &[f64], i: usize, out: &mut [f64]);
}

fn check_point<P: LossOracle + ?Sized>(p: &P, x: &[f64]) -> Result<()> {
    if x.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: x.len(),
        });
    }
    Ok(())
}

fn check_index<P: LossOracle + ?Sized>(p: &P, i: usize) -> Result<()> {
    if i >= p.num_samples() {
        return Err(Error::IndexOutOfRange {
            index: i,
            n: p.num_samples(),
        });
    }
    Ok(())
}

/// `f(x; ξ_i)` with bounds checking (0-based `i`).
pub fn eval_loss<P: LossOracle + ?Sized>(p: &P, x: &[f64], i: usize) -> Result<f64> {
    check_point(p, x)?;
    check_index(p, i)?;
    Ok(p.sample_loss(x, i))
}

/// `∇f(x; ξ_i)`. Diagnostics only.
pub fn eval_grad<P: LossOracle + ?Sized>(p: &P, x: &[f64], i: usize) -> Result<Vec<f64>> {
    check_point(p, x)?;
    check_index(p, i)?;
    let mut g = vec![0.0; p.dim()];
    p.sample_grad_into(x, i, &mut g);
    Ok(g)
}

/// `F_S(x)`, summed in index order.
pub fn avg_loss<P: LossOracle + ?Sized>(p: &P, x: &[f64]) -> f64 {
    let n = p.num_samples();
    (0..n).map(|i| p.sample_loss(x, i)).sum::<f64>() / n as f64
}

/// `∇F_S(x)`, summed in index order.
pub fn avg_grad<P: LossOracle + ?Sized>(p: &P, x: &[f64]) -> Vec<f64> {
    let n = p.num_samples();
    let mut acc = vec![0.0; p.dim()];
    let mut g = vec![0.0; p.dim()];
    for i in 0..n {
        p.sample_grad_into(x, i, &mut g);
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// `‖∇F_S(x)‖²`.
pub fn avg_grad_norm_sq<P: LossOracle + ?Sized>(p: &P, x: &[f64]) -> f64 {
    norm_sq(&avg_grad(p, x))
}

/// Constants the hyperparameter derivations consume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    /// Per-sample Lipschitz constant `L`.
    pub lipschitz: f64,
    /// Per-sample smoothness `ℓ`.
    pub smoothness: f64,
    /// Effective rank `r = tr(H)/‖H‖₂`.
    pub effective_rank: f64,
    /// `tr(H)`.
    pub trace_hessian: f64,
    /// `‖H‖₂`.
    pub hessian_norm: f64,
    /// `F_S*`, when known in closed form.
    pub min_value: Option<f64>,
}

/// Orthonormalizes `k` vectors of length `d` (modified Gram-Schmidt, two
/// passes). Fails if the set is rank-deficient.
fn orthonormalize(vectors: &mut [Vec<f64>]) -> Result<()> {
    for k in 0..vectors.len() {
        for _ in 0..2 {
            for j in 0..k {
                let (head, tail) = vectors.split_at_mut(k);
                let proj = dot(&tail[0], &head[j]);
                for (v, b) in tail[0].iter_mut().zip(&head[j]) {
                    *v -= proj * b;
                }
            }
        }
        let nrm = norm(&vectors[k]);
        if !(nrm > 1e-12) {
            return Err(Error::InvalidProblem("basis is rank-deficient".into()));
        }
        vectors[k].iter_mut().for_each(|v| *v /= nrm);
    }
    Ok(())
}

fn random_basis(d: usize, k: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    let mut b: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.standard_normal()).collect())
        .collect();
    orthonormalize(&mut b)?;
    Ok(b)
}

fn check_orthonormal(basis: &[Vec<f64>], d: usize) -> Result<()> {
    for (i, bi) in basis.iter().enumerate() {
        if bi.len() != d {
            return Err(Error::InvalidProblem(format!(
                "basis vector {i} has length {}, expected {d}",
                bi.len()
            )));
        }
        for (j, bj) in basis.iter().enumerate().take(i + 1) {
            let target = if i == j { 1.0 } else { 0.0 };
            if (dot(bi, bj) - target).abs() > 1e-9 {
                return Err(Error::InvalidProblem(format!(
                    "basis is not orthonormal at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidProblem(format!("{name} contains non-finite values")))
    }
}

// -----------------------------------------------------------------------------
// Low-rank logistic regression
// -----------------------------------------------------------------------------

/// Stable `log(1 + exp(z))`.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Generation settings for [`LowRankLogistic::generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticSpec {
    pub d: usize,
    pub r: usize,
    pub n: usize,
    pub seed: u64,
    pub feature_scale: f64,
    pub label_flip: f64,
}

impl LogisticSpec {
    pub fn new(d: usize, r: usize, n: usize, seed: u64, feature_scale: f64) -> Self {
        Self {
            d,
            r,
            n,
            seed,
            feature_scale,
            label_flip: 0.1,
        }
    }
}

/// Logistic loss `log(1 + exp(-y_i a_iᵀx))` with `a_i = B c_i`, where `B`
/// has `r` orthonormal columns.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "LogisticDoc", into = "LogisticDoc")]
pub struct LowRankLogistic {
    d: usize,
    seed: Option<u64>,
    feature_scale: Option<f64>,
    basis: Vec<Vec<f64>>,
    coefficients: Vec<Vec<f64>>,
    labels: Vec<f64>,
    // derived
    features: Vec<f64>,
    constants: ProblemConstants,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogisticDoc {
    d: usize,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    feature_scale: Option<f64>,
    basis: Vec<Vec<f64>>,
    coefficients: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

impl TryFrom<LogisticDoc> for LowRankLogistic {
    type Error = Error;

    fn try_from(doc: LogisticDoc) -> Result<Self> {
        let mut p = Self::from_parts(doc.d, doc.basis, doc.coefficients, doc.labels)?;
        p.seed = doc.seed;
        p.feature_scale = doc.feature_scale;
        Ok(p)
    }
}

impl From<LowRankLogistic> for LogisticDoc {
    fn from(p: LowRankLogistic) -> Self {
        LogisticDoc {
            d: p.d,
            seed: p.seed,
            feature_scale: p.feature_scale,
            basis: p.basis,
            coefficients: p.coefficients,
            labels: p.labels,
        }
    }
}

impl LowRankLogistic {
    /// Builds a problem from an orthonormal basis (`r` vectors of length `d`),
    /// per-sample subspace coefficients (`n` rows of length `r`) and ±1 labels.
    pub fn from_parts(
        d: usize,
        basis: Vec<Vec<f64>>,
        coefficients: Vec<Vec<f64>>,
        labels: Vec<f64>,
    ) -> Result<Self> {
        let r = basis.len();
        let n = coefficients.len();
        if d == 0 || r == 0 || r > d {
            return Err(Error::InvalidProblem(format!(
                "need 1 <= r <= d, got r = {r}, d = {d}"
            )));
        }
        if n == 0 || labels.len() != n {
            return Err(Error::InvalidProblem(format!(
                "{n} coefficient rows but {} labels",
                labels.len()
            )));
        }
        check_orthonormal(&basis, d)?;
        for (i, c) in coefficients.iter().enumerate() {
            if c.len() != r {
                return Err(Error::InvalidProblem(format!(
                    "coefficient row {i} has length {}, expected {r}",
                    c.len()
                )));
            }
            check_finite("coefficients", c)?;
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidProblem("labels must be +1 or -1".into()));
        }

        let mut features = vec![0.0; n * d];
        for (i, c) in coefficients.iter().enumerate() {
            let row = &mut features[i * d..(i + 1) * d];
            for (ck, bk) in c.iter().zip(&basis) {
                for (a, b) in row.iter_mut().zip(bk) {
                    *a += ck * b;
                }
            }
        }
        let lipschitz = (0..n)
            .map(|i| norm(&features[i * d..(i + 1) * d]))
            .fold(0.0, f64::max);
        if !(lipschitz > 0.0) {
            return Err(Error::InvalidProblem("all features are zero".into()));
        }

        // H = (1/4n) B (Σ c_i c_iᵀ) Bᵀ shares its nonzero spectrum with the
        // r×r coefficient Gram matrix.
        let gram = DMatrix::from_fn(r, r, |a, b| {
            coefficients.iter().map(|c| c[a] * c[b]).sum::<f64>() / (4.0 * n as f64)
        });
        let eig = SymmetricEigen::new(gram).eigenvalues;
        let trace_hessian: f64 = eig.iter().map(|v| v.max(0.0)).sum();
        let hessian_norm = eig.iter().cloned().fold(0.0, f64::max);

        let constants = ProblemConstants {
            lipschitz,
            smoothness: lipschitz * lipschitz / 4.0,
            effective_rank: trace_hessian / hessian_norm,
            trace_hessian,
            hessian_norm,
            min_value: None,
        };
        Ok(Self {
            d,
            seed: None,
            feature_scale: None,
            basis,
            coefficients,
            labels,
            features,
            constants,
        })
    }

    /// Random instance. Coefficients, the planted model and label flips come
    /// from streams that do not depend on `d`, so instances sharing a seed
    /// differ only in their embedding.
    pub fn generate(spec: &LogisticSpec) -> Result<Self> {
        let LogisticSpec {
            d,
            r,
            n,
            seed,
            feature_scale,
            label_flip,
        } = *spec;
        if r == 0 || r > d {
            return Err(Error::InvalidProblem(format!(
                "need 1 <= r <= d, got r = {r}, d = {d}"
            )));
        }
        if n == 0 {
            return Err(Error::InvalidProblem("n must be at least 1".into()));
        }
        if !(feature_scale > 0.0 && feature_scale.is_finite()) {
            return Err(Error::InvalidProblem("feature_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&label_flip) {
            return Err(Error::InvalidProblem("label_flip must be in [0, 1]".into()));
        }
        let root = RngStream::new(seed).derive("problem");

        let mut rng = root.derive("coefficients");
        let mut coefficients: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..r).map(|_| rng.standard_normal()).collect())
            .collect();
        let max_norm = coefficients.iter().map(|c| norm(c)).fold(0.0, f64::max);
        let s = feature_scale / max_norm;
        coefficients
            .iter_mut()
            .for_each(|c| c.iter_mut().for_each(|v| *v *= s));

        let mut rng = root.derive("planted");
        let planted: Vec<f64> = (0..r).map(|_| rng.standard_normal()).collect();
        let mut rng = root.derive("flips");
        let labels = coefficients
            .iter()
            .map(|c| {
                let y = if dot(c, &planted) >= 0.0 { 1.0 } else { -1.0 };
                if rng.open_unit() < label_flip {
                    -y
                } else {
                    y
                }
            })
            .collect();

        let mut rng = root.derive(&format!("basis:{d}"));
        let basis = random_basis(d, r, &mut rng)?;

        let mut p = Self::from_parts(d, basis, coefficients, labels)?;
        p.seed = Some(seed);
        p.feature_scale = Some(feature_scale);
        Ok(p)
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }
}

impl LossOracle for LowRankLogistic {
    fn dim(&self) -> usize {
        self.d
    }

    fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn sample_loss(&self, x: &[f64], i: usize) -> f64 {
        softplus(-self.labels[i] * dot(self.feature(i), x))
    }

    fn sample_grad_into(&self, x: &[f64], i: usize, out: &mut [f64]) {
        let a = self.feature(i);
        let y = self.labels[i];
        let w = -y * sigmoid(-y * dot(a, x));
        for (o, ai) in out.iter_mut().zip(a) {
            *o = w * ai;
        }
    }
}

// -----------------------------------------------------------------------------
// Spectrum quadratic
// -----------------------------------------------------------------------------

/// Nonincreasing, nonnegative eigenvalues of the Hessian `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SpectrumSpec(Vec<f64>);

impl SpectrumSpec {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidProblem("spectrum is empty".into()));
        }
        if eigenvalues.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidProblem(
                "eigenvalues must be finite and nonnegative".into(),
            ));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidProblem("spectrum must be nonincreasing".into()));
        }
        if !(eigenvalues[0] > 0.0) {
            return Err(Error::InvalidProblem("top eigenvalue must be positive".into()));
        }
        Ok(Self(eigenvalues))
    }

    /// `top / i` for `i = 1..=len`.
    pub fn harmonic(top: f64, len: usize) -> Result<Self> {
        Self::new((1..=len).map(|i| top / i as f64).collect())
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.0
    }

    pub fn top(&self) -> f64 {
        self.0[0]
    }

    pub fn trace(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl TryFrom<Vec<f64>> for SpectrumSpec {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SpectrumSpec> for Vec<f64> {
    fn from(s: SpectrumSpec) -> Self {
        s.0
    }
}

/// `f(x; ξ_i) = ½ (x - ξ_i)ᵀ H (x - ξ_i)` with `H = Σ_k λ_k b_k b_kᵀ`.
///
/// Not globally Lipschitz: the reported `L` is `ℓ · R` where `R` is the
/// radius of the region iterates are expected to stay in.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "QuadraticDoc", into = "QuadraticDoc")]
pub struct SpectrumQuadratic {
    d: usize,
    seed: Option<u64>,
    spectrum: SpectrumSpec,
    basis: Vec<Vec<f64>>,
    samples: Vec<Vec<f64>>,
    region_radius: f64,
    constants: ProblemConstants,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadraticDoc {
    d: usize,
    #[serde(default)]
    seed: Option<u64>,
    spectrum: SpectrumSpec,
    basis: Vec<Vec<f64>>,
    samples: Vec<Vec<f64>>,
    #[serde(default)]
    region_radius: Option<f64>,
}

impl TryFrom<QuadraticDoc> for SpectrumQuadratic {
    type Error = Error;
    fn try_from(doc: QuadraticDoc) -> Result<Self> {
        let mut p = Self::from_parts(doc.d, doc.spectrum, doc.basis, doc.samples)?;
        if let Some(r) = doc.region_radius {
            p = p.with_region_radius(r)?;
        }
        p.seed = doc.seed;
        Ok(p)
    }
}

impl From<SpectrumQuadratic> for QuadraticDoc {
    fn from(p: SpectrumQuadratic) -> Self {
        QuadraticDoc {
            d: p.d,
            seed: p.seed,
            spectrum: p.spectrum,
            basis: p.basis,
            samples: p.samples,
            region_radius: Some(p.region_radius),
        }
    }
}

impl SpectrumQuadratic {
    /// `basis` holds one orthonormal vector per eigenvalue.
    pub fn from_parts(
        d: usize,
        spectrum: SpectrumSpec,
        basis: Vec<Vec<f64>>,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let k = spectrum.eigenvalues().len();
        if d == 0 || k > d {
            return Err(Error::InvalidProblem(format!(
                "spectrum has {k} entries but d = {d}"
            )));
        }
        if basis.len() != k {
            return Err(Error::InvalidProblem(format!(
                "{} basis vectors for {k} eigenvalues",
                basis.len()
            )));
        }
        check_orthonormal(&basis, d)?;
        if samples.is_empty() {
            return Err(Error::InvalidProblem("n must be at least 1".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.len() != d {
                return Err(Error::InvalidProblem(format!(
                    "sample {i} has length {}, expected {d}",
                    s.len()
                )));
            }
            check_finite("samples", s)?;
        }
        let max_sample = samples.iter().map(|s| norm(s)).fold(0.0, f64::max);
        let mut p = Self {
            d,
            seed: None,
            spectrum,
            basis,
            samples,
            region_radius: 0.0,
            constants: ProblemConstants {
                lipschitz: 0.0,
                smoothness: 0.0,
                effective_rank: 0.0,
                trace_hessian: 0.0,
                hessian_norm: 0.0,
                min_value: None,
            },
        };
        let ell = p.spectrum.top();
        let trace = p.spectrum.trace();
        let mean = p.sample_mean();
        let min_value = avg_loss(&p, &mean);
        p.constants = ProblemConstants {
            lipschitz: 0.0,
            smoothness: ell,
            effective_rank: trace / ell,
            trace_hessian: trace,
            hessian_norm: ell,
            min_value: Some(min_value),
        };
        // Default region: x0 = 0, R = 2 (‖x0‖ + max ‖ξ_i‖).
        let radius = if max_sample > 0.0 { 2.0 * max_sample } else { 1.0 };
        p.with_region_radius(radius)
    }

    /// Random instance with `ξ_i ~ N(0, I_d)` and a random orthonormal basis.
    pub fn generate(d: usize, spectrum: SpectrumSpec, n: usize, seed: u64) -> Result<Self> {
        let k = spectrum.eigenvalues().len();
        if k > d {
            return Err(Error::InvalidProblem(format!(
                "spectrum has {k} entries but d = {d}"
            )));
        }
        if n == 0 {
            return Err(Error::InvalidProblem("n must be at least 1".into()));
        }
        let root = RngStream::new(seed).derive("problem");
        let basis = random_basis(d, k, &mut root.derive(&format!("basis:{d}")))?;
        let mut rng = root.derive("samples");
        let samples = (0..n)
            .map(|_| (0..d).map(|_| rng.standard_normal()).collect())
            .collect();
        let mut p = Self::from_parts(d, spectrum, basis, samples)?;
        p.seed = Some(seed);
        Ok(p)
    }

    /// Sets the iterate-region radius `R`; the reported `L` becomes `ℓ R`.
    pub fn with_region_radius(mut self, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidProblem("region radius must be positive".into()));
        }
        self.region_radius = radius;
        self.constants.lipschitz = self.constants.smoothness * radius;
        Ok(self)
    }

    pub fn region_radius(&self) -> f64 {
        self.region_radius
    }

    pub fn spectrum(&self) -> &SpectrumSpec {
        &self.spectrum
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    /// `ξ̄`, the minimizer of `F_S`.
    pub fn sample_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for s in &self.samples {
            for (a, b) in m.iter_mut().zip(s) {
                *a += b;
            }
        }
        let inv = 1.0 / self.samples.len() as f64;
        m.iter_mut().for_each(|v| *v *= inv);
        m
    }

    /// `H` as a dense row-major matrix.
    pub fn hessian(&self) -> Vec<f64> {
        let d = self.d;
        let mut h = vec![0.0; d * d];
        for (lam, b) in self.spectrum.eigenvalues().iter().zip(&self.basis) {
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] += lam * b[i] * b[j];
                }
            }
        }
        h
    }
}

impl LossOracle for SpectrumQuadratic {
    fn dim(&self) -> usize {
        self.d
    }

    fn num_samples(&self) -> usize {
        self.samples.len()
    }

    fn sample_loss(&self, x: &[f64], i: usize) -> f64 {
        let xi = &self.samples[i];
        let mut acc = 0.0;
        for (lam, b) in self.spectrum.eigenvalues().iter().zip(&self.basis) {
            let y: f64 = b.iter().zip(x.iter().zip(xi)).map(|(bj, (a, c))| bj * (a - c)).sum();
            acc += lam * y * y;
        }
        0.5 * acc
    }

    fn sample_grad_into(&self, x: &[f64], i: usize, out: &mut [f64]) {
        let xi = &self.samples[i];
        out.iter_mut().for_each(|o| *o = 0.0);
        for (lam, b) in self.spectrum.eigenvalues().iter().zip(&self.basis) {
            let y: f64 = b.iter().zip(x.iter().zip(xi)).map(|(bj, (a, c))| bj * (a - c)).sum();
            for (o, bj) in out.iter_mut().zip(b) {
                *o += lam * y * bj;
            }
        }
    }
}

// -----------------------------------------------------------------------------
// Problem
// -----------------------------------------------------------------------------

/// A serializable problem instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Problem {
    LowRankLogistic(LowRankLogistic),
    SpectrumQuadratic(SpectrumQuadratic),
}

impl Problem {
    pub fn low_rank_logistic(spec: &LogisticSpec) -> Result<Self> {
        LowRankLogistic::generate(spec).map(Problem::LowRankLogistic)
    }

    pub fn spectrum_quadratic(
        d: usize,
        spectrum: SpectrumSpec,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        SpectrumQuadratic::generate(d, spectrum, n, seed).map(Problem::SpectrumQuadratic)
    }

    pub fn constants(&self) -> &ProblemConstants {
        match self {
            Problem::LowRankLogistic(p) => &p.constants,
            Problem::SpectrumQuadratic(p) => &p.constants,
        }
    }

    /// `(L, ℓ, r_eff, tr H)`.
    pub fn lipschitz_constants(&self) -> (f64, f64, f64, f64) {
        let c = self.constants();
        (
            c.lipschitz,
            c.smoothness,
            c.effective_rank,
            c.trace_hessian,
        )
    }

    pub fn family(&self) -> &'static str {
        match self {
            Problem::LowRankLogistic(_) => "low_rank_logistic",
            Problem::SpectrumQuadratic(_) => "spectrum_quadratic",
        }
    }

    /// Radius of the region in which the reported `L` is valid, if bounded.
    pub fn region_radius(&self) -> Option<f64> {
        match self {
            Problem::LowRankLogistic(_) => None,
            Problem::SpectrumQuadratic(p) => Some(p.region_radius),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let serde_json::Value::Object(m) = &mut v {
            m.insert(
                "schema_version".into(),
                serde_json::Value::from(PROBLEM_SCHEMA_VERSION),
            );
        }
        Ok(serde_json::to_string(&v)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut v: serde_json::Value = serde_json::from_str(s)?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| Error::InvalidProblem("expected a JSON object".into()))?;
        match obj.remove("schema_version").and_then(|s| s.as_u64()) {
            Some(ver) if ver == PROBLEM_SCHEMA_VERSION as u64 => {}
            Some(ver) => {
                return Err(Error::InvalidProblem(format!(
                    "unsupported schema_version {ver}"
                )))
            }
            None => return Err(Error::InvalidProblem("missing schema_version".into())),
        }
        Ok(serde_json::from_value(v)?)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn fingerprint(&self) -> String {
        let json = self.to_json().expect("problem serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl LossOracle for Problem {
    fn dim(&self) -> usize {
        match self {
            Problem::LowRankLogistic(p) => p.dim(),
            Problem::SpectrumQuadratic(p) => p.dim(),
        }
    }

    fn num_samples(&self) -> usize {
        match self {
            Problem::LowRankLogistic(p) => p.num_samples(),
            Problem::SpectrumQuadratic(p) => p.num_samples(),
        }
    }

    #[inline]
    fn sample_loss(&self, x: &[f64], i: usize) -> f64 {
        match self {
            Problem::LowRankLogistic(p) => p.sample_loss(x, i),
            Problem::SpectrumQuadratic(p) => p.sample_loss(x, i),
        }
    }

    fn sample_grad_into(&self, x: &[f64], i: usize, out: &mut [f64]) {
        match self {
            Problem::LowRankLogistic(p) => p.sample_grad_into(x, i, out),
            Problem::SpectrumQuadratic(p) => p.sample_grad_into(x, i, out),
        }
    }
}

// -----------------------------------------------------------------------------
// Testbeds
// -----------------------------------------------------------------------------

/// `f(x; ξ_i) = a_iᵀx`.
#[derive(Clone, Debug)]
pub struct LinearLoss {
    vectors: Vec<Vec<f64>>,
}

impl LinearLoss {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let d = vectors.first().map(|v| v.len()).unwrap_or(0);
        if d == 0 || vectors.iter().any(|v| v.len() != d) {
            return Err(Error::InvalidProblem("vectors must be nonempty and equal length".into()));
        }
        Ok(Self { vectors })
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }
}

impl LossOracle for LinearLoss {
    fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    fn num_samples(&self) -> usize {
        self.vectors.len()
    }

    fn sample_loss(&self, x: &[f64], i: usize) -> f64 {
        dot(&self.vectors[i], x)
    }

    fn sample_grad_into(&self, _x: &[f64], i: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.vectors[i]);
    }
}

/// `f(x; ξ_i) = Σ_j (x_j - c_ij)⁴`. Smooth only locally.
#[derive(Clone, Debug)]
pub struct QuarticLoss {
    centers: Vec<Vec<f64>>,
}

impl QuarticLoss {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        let d = centers.first().map(|v| v.len()).unwrap_or(0);
        if d == 0 || centers.iter().any(|v| v.len() != d) {
            return Err(Error::InvalidProblem("centers must be nonempty and equal length".into()));
        }
        Ok(Self { centers })
    }

    /// `x ↦ Σ_j x_j⁴` in `d` dimensions, one sample.
    pub fn centered(d: usize) -> Self {
        Self {
            centers: vec![vec![0.0; d]],
        }
    }

    /// Upper bound on `‖∇²f(y; ξ_i)‖₂` over all `y` within `radius` of `x`,
    /// for every sample.
    pub fn local_smoothness(&self, x: &[f64], radius: f64) -> f64 {
        self.centers
            .iter()
            .flat_map(|c| x.iter().zip(c).map(|(a, b)| (a - b).abs()))
            .map(|dev| 12.0 * (dev + radius).powi(2))
            .fold(0.0, f64::max)
    }
}

impl LossOracle for QuarticLoss {
    fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn num_samples(&self) -> usize {
        self.centers.len()
    }

    fn sample_loss(&self, x: &[f64], i: usize) -> f64 {
        x.iter()
            .zip(&self.centers[i])
            .map(|(a, c)| (a - c).powi(4))
            .sum()
    }

    fn sample_grad_into(&self, x: &[f64], i: usize, out: &mut [f64]) {
        for ((o, a), c) in out.iter_mut().zip(x).zip(&self.centers[i]) {
            *o = 4.0 * (a - c).powi(3);
        }
    }
}

/// Central finite-difference gradient of `f(·; ξ_i)`; test oracle.
pub fn numeric_grad<P: LossOracle + ?Sized>(p: &P, x: &[f64], i: usize, h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for j in 0..x.len() {
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = p.sample_loss(&xp, i);
        xp[j] = orig - h;
        let fm = p.sample_loss(&xp, i);
        xp[j] = orig;
        g[j] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Helper for tests and the harness: `x + s u`.
pub fn shifted(x: &[f64], s: f64, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    linalg::add_scaled(x, s, u, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::make_rng;

    fn single_feature() -> LowRankLogistic {
        LowRankLogistic::from_parts(4, vec![vec![1.0, 0.0, 0.0, 0.0]], vec![vec![2.0]], vec![1.0])
            .unwrap()
    }

    #[test]
    fn logistic_at_origin() {
        let p = single_feature();
        let x = [0.0; 4];
        assert!((eval_loss(&p, &x, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(eval_grad(&p, &x, 0).unwrap(), vec![-1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn logistic_constants_single_feature() {
        let p = Problem::LowRankLogistic(single_feature());
        let (l, ell, r, tr) = p.lipschitz_constants();
        assert_eq!(l, 2.0);
        assert_eq!(ell, 1.0);
        assert!((tr - 1.0).abs() < 1e-15);
        assert!((r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn index_and_dimension_checked() {
        let p = single_feature();
        assert!(matches!(
            eval_loss(&p, &[0.0; 4], 1),
            Err(Error::IndexOutOfRange { index: 1, n: 1 })
        ));
        assert!(matches!(
            eval_loss(&p, &[0.0; 3], 0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rank_larger_than_dimension_rejected() {
        let spec = LogisticSpec::new(4, 5, 10, 0, 1.0);
        assert!(LowRankLogistic::generate(&spec).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
    }

    #[test]
    fn generated_features_have_requested_rank() {
        let spec = LogisticSpec::new(64, 4, 100, 3, 1.0);
        let p = LowRankLogistic::generate(&spec).unwrap();
        let a = DMatrix::from_fn(100, 64, |i, j| p.feature(i)[j]);
        let sv = a.singular_values();
        let top = sv.max();
        let rank = sv.iter().filter(|s| **s > 1e-10 * top).count();
        assert_eq!(rank, 4);
        let max_norm = (0..100).map(|i| norm(p.feature(i))).fold(0.0, f64::max);
        assert!((max_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logistic_gradient_bounded_by_lipschitz() {
        let spec = LogisticSpec::new(16, 3, 40, 5, 2.5);
        let p = Problem::low_rank_logistic(&spec).unwrap();
        let l = p.constants().lipschitz;
        let mut rng = make_rng(1);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..16).map(|_| 3.0 * rng.standard_normal()).collect();
            let i = (rng.next_u64_bounded(40)) as usize;
            let g = eval_grad(&p, &x, i).unwrap();
            assert!(norm(&g) <= l * (1.0 + 1e-12));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let lp = Problem::low_rank_logistic(&LogisticSpec::new(12, 3, 20, 9, 2.0)).unwrap();
        let qp = Problem::spectrum_quadratic(6, SpectrumSpec::harmonic(1.0, 6).unwrap(), 10, 2)
            .unwrap();
        let mut rng = make_rng(2);
        for p in [&lp, &qp] {
            let d = p.dim();
            for k in 0..50 {
                let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
                let i = k % p.num_samples();
                let g = eval_grad(p, &x, i).unwrap();
                let fd = numeric_grad(p, &x, i, 1e-6);
                let err = norm(&shifted(&g, -1.0, &fd));
                assert!(err <= 1e-5 * norm(&g).max(1e-3), "{err}");
            }
        }
    }

    #[test]
    fn harmonic_spectrum_constants() {
        let s = SpectrumSpec::harmonic(1.0, 4).unwrap();
        let p = Problem::spectrum_quadratic(4, s, 3, 0).unwrap();
        let c = p.constants();
        assert!((c.trace_hessian - 25.0 / 12.0).abs() < 1e-12);
        assert!((c.effective_rank - 25.0 / 12.0).abs() < 1e-12);
        assert_eq!(c.smoothness, 1.0);

        let s = SpectrumSpec::new(vec![1.0, 0.5, 0.25]).unwrap();
        let p = Problem::spectrum_quadratic(5, s, 3, 0).unwrap();
        assert_eq!(p.constants().smoothness, 1.0);
        assert!((p.constants().trace_hessian - 1.75).abs() < 1e-15);
    }

    #[test]
    fn spectrum_validation() {
        assert!(SpectrumSpec::new(vec![1.0, -0.5]).is_err());
        assert!(SpectrumSpec::new(vec![0.5, 1.0]).is_err());
        assert!(SpectrumSpec::new(vec![]).is_err());
        assert!(Problem::spectrum_quadratic(2, SpectrumSpec::harmonic(1.0, 3).unwrap(), 1, 0)
            .is_err());
    }

    fn identity_quadratic(samples: Vec<Vec<f64>>) -> SpectrumQuadratic {
        let d = samples[0].len();
        let basis = (0..d)
            .map(|k| (0..d).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect();
        SpectrumQuadratic::from_parts(d, SpectrumSpec::new(vec![1.0; d]).unwrap(), basis, samples)
            .unwrap()
    }

    #[test]
    fn quadratic_two_samples() {
        let p = identity_quadratic(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let x = [0.0, 0.0];
        assert!((avg_loss(&p, &x) - 0.5).abs() < 1e-15);
        assert_eq!(avg_grad(&p, &x), vec![0.0, 0.0]);
        assert_eq!(avg_grad_norm_sq(&p, &x), 0.0);
        assert!((p.constants.min_value.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quadratic_zero_samples_minimum() {
        let p = identity_quadratic(vec![vec![0.0; 3]; 4]);
        let x = [0.0; 3];
        assert_eq!(avg_loss(&p, &x), 0.0);
        assert_eq!(p.constants.min_value, Some(0.0));
    }

    #[test]
    fn quadratic_gradient_closed_form() {
        let p = identity_quadratic(vec![vec![1.0, 2.0]]);
        assert_eq!(eval_grad(&p, &[3.0, 5.0], 0).unwrap(), vec![2.0, 3.0]);
        assert_eq!(
            avg_grad_norm_sq(&p, &[3.0, 5.0]),
            norm_sq(&eval_grad(&p, &[3.0, 5.0], 0).unwrap())
        );
    }

    #[test]
    fn quadratic_minimizer_has_zero_gradient() {
        let p = SpectrumQuadratic::generate(8, SpectrumSpec::harmonic(2.0, 8).unwrap(), 30, 4)
            .unwrap();
        let m = p.sample_mean();
        assert!(avg_grad_norm_sq(&p, &m) < 1e-18);
        assert!((avg_loss(&p, &m) - p.constants.min_value.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn quadratic_hessian_matches_spectrum() {
        let s = SpectrumSpec::new(vec![3.0, 1.0, 0.5, 0.1]).unwrap();
        let p = SpectrumQuadratic::generate(6, s.clone(), 5, 11).unwrap();
        let h = DMatrix::from_row_slice(6, 6, &p.hessian());
        let eig = SymmetricEigen::new(h.clone()).eigenvalues;
        let tr: f64 = eig.iter().sum();
        let top = eig.iter().cloned().fold(f64::MIN, f64::max);
        assert!((tr - s.trace()).abs() < 1e-9);
        assert!((top - s.top()).abs() < 1e-9);

        // Hessian-vector products from gradients: ∇f(x) - ∇f(0) = H x.
        let x: Vec<f64> = (0..6).map(|j| j as f64 - 2.5).collect();
        let g1 = avg_grad(&p, &x);
        let g0 = avg_grad(&p, &[0.0; 6]);
        for i in 0..6 {
            let hx: f64 = (0..6).map(|j| h[(i, j)] * x[j]).sum();
            assert!((g1[i] - g0[i] - hx).abs() < 1e-9);
        }
    }

    #[test]
    fn effective_rank_bounds() {
        for seed in 0..5 {
            let p = Problem::low_rank_logistic(&LogisticSpec::new(32, 5, 200, seed, 1.0)).unwrap();
            let c = p.constants();
            assert!(c.trace_hessian <= c.effective_rank * c.smoothness * (1.0 + 1e-12));
            assert!(c.hessian_norm <= c.smoothness);
            assert!(c.effective_rank <= 5.0 + 1e-12);
            assert!(c.effective_rank <= p.dim() as f64);
        }
    }

    #[test]
    fn quadratic_lipschitz_uses_region() {
        let p = identity_quadratic(vec![vec![3.0, 4.0]]);
        assert_eq!(p.region_radius(), 10.0);
        assert_eq!(p.constants.lipschitz, 10.0);
        let p = p.with_region_radius(2.0).unwrap();
        assert_eq!(p.constants.lipschitz, 2.0);
    }

    #[test]
    fn json_round_trip() {
        let p = Problem::low_rank_logistic(&LogisticSpec::new(8, 2, 5, 1, 1.0)).unwrap();
        let s = p.to_json().unwrap();
        let q = Problem::from_json(&s).unwrap();
        assert_eq!(q.to_json().unwrap(), s);
        assert_eq!(p.fingerprint(), q.fingerprint());
        let x = [0.3; 8];
        assert_eq!(avg_loss(&p, &x).to_bits(), avg_loss(&q, &x).to_bits());

        let p = Problem::spectrum_quadratic(5, SpectrumSpec::harmonic(1.0, 3).unwrap(), 4, 2)
            .unwrap();
        let s = p.to_json().unwrap();
        assert_eq!(Problem::from_json(&s).unwrap().to_json().unwrap(), s);
    }

    #[test]
    fn json_rejects_bad_documents() {
        assert!(Problem::from_json("[]").is_err());
        assert!(Problem::from_json(r#"{"family":"low_rank_logistic"}"#).is_err());
        let p = Problem::low_rank_logistic(&LogisticSpec::new(4, 2, 3, 1, 1.0)).unwrap();
        let s = p.to_json().unwrap().replace("\"schema_version\":1", "\"schema_version\":9");
        assert!(Problem::from_json(&s).is_err());
    }

    #[test]
    fn within_subspace_data_independent_of_dimension() {
        let a = LowRankLogistic::generate(&LogisticSpec::new(16, 3, 50, 7, 1.0)).unwrap();
        let b = LowRankLogistic::generate(&LogisticSpec::new(256, 3, 50, 7, 1.0)).unwrap();
        assert_eq!(a.coefficients(), b.coefficients());
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.constants.effective_rank, b.constants.effective_rank);
        assert!((a.constants.lipschitz - b.constants.lipschitz).abs() < 1e-12);
    }

    #[test]
    fn quartic_local_smoothness() {
        let q = QuarticLoss::centered(1);
        assert_eq!(q.local_smoothness(&[1.0], 0.5), 12.0 * 2.25);
        assert_eq!(q.sample_loss(&[2.0], 0), 16.0);
    }

    trait BoundedDraw {
        fn next_u64_bounded(&mut self, n: u64) -> u64;
    }

    impl BoundedDraw for crate::sampling::RngStream {
        fn next_u64_bounded(&mut self, n: u64) -> u64 {
            use rand::Rng;
            self.gen_range(0..n)
        }
    }
}
