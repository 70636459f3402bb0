//! Monte Carlo checks for the sampling and estimator identities the
//! algorithms rely on. Each check returns a self-describing [`CheckReport`]
//! whose pass flag can be recomputed from its items.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{check_lambda, Perturbed};
use crate::linalg::{dot, norm, norm_sq};
use crate::optimizers::{derive_params_dpzero, run, Algorithm, HyperParams, RunOptions};
use crate::privacy::{verify_sensitivity, PrivacyBudget};
use crate::problems::{
    avg_grad, LinearLoss, LogisticSpec, LossOracle, LowRankLogistic, Problem, QuarticLoss, SpectrumQuadratic,
    SpectrumSpec,
};
use crate::sampling::{sample_ball, sample_sphere, Direction, RngStream};
use crate::trace::RunTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `|estimate - target| <= tolerance`
    TwoSided,
    /// `estimate <= target + tolerance`
    UpperBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub estimate: f64,
    pub target: f64,
    pub tolerance: f64,
    /// Monte Carlo standard error of `estimate`, when meaningful.
    pub stderr: Option<f64>,
    pub comparison: Comparison,
    pub pass: bool,
}

impl CheckItem {
    pub fn two_sided(name: impl Into<String>, estimate: f64, target: f64, tolerance: f64, stderr: Option<f64>) -> Self {
        Self::new(name.into(), estimate, target, tolerance, stderr, Comparison::TwoSided)
    }

    pub fn upper_bound(name: impl Into<String>, estimate: f64, bound: f64, slack: f64, stderr: Option<f64>) -> Self {
        Self::new(name.into(), estimate, bound, slack, stderr, Comparison::UpperBound)
    }

    fn new(name: String, estimate: f64, target: f64, tolerance: f64, stderr: Option<f64>, comparison: Comparison) -> Self {
        let mut item = CheckItem {
            name,
            estimate,
            target,
            tolerance,
            stderr,
            comparison,
            pass: false,
        };
        item.pass = item.evaluate();
        item
    }

    /// Pass criterion from the item's own fields.
    pub fn evaluate(&self) -> bool {
        match self.comparison {
            Comparison::TwoSided => (self.estimate - self.target).abs() <= self.tolerance,
            Comparison::UpperBound => self.estimate <= self.target + self.tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub samples: u64,
    pub items: Vec<CheckItem>,
    /// Auxiliary numbers (bounds, parameters) for the reader.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, f64>,
    pub pass: bool,
}

impl CheckReport {
    fn new(check: &str, samples: u64, items: Vec<CheckItem>) -> Self {
        let pass = items.iter().all(|i| i.pass);
        CheckReport {
            check: check.to_string(),
            samples,
            items,
            values: BTreeMap::new(),
            pass,
        }
    }

    fn with_value(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.to_string(), v);
        self
    }

    /// Recomputes every item and the overall flag; true if nothing changed.
    pub fn is_consistent(&self) -> bool {
        self.items.iter().all(|i| i.pass == i.evaluate())
            && self.pass == self.items.iter().all(|i| i.evaluate())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Streaming mean and variance.
#[derive(Clone, Debug, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

/// Direction sampler under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Uniform on the radius-√d sphere.
    Sphere,
    /// Deliberately broken: `z/‖z‖` without the `√d` rescale.
    Unnormalized,
}

impl Sampler {
    pub fn draw(&self, d: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        let u = sample_sphere(d, rng)?.into_inner();
        Ok(match self {
            Sampler::Sphere => u,
            Sampler::Unnormalized => {
                let s = (d as f64).sqrt();
                u.into_iter().map(|v| v / s).collect()
            }
        })
    }
}

/// `a = (1, 2, 0, …)` truncated to `d`.
pub fn default_probe_vector(d: usize) -> Vec<f64> {
    (0..d).map(|i| [1.0, 2.0].get(i).copied().unwrap_or(0.0)).collect()
}

/// `H = diag(1, 1/2, …, 1/d)`.
pub fn default_probe_diagonal(d: usize) -> Vec<f64> {
    (1..=d).map(|k| 1.0 / k as f64).collect()
}

const SECOND_MOMENT_TOL: f64 = 0.01;
const FOURTH_MOMENT_TOL: f64 = 0.02;

fn rel_item(name: &str, acc: &Welford, target: f64, rel: f64) -> CheckItem {
    CheckItem::two_sided(name, acc.mean, target, rel * target.abs(), Some(acc.stderr()))
}

/// Worst entry (largest deviation relative to tolerance) among `accs`.
fn worst_item(name: &str, accs: &[(Welford, f64)], tol_of: impl Fn(f64) -> f64) -> Option<CheckItem> {
    accs.iter()
        .map(|(acc, target)| {
            CheckItem::two_sided(name, acc.mean, *target, tol_of(*target), Some(acc.stderr()))
        })
        .max_by(|a, b| {
            let ra = (a.estimate - a.target).abs() / a.tolerance;
            let rb = (b.estimate - b.target).abs() / b.tolerance;
            ra.total_cmp(&rb)
        })
}

/// Moments of `u` uniform on the radius-√d sphere against their closed
/// forms, with `a = (1,2,0,…)` and `H = diag(1, 1/2, …, 1/d)`.
///
/// Second moments must match to 1% relative, fourth moments to 2%; zero
/// targets use the same numbers as absolute tolerances.
pub fn check_sphere_moments(d: usize, samples: u64, sampler: Sampler, rng: &mut RngStream) -> Result<CheckReport> {
    if d == 0 || samples < 2 {
        return Err(Error::invalid("samples", "need d >= 1 and at least 2 samples"));
    }
    let a = default_probe_vector(d);
    let h = default_probe_diagonal(d);
    let df = d as f64;
    let w = df / (df + 2.0);
    let a2 = norm_sq(&a);
    let tr_h: f64 = h.iter().sum();
    let a_h_a: f64 = a.iter().zip(&h).map(|(ai, hi)| hi * ai * ai).sum();

    let mut mean = vec![Welford::default(); d];
    let mut second = vec![Welford::default(); d * d];
    let mut quad_a = Welford::default();
    let mut weighted = vec![Welford::default(); d * d];
    let mut quad_h = Welford::default();
    let mut joint = Welford::default();
    let mut fourth = vec![Welford::default(); d];
    let mut cross = vec![Welford::default(); d * d];

    for _ in 0..samples {
        let u = sampler.draw(d, rng)?;
        let ua = dot(&u, &a);
        let ua2 = ua * ua;
        let uhu: f64 = u.iter().zip(&h).map(|(ui, hi)| hi * ui * ui).sum();
        quad_a.push(ua2);
        quad_h.push(uhu);
        joint.push(ua2 * uhu);
        for i in 0..d {
            mean[i].push(u[i]);
            fourth[i].push(u[i].powi(4));
            for j in 0..d {
                let p = u[i] * u[j];
                second[i * d + j].push(p);
                weighted[i * d + j].push(ua2 * p);
                if i < j {
                    cross[i * d + j].push(p * p);
                }
            }
        }
    }

    let mut items = Vec::new();
    let means: Vec<(Welford, f64)> = mean.into_iter().map(|m| (m, 0.0)).collect();
    items.extend(worst_item("E[u] = 0", &means, |_| SECOND_MOMENT_TOL));

    let mut diag = Vec::new();
    let mut off = Vec::new();
    let mut wdiag = Vec::new();
    let mut woff = Vec::new();
    let mut xs = Vec::new();
    for i in 0..d {
        for j in 0..d {
            let s = second[i * d + j].clone();
            let target_w = w * (2.0 * a[i] * a[j] + if i == j { a2 } else { 0.0 });
            let wacc = weighted[i * d + j].clone();
            if i == j {
                diag.push((s, 1.0));
                wdiag.push((wacc, target_w));
            } else {
                off.push((s, 0.0));
                woff.push((wacc, target_w));
            }
            if i < j {
                xs.push((cross[i * d + j].clone(), w));
            }
        }
    }
    items.extend(worst_item("E[uu^T] diagonal = 1", &diag, |t| SECOND_MOMENT_TOL * t));
    items.extend(worst_item("E[uu^T] off-diagonal = 0", &off, |_| SECOND_MOMENT_TOL));
    items.push(rel_item("E[(u^T a)^2] = |a|^2", &quad_a, a2, SECOND_MOMENT_TOL));
    // fourth-moment matrix entries; zero targets measured against the diagonal scale
    let scale = w * a2;
    items.extend(worst_item(
        "E[(u^T a)^2 uu^T] diagonal = d/(d+2) (2a_i^2 + |a|^2)",
        &wdiag,
        |t| FOURTH_MOMENT_TOL * t.abs().max(scale),
    ));
    items.extend(worst_item(
        "E[(u^T a)^2 uu^T] off-diagonal = 2d/(d+2) a_i a_j",
        &woff,
        |t| FOURTH_MOMENT_TOL * t.abs().max(scale),
    ));
    items.push(rel_item("E[u^T H u] = tr H", &quad_h, tr_h, SECOND_MOMENT_TOL));
    items.push(rel_item(
        "E[(u^T a)^2 u^T H u] = d/(d+2) (2 a^T H a + |a|^2 tr H)",
        &joint,
        w * (2.0 * a_h_a + a2 * tr_h),
        FOURTH_MOMENT_TOL,
    ));
    let fourths: Vec<(Welford, f64)> = fourth.into_iter().map(|f| (f, 3.0 * w)).collect();
    items.extend(worst_item("E[u_i^4] = 3d/(d+2)", &fourths, |t| FOURTH_MOMENT_TOL * t));
    items.extend(worst_item("E[u_i^2 u_j^2] = d/(d+2)", &xs, |t| FOURTH_MOMENT_TOL * t));

    Ok(CheckReport::new("sphere_moments", samples, items)
        .with_value("d", df)
        .with_value("trace_h", tr_h))
}

/// `2√(2π) exp(-C²/(8‖a‖²))`.
pub fn tail_bound(c: f64, a_norm: f64) -> f64 {
    2.0 * (2.0 * PI).sqrt() * (-c * c / (8.0 * a_norm * a_norm)).exp()
}

/// Empirical `P(|uᵀa| >= C)` against the sub-Gaussian bound, one-sided with
/// 3 binomial standard errors of slack.
pub fn check_tail_bound(d: usize, samples: u64, a: &[f64], c_list: &[f64], rng: &mut RngStream) -> Result<CheckReport> {
    if a.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: a.len(),
        });
    }
    let a_norm = norm(a);
    if !(a_norm > 0.0) || samples == 0 {
        return Err(Error::invalid("a", "need a nonzero vector and samples > 0"));
    }
    let mut hits = vec![0u64; c_list.len()];
    for _ in 0..samples {
        let u = sample_sphere(d, rng)?;
        let ua = dot(u.as_slice(), a).abs();
        for (h, &c) in hits.iter_mut().zip(c_list) {
            *h += (ua >= c) as u64;
        }
    }
    let nf = samples as f64;
    let items = c_list
        .iter()
        .zip(&hits)
        .map(|(&c, &h)| {
            let p = h as f64 / nf;
            let se = (p * (1.0 - p) / nf).sqrt();
            CheckItem::upper_bound(
                format!("P(|u^T a| >= {:.4}|a|)", c / a_norm),
                p,
                tail_bound(c, a_norm),
                3.0 * se,
                Some(se),
            )
        })
        .collect();
    Ok(CheckReport::new("tail_bound", samples, items).with_value("d", d as f64))
}

/// Reference value of `∇f_λ(x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum GradientReference {
    /// Known in closed form (e.g. quadratics, where `∇f_λ = ∇f`).
    Exact(Vec<f64>),
    /// `E_v ∇F_S(x + λv)`, `v` uniform on the radius-√d ball, estimated with
    /// this many draws.
    BallMonteCarlo(u64),
}

/// `(mean, stderr)` per coordinate of `∇F_S(x + λv)` over ball draws.
fn ball_gradient<P: LossOracle + ?Sized>(p: &P, x: &[f64], lambda: f64, draws: u64, rng: &mut RngStream) -> Result<Vec<(f64, f64)>> {
    let d = p.dim();
    let mut acc = vec![Welford::default(); d];
    let mut pt = vec![0.0; d];
    for _ in 0..draws {
        let v = sample_ball(d, rng)?;
        for ((o, xi), vi) in pt.iter_mut().zip(x).zip(&v) {
            *o = xi + lambda * vi;
        }
        for (a, g) in acc.iter_mut().zip(avg_grad(p, &pt)) {
            a.push(g);
        }
    }
    Ok(acc.iter().map(|a| (a.mean, a.stderr())).collect())
}

/// Per-coordinate `(mean, stderr)` of the two-point estimate of `∇F_S`,
/// plus `(mean, stderr)` of `‖g‖²`.
fn estimator_stats<P: LossOracle + ?Sized>(
    p: &P,
    x: &[f64],
    lambda: f64,
    draws: u64,
    rng: &mut RngStream,
) -> Result<(Vec<Welford>, Welford)> {
    let d = p.dim();
    let n = p.num_samples();
    let mut acc = vec![Welford::default(); d];
    let mut sq = Welford::default();
    for _ in 0..draws {
        let u: Direction = sample_sphere(d, rng)?;
        let pts = Perturbed::new(x, u.as_slice(), lambda);
        let fd = (0..n).map(|i| pts.difference(p, i, lambda)).sum::<f64>() / n as f64;
        for (a, ui) in acc.iter_mut().zip(u.as_slice()) {
            a.push(fd * ui);
        }
        sq.push(fd * fd * norm_sq(u.as_slice()));
    }
    Ok((acc, sq))
}

/// Coordinatewise `|mean(g_λ) - ∇f_λ| <= 3·(joint MC stderr)`.
pub fn check_estimator_unbiased<P: LossOracle + ?Sized>(
    p: &P,
    x: &[f64],
    lambda: f64,
    samples: u64,
    reference: &GradientReference,
    rng: &mut RngStream,
) -> Result<CheckReport> {
    check_lambda(lambda)?;
    let d = p.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x.len(),
        });
    }
    let target: Vec<(f64, f64)> = match reference {
        GradientReference::Exact(g) if g.len() == d => g.iter().map(|&v| (v, 0.0)).collect(),
        GradientReference::Exact(g) => {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: g.len(),
            })
        }
        GradientReference::BallMonteCarlo(m) => ball_gradient(p, x, lambda, *m, &mut rng.derive("reference"))?,
    };
    let (acc, _) = estimator_stats(p, x, lambda, samples, &mut rng.derive("estimator"))?;
    let items = acc
        .iter()
        .zip(&target)
        .enumerate()
        .map(|(j, (a, (t, t_se)))| {
            let se = (a.stderr().powi(2) + t_se * t_se).sqrt();
            // floor covers zero-variance cases such as d = 1
            let tol = (3.0 * se).max(1e-12 * t.abs().max(1.0));
            CheckItem::two_sided(format!("coordinate {j}"), a.mean, *t, tol, Some(se))
        })
        .collect();
    Ok(CheckReport::new("estimator_unbiased", samples, items).with_value("lambda", lambda))
}

/// Both smoothing bounds at `x` for an `ℓ`-smooth `F_S`:
/// `‖∇f - ∇f_λ‖ <= (ℓ/2)λd^{3/2}` and `E‖g_λ‖² <= 2d‖∇f‖² + (ℓ²/2)λ²d³`,
/// each one-sided with 3 standard errors of slack.
pub fn check_smoothing_gap<P: LossOracle + ?Sized>(
    p: &P,
    x: &[f64],
    lambda: f64,
    smoothness: f64,
    samples: u64,
    rng: &mut RngStream,
) -> Result<CheckReport> {
    check_lambda(lambda)?;
    let d = p.dim();
    let df = d as f64;
    let grad = avg_grad(p, x);
    let smoothed = ball_gradient(p, x, lambda, samples, &mut rng.derive("reference"))?;
    let diff: Vec<f64> = grad.iter().zip(&smoothed).map(|(g, (s, _))| g - s).collect();
    let gap = norm(&diff);
    let gap_se = norm(&smoothed.iter().map(|(_, se)| *se).collect::<Vec<_>>());
    let (_, sq) = estimator_stats(p, x, lambda, samples, &mut rng.derive("estimator"))?;

    let gap_bound = smoothness / 2.0 * lambda * df.powf(1.5);
    let second_bound = 2.0 * df * norm_sq(&grad) + smoothness * smoothness / 2.0 * lambda * lambda * df.powi(3);
    let items = vec![
        CheckItem::upper_bound("|grad f - grad f_lambda|", gap, gap_bound, 3.0 * gap_se, Some(gap_se)),
        CheckItem::upper_bound("E|g_lambda|^2", sq.mean, second_bound, 3.0 * sq.stderr(), Some(sq.stderr())),
    ];
    Ok(CheckReport::new("smoothing_gap", samples, items)
        .with_value("lambda", lambda)
        .with_value("smoothness", smoothness))
}

/// Over a shrinking λ grid, the largest `|fd_λ(u) - uᵀ∇f|` over shared
/// directions must stay within `(ℓ(λ)/2)·λ·d` and shrink with λ.
/// `smoothness_at(λ)` returns a smoothness constant valid on the segment
/// `x ± λu`.
pub fn check_lambda_limit<P: LossOracle + ?Sized>(
    p: &P,
    x: &[f64],
    lambdas: &[f64],
    directions: u64,
    smoothness_at: impl Fn(f64) -> f64,
    rng: &mut RngStream,
) -> Result<CheckReport> {
    let d = p.dim();
    let n = p.num_samples();
    let grad = avg_grad(p, x);
    let dirs: Vec<Direction> = (0..directions)
        .map(|_| sample_sphere(d, rng))
        .collect::<Result<_>>()?;
    let mut items = Vec::new();
    let mut prev: Option<f64> = None;
    for &lambda in lambdas {
        check_lambda(lambda)?;
        let worst = dirs
            .iter()
            .map(|u| {
                let pts = Perturbed::new(x, u.as_slice(), lambda);
                let fd = (0..n).map(|i| pts.difference(p, i, lambda)).sum::<f64>() / n as f64;
                (fd - dot(u.as_slice(), &grad)).abs()
            })
            .fold(0.0, f64::max);
        let bound = smoothness_at(lambda) / 2.0 * lambda * d as f64;
        items.push(CheckItem::upper_bound(
            format!("max |fd - u^T grad| at lambda = {lambda}"),
            worst,
            bound,
            0.0,
            None,
        ));
        if let Some(pw) = prev {
            items.push(CheckItem::upper_bound(
                format!("deviation shrinks at lambda = {lambda}"),
                worst,
                pw,
                1e-12 * pw.max(1.0),
                None,
            ));
        }
        prev = Some(worst);
    }
    Ok(CheckReport::new("lambda_limit", directions, items))
}

/// Per-event clip probability bound and the `C₀` used.
///
/// `C₀ = C/√2` when that leaves room for the smoothing term
/// (`C >= C₀ + ℓλd/2`), otherwise `C₀ = C - ℓλd/2`.
pub fn clip_event_bound(clip: f64, lipschitz: f64, smoothness: f64, lambda: f64, d: usize) -> (f64, f64) {
    if clip.is_infinite() {
        return (0.0, f64::INFINITY);
    }
    let slack = smoothness * lambda * d as f64 / 2.0;
    let preferred = clip / std::f64::consts::SQRT_2;
    let c0 = if clip - preferred >= slack { preferred } else { clip - slack };
    if c0 <= 0.0 {
        return (1.0, c0);
    }
    let b = 2.0 * (2.0 * PI).sqrt() * (-c0 * c0 / (8.0 * lipschitz * lipschitz)).exp();
    (b.min(1.0), c0)
}

/// Observed clip events of a finished DPZero run against the union bound
/// `nT·p`, with 3 binomial standard errors of slack.
pub fn check_clip_rate<P: LossOracle + ?Sized>(
    trace: &RunTrace,
    hp: &HyperParams,
    p: &P,
    lipschitz: f64,
    smoothness: f64,
) -> Result<CheckReport> {
    if hp.algorithm == Algorithm::Alg1 {
        return Err(Error::invalid("trace", "clip-rate check applies to scalar clipping runs"));
    }
    let footer = trace.footer.as_ref().ok_or(Error::EmptyTrace)?;
    let n = p.num_samples() as f64;
    let t = hp.iterations as f64;
    let (per_event, c0) = clip_event_bound(hp.clip, lipschitz, smoothness, hp.lambda, p.dim());
    let events = n * t;
    let expected = events * per_event;
    let sd = (events * per_event * (1.0 - per_event)).sqrt();
    let items = vec![CheckItem::upper_bound(
        "clip events",
        footer.clip_total as f64,
        expected,
        3.0 * sd,
        Some(sd),
    )];
    Ok(CheckReport::new("clip_rate", events as u64, items)
        .with_value("per_event_bound", per_event)
        .with_value("c0", c0)
        .with_value("inverse_nT", 1.0 / events))
}

/// Settings for [`run_suite`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Tenfold fewer Monte Carlo samples.
    pub quick: bool,
    pub sampler: Sampler,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            quick: false,
            sampler: Sampler::Sphere,
        }
    }
}

/// Runs every check with default settings. Each check draws from its own
/// labeled substream of `seed`.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let root = RngStream::new(opts.seed).derive("validation");
    let scale = |n: u64| if opts.quick { n / 10 } else { n };
    let mut out = Vec::new();

    out.push(check_sphere_moments(8, scale(2_000_000), opts.sampler, &mut root.derive("sphere_moments"))?);

    for d in [4usize, 64] {
        let a = default_probe_vector(d);
        let an = norm(&a);
        let mut cs: Vec<f64> = [0.0, 1.0, 2.0, 3.0, 4.0].iter().map(|k| k * an).collect();
        cs.push(an * (d as f64).sqrt());
        let mut r = check_tail_bound(d, scale(1_000_000), &a, &cs, &mut root.derive(&format!("tail_bound:{d}")))?;
        r.check = format!("tail_bound_d{d}");
        out.push(r);
    }

    let quad = SpectrumQuadratic::generate(8, SpectrumSpec::harmonic(1.0, 8)?, 4, 11)?;
    let xq = vec![0.5; 8];
    let mut r = check_estimator_unbiased(
        &quad,
        &xq,
        0.3,
        scale(1_000_000),
        &GradientReference::Exact(avg_grad(&quad, &xq)),
        &mut root.derive("unbiased:quadratic"),
    )?;
    r.check = "estimator_unbiased_quadratic".into();
    out.push(r);

    let lin = LinearLoss::new(vec![vec![1.0, -2.0, 0.5, 0.0]])?;
    let mut r = check_estimator_unbiased(
        &lin,
        &[0.0; 4],
        0.1,
        scale(1_000_000),
        &GradientReference::Exact(vec![1.0, -2.0, 0.5, 0.0]),
        &mut root.derive("unbiased:linear"),
    )?;
    r.check = "estimator_unbiased_linear".into();
    out.push(r);

    let quartic = QuarticLoss::centered(1);
    let mut r = check_estimator_unbiased(
        &quartic,
        &[1.0],
        0.1,
        scale(10_000),
        &GradientReference::BallMonteCarlo(scale(1_000_000)),
        &mut root.derive("unbiased:quartic"),
    )?;
    r.check = "estimator_unbiased_quartic".into();
    out.push(r);

    for lambda in [0.01, 0.1, 0.5] {
        let ell = quartic.local_smoothness(&[1.0], lambda);
        let mut r = check_smoothing_gap(
            &quartic,
            &[1.0],
            lambda,
            ell,
            scale(200_000),
            &mut root.derive(&format!("smoothing:quartic:{lambda}")),
        )?;
        r.check = format!("smoothing_gap_quartic_lambda{lambda}");
        out.push(r);
    }
    let mut r = check_smoothing_gap(&lin, &[0.0; 4], 0.1, 0.0, scale(200_000), &mut root.derive("smoothing:linear"))?;
    r.check = "smoothing_gap_linear".into();
    out.push(r);

    let q3 = QuarticLoss::centered(3);
    let x3 = [0.5, -0.2, 1.0];
    out.push(check_lambda_limit(
        &q3,
        &x3,
        &[0.5, 0.1, 0.01, 0.001],
        500,
        |l| q3.local_smoothness(&x3, l * 3f64.sqrt()),
        &mut root.derive("lambda_limit"),
    )?);

    out.push(sensitivity_report(&mut root.derive("sensitivity"))?);

    let p = Problem::low_rank_logistic(&LogisticSpec::new(64, 5, 200, 1, 1.0))?;
    let budget = PrivacyBudget::new(2.0, 1e-5)?;
    let hp = derive_params_dpzero(&(&p).into(), &budget)?;
    let trace = run(&p, &hp, &root.derive("clip_rate"), &RunOptions {
        log_stride: hp.iterations,
        ..Default::default()
    })?;
    let c = p.constants();
    out.push(check_clip_rate(&trace, &hp, &p, c.lipschitz, c.smoothness)?);
    Ok(out)
}

/// Brute-force neighbor sensitivity on a small logistic dataset plus the
/// extremal linear pair that attains `2C/n`.
fn sensitivity_report(rng: &mut RngStream) -> Result<CheckReport> {
    let data = LowRankLogistic::generate(&LogisticSpec::new(10, 3, 5, 21, 2.0))?;
    let raw_pool = LowRankLogistic::generate(&LogisticSpec::new(10, 3, 20, 22, 2.0))?;
    let pool = LowRankLogistic::from_parts(
        10,
        data.basis().to_vec(),
        raw_pool.coefficients().to_vec(),
        raw_pool.labels().to_vec(),
    )?;
    let mut items = Vec::new();
    for c in [0.05, 0.5, 5.0] {
        let u = sample_sphere(10, rng)?;
        let x: Vec<f64> = (0..10).map(|_| rng.standard_normal()).collect();
        let r = verify_sensitivity(&data, &pool, &x, &u, 1e-3, c)?;
        let slack = 1e-12 * r.bound;
        items.push(CheckItem::upper_bound(format!("scalar release, C = {c}"), r.scalar_max, r.bound, slack, None));
        items.push(CheckItem::upper_bound(format!("vector release, C = {c}"), r.vector_max, r.bound, slack, None));
    }
    let a = vec![100.0, 100.0];
    let ext = LinearLoss::new(vec![a.clone()])?;
    let neg = LinearLoss::new(vec![a.iter().map(|v| -v).collect()])?;
    let u = Direction::from_vec(vec![1.0, 1.0])?;
    let r = verify_sensitivity(&ext, &neg, &[0.0, 0.0], &u, 0.1, 1.0)?;
    let tol = 1e-12 * r.bound;
    items.push(CheckItem::two_sided("extremal scalar release = 2C/n", r.scalar_max, r.bound, tol, None));
    items.push(CheckItem::two_sided("extremal vector release = 2C/n", r.vector_max, r.bound, tol, None));
    Ok(CheckReport::new("sensitivity", 100, items))
}
