//! DP-GD with zeroth-order gradients ("alg1"), DPZero, and the non-private
//! ZO-GD baseline, plus hyperparameter derivation from problem constants.
//!
//! All three share one loop: draw `u_t` on the √d sphere, take the central
//! finite difference of every sample's loss along it, clip, average in index
//! order, add noise, step. They differ in what is clipped and where noise
//! goes:
//!
//! | algorithm | clipped per sample        | noise            |
//! |-----------|---------------------------|------------------|
//! | alg1      | the vector `fd_i · u_t`   | `N(0, σ² I_d)`   |
//! | dpzero    | the scalar `fd_i`         | `N(0, σ²) · u_t` |
//! | zo-gd     | nothing (`C = ∞`)         | none             |
//!
//! With `σ = 0` and `C = ∞` the three updates are the same floating-point
//! operations, so trajectories agree bit for bit.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    check_clip, check_lambda, clip_along, clip_scalar_unchecked, Perturbed,
};
use crate::linalg::norm;
use crate::privacy::{noise_scale, sensitivity_bound, PrivacyBudget};
use crate::problems::{avg_grad_norm_sq, avg_loss, LossOracle, Problem, ProblemConstants};
use crate::sampling::{sample_gaussian_scalar, sample_gaussian_vector, sample_sphere, Direction, RngStream};
use crate::trace::{inf_as_null, RunTrace, TraceFooter, TraceHeader, TraceRow, TRACE_SCHEMA_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "alg1")]
    Alg1,
    #[serde(rename = "dpzero")]
    DpZero,
    #[serde(rename = "zo-gd")]
    ZoGd,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Alg1 => "alg1",
            Algorithm::DpZero => "dpzero",
            Algorithm::ZoGd => "zo-gd",
        }
    }

    pub fn is_private(&self) -> bool {
        !matches!(self, Algorithm::ZoGd)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alg1" => Ok(Algorithm::Alg1),
            "dpzero" => Ok(Algorithm::DpZero),
            "zo-gd" => Ok(Algorithm::ZoGd),
            other => Err(Error::invalid(
                "algorithm",
                format!("unknown algorithm `{other}` (expected alg1, dpzero or zo-gd)"),
            )),
        }
    }
}

/// Step size, iteration count, smoothing, clipping and noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub algorithm: Algorithm,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub iterations: usize,
    pub lambda: f64,
    /// Clipping threshold; `+∞` disables clipping.
    #[serde(rename = "C", with = "inf_as_null")]
    pub clip: f64,
    pub sigma: f64,
    /// Budget σ was calibrated against, for private algorithms.
    pub budget: Option<PrivacyBudget>,
    /// True while σ equals the calibrated value for (C, n, T, budget).
    pub sigma_calibrated: bool,
    /// `L̃` (dpzero derivation only).
    pub smoothed_lipschitz: Option<f64>,
}

impl HyperParams {
    /// Checks ranges. `alpha = 0` is allowed.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("T", "must be at least 1"));
        }
        check_lambda(self.lambda)?;
        check_clip(self.clip)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Recomputes σ from (C, n, T, budget). No-op for zo-gd.
    pub fn recalibrate(&mut self, n: usize) -> Result<()> {
        if let (true, Some(budget)) = (self.algorithm.is_private(), self.budget) {
            self.sigma = noise_scale(self.clip, n, self.iterations, &budget)?.sigma;
            self.sigma_calibrated = true;
        }
        Ok(())
    }

    /// Scales λ by `m ∈ (0, 1]`.
    pub fn with_lambda_multiplier(mut self, m: f64) -> Result<Self> {
        if !(m > 0.0 && m <= 1.0) {
            return Err(Error::invalid("lambda_multiplier", format!("must lie in (0, 1], got {m}")));
        }
        self.lambda *= m;
        Ok(self)
    }
}

/// What the derivations read from a problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub n: usize,
    pub d: usize,
    pub constants: ProblemConstants,
}

impl From<&Problem> for ProblemSummary {
    fn from(p: &Problem) -> Self {
        ProblemSummary {
            n: p.num_samples(),
            d: p.dim(),
            constants: p.constants().clone(),
        }
    }
}

impl ProblemSummary {
    fn check(&self) -> Result<()> {
        let c = &self.constants;
        if self.n == 0 || self.d == 0 {
            return Err(Error::invalid("problem", "n and d must be at least 1"));
        }
        for (name, v) in [
            ("lipschitz", c.lipschitz),
            ("smoothness", c.smoothness),
            ("effective_rank", c.effective_rank),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid("problem", format!("{name} must be positive, got {v}")));
            }
        }
        if c.effective_rank > self.d as f64 * (1.0 + 1e-12) {
            return Err(Error::InvalidProblem(format!(
                "effective rank {} exceeds d = {}",
                c.effective_rank, self.d
            )));
        }
        Ok(())
    }
}

fn floor_iterations(t: f64) -> usize {
    if t.is_finite() && t >= 1.0 {
        t.floor() as usize
    } else {
        1
    }
}

fn finish(
    algorithm: Algorithm,
    alpha: f64,
    iterations: usize,
    lambda: f64,
    clip: f64,
    n: usize,
    budget: &PrivacyBudget,
    smoothed_lipschitz: Option<f64>,
) -> Result<HyperParams> {
    let mut hp = HyperParams {
        algorithm,
        alpha,
        iterations,
        lambda,
        clip,
        sigma: 0.0,
        budget: Some(*budget),
        sigma_calibrated: false,
        smoothed_lipschitz,
    };
    hp.recalibrate(n)?;
    Ok(hp)
}

/// Alg1 under plain smoothness: `α = 1/(4ℓd)`, `T = nε/√(d log(e+ε/δ))`,
/// `C = Ld`, λ at its upper bound.
pub fn derive_params_alg1_smooth(p: &ProblemSummary, budget: &PrivacyBudget) -> Result<HyperParams> {
    p.check()?;
    let (n, d) = (p.n as f64, p.d as f64);
    let (l, ell) = (p.constants.lipschitz, p.constants.smoothness);
    let rate = (d * budget.log_term()).sqrt() / (n * budget.eps());
    finish(
        Algorithm::Alg1,
        1.0 / (4.0 * ell * d),
        floor_iterations(1.0 / rate),
        4.0 * l / (ell * d) * rate.sqrt(),
        l * d,
        p.n,
        budget,
        None,
    )
}

/// Alg1 under an effective-rank bound: `α = 1/(4ℓ(r+2))`,
/// `T = n(r+2)ε/(d√(r log(e+ε/δ)))`, `C = Ld`.
pub fn derive_params_alg1_rank(p: &ProblemSummary, budget: &PrivacyBudget) -> Result<HyperParams> {
    p.check()?;
    let (n, d) = (p.n as f64, p.d as f64);
    let (l, ell, r) = (
        p.constants.lipschitz,
        p.constants.smoothness,
        p.constants.effective_rank,
    );
    let rate = (r * budget.log_term()).sqrt() / (n * budget.eps());
    finish(
        Algorithm::Alg1,
        1.0 / (4.0 * ell * (r + 2.0)),
        floor_iterations((r + 2.0) / (d * rate)),
        4.0 * l / (ell * d) * rate.sqrt(),
        l * d,
        p.n,
        budget,
        None,
    )
}

/// `L̃² = L² log(2√(2π) d (r+2) n³ ε² / (r log(e+ε/δ)))`.
pub fn smoothed_lipschitz_sq(p: &ProblemSummary, budget: &PrivacyBudget) -> f64 {
    let (n, d) = (p.n as f64, p.d as f64);
    let (l, r) = (p.constants.lipschitz, p.constants.effective_rank);
    let eps = budget.eps();
    let arg = 2.0 * (2.0 * std::f64::consts::PI).sqrt() * d * (r + 2.0) * n.powi(3) * eps * eps
        / (r * budget.log_term());
    l * l * arg.ln()
}

/// DPZero: `α = 1/(4ℓ(r+2))`, `T = n(r+2)ε/(4√(r log(e+ε/δ)))`, `C = 4L̃`,
/// `λ = min{4(2-√2)L̃, (L/√d)·rate^{1/2}} / (ℓd)`.
pub fn derive_params_dpzero(p: &ProblemSummary, budget: &PrivacyBudget) -> Result<HyperParams> {
    p.check()?;
    let (n, d) = (p.n as f64, p.d as f64);
    let (l, ell, r) = (
        p.constants.lipschitz,
        p.constants.smoothness,
        p.constants.effective_rank,
    );
    let lt_sq = smoothed_lipschitz_sq(p, budget);
    if !(lt_sq > 0.0) {
        return Err(Error::invalid(
            "problem",
            format!("n = {} is too small for the DPZero clipping threshold (L̃² = {lt_sq})", p.n),
        ));
    }
    let lt = lt_sq.sqrt();
    let rate = (r * budget.log_term()).sqrt() / (n * budget.eps());
    let lambda = (4.0 * (2.0 - std::f64::consts::SQRT_2) * lt).min(l / d.sqrt() * rate.sqrt())
        / (ell * d);
    finish(
        Algorithm::DpZero,
        1.0 / (4.0 * ell * (r + 2.0)),
        floor_iterations((r + 2.0) / (4.0 * rate)),
        lambda,
        4.0 * lt,
        p.n,
        budget,
        Some(lt),
    )
}

/// ZO-GD baseline: the DPZero schedule with `C = ∞` and `σ = 0`.
pub fn derive_params_zo_gd(p: &ProblemSummary, budget: &PrivacyBudget) -> Result<HyperParams> {
    let mut hp = derive_params_dpzero(p, budget)?;
    hp.algorithm = Algorithm::ZoGd;
    hp.clip = f64::INFINITY;
    hp.sigma = 0.0;
    hp.budget = None;
    hp.sigma_calibrated = false;
    hp.smoothed_lipschitz = None;
    Ok(hp)
}

/// Default derivation for `algorithm` (alg1 uses the rank-aware one).
pub fn derive_params(
    algorithm: Algorithm,
    p: &ProblemSummary,
    budget: &PrivacyBudget,
) -> Result<HyperParams> {
    match algorithm {
        Algorithm::Alg1 => derive_params_alg1_rank(p, budget),
        Algorithm::DpZero => derive_params_dpzero(p, budget),
        Algorithm::ZoGd => derive_params_zo_gd(p, budget),
    }
}

/// Loop state.
#[derive(Clone, Debug, PartialEq)]
pub struct IterateState {
    pub x: Vec<f64>,
    pub t: usize,
    pub clip_total: u64,
    /// Clip events in the most recent step.
    pub last_clips: u64,
}

impl IterateState {
    pub fn new(x0: Vec<f64>) -> Self {
        Self {
            x: x0,
            t: 0,
            clip_total: 0,
            last_clips: 0,
        }
    }
}

/// Counts per-sample loss evaluations.
pub struct CountingOracle<'a, P: ?Sized> {
    inner: &'a P,
    calls: Cell<u64>,
}

impl<'a, P: LossOracle + ?Sized> CountingOracle<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }
}

impl<P: LossOracle + ?Sized> LossOracle for CountingOracle<'_, P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }

    #[inline]
    fn sample_loss(&self, x: &[f64], i: usize) -> f64 {
        self.calls.set(self.calls.get() + 1);
        self.inner.sample_loss(x, i)
    }

    fn sample_grad_into(&self, x: &[f64], i: usize, out: &mut [f64]) {
        self.inner.sample_grad_into(x, i, out)
    }
}

/// Stream for iteration `t`. Depends only on the run seed and `t`, never on
/// the data.
pub fn iteration_stream(root: &RngStream, t: usize) -> RngStream {
    root.derive(&format!("iter:{t}"))
}

/// `u_t` for a run rooted at `root`.
pub fn draw_direction(root: &RngStream, t: usize, d: usize) -> Result<Direction> {
    sample_sphere(d, &mut iteration_stream(root, t).derive("u"))
}

fn finite_differences<P: LossOracle + ?Sized>(
    p: &P,
    x: &[f64],
    u: &Direction,
    lambda: f64,
    t: usize,
) -> Result<Vec<f64>> {
    let pts = Perturbed::new(x, u.as_slice(), lambda);
    (0..p.num_samples())
        .map(|i| {
            let fd = pts.difference(p, i, lambda);
            if fd.is_finite() {
                Ok(fd)
            } else {
                Err(Error::NonFiniteLoss {
                    iteration: t,
                    sample: i,
                })
            }
        })
        .collect()
}

fn check_step<P: LossOracle + ?Sized>(p: &P, state: &IterateState, hp: &HyperParams, u: &Direction) -> Result<()> {
    if state.t >= hp.iterations {
        return Err(Error::invalid("state", format!("t = {} but T = {}", state.t, hp.iterations)));
    }
    if state.x.len() != p.dim() || u.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: if state.x.len() != p.dim() { state.x.len() } else { u.dim() },
        });
    }
    Ok(())
}

/// One alg1 update with given `u_t` and noise vector `z_t`:
/// `x ← x - α((1/n) Σ clip_C(fd_i u_t) + z_t)`.
pub fn apply_alg1<P: LossOracle + ?Sized>(
    p: &P,
    state: &IterateState,
    hp: &HyperParams,
    u: &Direction,
    z: &[f64],
) -> Result<IterateState> {
    check_step(p, state, hp, u)?;
    if z.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: z.len(),
        });
    }
    let fds = finite_differences(p, &state.x, u, hp.lambda, state.t)?;
    let u_norm = norm(u.as_slice());
    let mut clips = 0u64;
    let mut sum = 0.0;
    for fd in fds {
        // clip_C(fd·u) = (clipped coefficient)·u
        let c = clip_along(fd, u_norm, hp.clip);
        clips += c.clipped as u64;
        sum += c.value;
    }
    let mean = sum / p.num_samples() as f64;
    let x = state
        .x
        .iter()
        .zip(u.as_slice())
        .zip(z)
        .map(|((xj, uj), zj)| xj - hp.alpha * (mean * uj + zj))
        .collect();
    Ok(IterateState {
        x,
        t: state.t + 1,
        clip_total: state.clip_total + clips,
        last_clips: clips,
    })
}

/// One DPZero update with given `u_t` and scalar noise `z_t`:
/// `x ← x - α((1/n) Σ clip_C(fd_i) + z_t) u_t`.
pub fn apply_dpzero<P: LossOracle + ?Sized>(
    p: &P,
    state: &IterateState,
    hp: &HyperParams,
    u: &Direction,
    z: f64,
) -> Result<IterateState> {
    check_step(p, state, hp, u)?;
    let fds = finite_differences(p, &state.x, u, hp.lambda, state.t)?;
    let mut clips = 0u64;
    let mut sum = 0.0;
    for fd in fds {
        let c = clip_scalar_unchecked(fd, hp.clip);
        clips += c.clipped as u64;
        sum += c.value;
    }
    let coef = sum / p.num_samples() as f64 + z;
    let x = state
        .x
        .iter()
        .zip(u.as_slice())
        .map(|(xj, uj)| xj - hp.alpha * (coef * uj))
        .collect();
    Ok(IterateState {
        x,
        t: state.t + 1,
        clip_total: state.clip_total + clips,
        last_clips: clips,
    })
}

/// Draws `u_t`, `z_t` from `root` and applies one alg1 update.
pub fn step_alg1<P: LossOracle + ?Sized>(
    p: &P,
    state: &IterateState,
    hp: &HyperParams,
    root: &RngStream,
) -> Result<IterateState> {
    let it = iteration_stream(root, state.t);
    let u = sample_sphere(p.dim(), &mut it.derive("u"))?;
    let z = sample_gaussian_vector(p.dim(), hp.sigma, &mut it.derive("z"))?;
    apply_alg1(p, state, hp, &u, &z)
}

/// Draws `u_t`, `z_t` from `root` and applies one DPZero update.
pub fn step_dpzero<P: LossOracle + ?Sized>(
    p: &P,
    state: &IterateState,
    hp: &HyperParams,
    root: &RngStream,
) -> Result<IterateState> {
    let it = iteration_stream(root, state.t);
    let u = sample_sphere(p.dim(), &mut it.derive("u"))?;
    let z = sample_gaussian_scalar(hp.sigma, &mut it.derive("z"))?;
    apply_dpzero(p, state, hp, &u, z)
}

/// Run-time settings that do not affect the algorithm itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Initial point; zeros when absent.
    pub x0: Option<Vec<f64>>,
    /// Record loss and `‖∇F_S‖²` every this many iterations (and at `T`).
    pub log_stride: usize,
    /// Keep `x_t` every this many iterations for output selection.
    pub snapshot_stride: usize,
    pub record_wall_time: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            x0: None,
            log_stride: 1,
            snapshot_stride: 1,
            record_wall_time: false,
        }
    }
}

/// Uniformly picks a stored iterate `x_τ` with `τ < T`.
pub fn select_output(trace: &RunTrace, rng: &mut RngStream) -> Result<(usize, Vec<f64>)> {
    let candidates: Vec<&(usize, Vec<f64>)> = trace
        .snapshots
        .iter()
        .filter(|(t, _)| *t < trace.header.iterations)
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let k = rng.gen_range(0..candidates.len());
    let (tau, x) = candidates[k];
    Ok((*tau, x.clone()))
}

fn header_for(problem: &Problem, hp: &HyperParams, seed: u64, opts: &RunOptions) -> TraceHeader {
    let c = problem.constants();
    TraceHeader {
        schema_version: TRACE_SCHEMA_VERSION,
        algorithm: hp.algorithm,
        seed,
        n: problem.num_samples(),
        d: problem.dim(),
        alpha: hp.alpha,
        iterations: hp.iterations,
        lambda: hp.lambda,
        clip: hp.clip,
        sigma: hp.sigma,
        sensitivity: sensitivity_bound(hp.clip, problem.num_samples())
            .ok()
            .filter(|s| s.is_finite()),
        eps: hp.budget.map(|b| b.eps()),
        delta: hp.budget.map(|b| b.delta()),
        sigma_calibrated: hp.sigma_calibrated,
        lipschitz: c.lipschitz,
        smoothness: c.smoothness,
        effective_rank: c.effective_rank,
        problem_family: problem.family().to_string(),
        problem_fingerprint: problem.fingerprint(),
        region_radius: problem.region_radius(),
        log_stride: opts.log_stride,
        snapshot_stride: opts.snapshot_stride,
        diagnostics_private: false,
    }
}

/// Runs `hp.iterations` steps of `hp.algorithm` from the stream `root`,
/// then selects the output iterate from `root/output`.
pub fn run(
    problem: &Problem,
    hp: &HyperParams,
    root: &RngStream,
    opts: &RunOptions,
) -> Result<RunTrace> {
    hp.validate()?;
    if opts.log_stride == 0 || opts.snapshot_stride == 0 {
        return Err(Error::invalid("stride", "strides must be at least 1"));
    }
    let started = Instant::now();
    let d = problem.dim();
    let x0 = match &opts.x0 {
        Some(x) if x.len() != d => {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: x.len(),
            })
        }
        Some(x) => x.clone(),
        None => vec![0.0; d],
    };
    let oracle = CountingOracle::new(problem);
    let t_max = hp.iterations;

    let mut trace = RunTrace {
        header: header_for(problem, hp, root.seed(), opts),
        rows: Vec::with_capacity(t_max + 1),
        footer: None,
        snapshots: Vec::new(),
    };
    let mut state = IterateState::new(x0);
    let mut max_norm = norm(&state.x);

    let record = |trace: &mut RunTrace, state: &IterateState| -> Result<()> {
        let t = state.t;
        let logged = t % opts.log_stride == 0 || t == t_max;
        let (loss, grad) = if logged {
            let loss = avg_loss(problem, &state.x);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: t,
                    sample: 0,
                });
            }
            (Some(loss), Some(avg_grad_norm_sq(problem, &state.x)))
        } else {
            (None, None)
        };
        trace.rows.push(TraceRow {
            t,
            loss,
            grad_norm_sq: grad,
            clip_count: state.last_clips,
        });
        if t < t_max && t % opts.snapshot_stride == 0 {
            trace.snapshots.push((t, state.x.clone()));
        }
        Ok(())
    };

    record(&mut trace, &state)?;
    while state.t < t_max {
        state = match hp.algorithm {
            Algorithm::Alg1 => step_alg1(&oracle, &state, hp, root)?,
            Algorithm::DpZero | Algorithm::ZoGd => step_dpzero(&oracle, &state, hp, root)?,
        };
        max_norm = max_norm.max(norm(&state.x));
        record(&mut trace, &state)?;
    }

    let (tau, x_tau) = select_output(&trace, &mut root.derive("output"))?;
    trace.footer = Some(TraceFooter {
        tau,
        final_grad_norm_sq: avg_grad_norm_sq(problem, &x_tau),
        final_loss: avg_loss(problem, &x_tau),
        oracle_calls: oracle.calls(),
        clip_total: state.clip_total,
        max_iterate_norm: max_norm,
        left_region: problem.region_radius().is_some_and(|r| max_norm > r),
        wall_time_secs: opts
            .record_wall_time
            .then(|| started.elapsed().as_secs_f64()),
    });
    Ok(trace)
}
