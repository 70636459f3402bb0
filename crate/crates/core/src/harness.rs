//! Experiment orchestration: configs, per-seed runs, summaries, dimension
//! sweeps, and the trace CSV format.
//!
//! A trace file looks like
//!
//! ```text
//! # header: {"schema_version":1,"algorithm":"dpzero",...}
//! t,loss,grad_norm_sq,clip_count
//! 0,0.6931471805599453,0.0123,0
//! 1,0.6931,,0
//! # footer: {"tau":0,...}
//! ```
//!
//! Loss and gradient cells are empty on rows skipped by `log_stride`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::{ls_slope, norm};
use crate::optimizers::{derive_params, run, Algorithm, HyperParams, ProblemSummary, RunOptions};
use crate::privacy::{noise_scale, PrivacyBudget};
use crate::problems::{LogisticSpec, LossOracle, Problem, ProblemConstants, SpectrumQuadratic, SpectrumSpec};
use crate::sampling::make_rng;
use crate::trace::{RunTrace, TraceFooter, TraceHeader, TraceRow, TRACE_SCHEMA_VERSION};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const TRACE_COLUMNS: [&str; 4] = ["t", "loss", "grad_norm_sq", "clip_count"];

fn default_feature_scale() -> f64 {
    1.0
}

fn default_label_flip() -> f64 {
    0.1
}

fn default_one_f64() -> f64 {
    1.0
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicSpectrum {
    pub top: f64,
    pub len: usize,
}

/// Either an explicit nonincreasing list or `λ_k = top/k`, `k = 1..len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpectrumConfig {
    List(Vec<f64>),
    Harmonic { harmonic: HarmonicSpectrum },
}

impl SpectrumConfig {
    pub fn build(&self) -> Result<SpectrumSpec> {
        match self {
            SpectrumConfig::List(v) => SpectrumSpec::new(v.clone()),
            SpectrumConfig::Harmonic { harmonic } => SpectrumSpec::harmonic(harmonic.top, harmonic.len),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    LowRankLogistic {
        d: usize,
        r: usize,
        n: usize,
        seed: u64,
        #[serde(default = "default_feature_scale")]
        feature_scale: f64,
        #[serde(default = "default_label_flip")]
        label_flip: f64,
    },
    SpectrumQuadratic {
        d: usize,
        n: usize,
        seed: u64,
        spectrum: SpectrumConfig,
        #[serde(default)]
        region_radius: Option<f64>,
    },
    /// A problem saved as JSON.
    File { path: PathBuf },
    /// Bare constants; usable for parameter derivation only.
    Constants {
        d: usize,
        n: usize,
        lipschitz: f64,
        smoothness: f64,
        effective_rank: f64,
    },
}

impl ProblemConfig {
    /// Copy with the ambient dimension replaced (sweeps).
    pub fn with_dim(&self, new_d: usize) -> Result<Self> {
        let mut c = self.clone();
        match &mut c {
            ProblemConfig::LowRankLogistic { d, .. }
            | ProblemConfig::SpectrumQuadratic { d, .. }
            | ProblemConfig::Constants { d, .. } => *d = new_d,
            ProblemConfig::File { .. } => {
                return Err(Error::InvalidConfig(
                    "cannot sweep the dimension of a problem loaded from a file".into(),
                ))
            }
        }
        Ok(c)
    }

    /// Copy with the sample count replaced.
    pub fn with_samples(&self, new_n: usize) -> Result<Self> {
        let mut c = self.clone();
        match &mut c {
            ProblemConfig::LowRankLogistic { n, .. }
            | ProblemConfig::SpectrumQuadratic { n, .. }
            | ProblemConfig::Constants { n, .. } => *n = new_n,
            ProblemConfig::File { .. } => {
                return Err(Error::InvalidConfig(
                    "cannot resize a problem loaded from a file".into(),
                ))
            }
        }
        Ok(c)
    }

    /// Builds the instance. `x0` widens the default quadratic region to
    /// `2(‖x0‖ + max ‖ξ_i‖)`.
    pub fn build(&self, x0: Option<&[f64]>) -> Result<Problem> {
        match self {
            ProblemConfig::LowRankLogistic {
                d,
                r,
                n,
                seed,
                feature_scale,
                label_flip,
            } => {
                let mut spec = LogisticSpec::new(*d, *r, *n, *seed, *feature_scale);
                spec.label_flip = *label_flip;
                Problem::low_rank_logistic(&spec)
            }
            ProblemConfig::SpectrumQuadratic {
                d,
                n,
                seed,
                spectrum,
                region_radius,
            } => {
                let q = SpectrumQuadratic::generate(*d, spectrum.build()?, *n, *seed)?;
                let radius = match (region_radius, x0) {
                    (Some(r), _) => Some(*r),
                    (None, Some(x)) => {
                        let max_xi = q.samples().iter().map(|s| norm(s)).fold(0.0, f64::max);
                        Some(2.0 * (norm(x) + max_xi)).filter(|r| *r > 0.0)
                    }
                    (None, None) => None,
                };
                let q = match radius {
                    Some(r) => q.with_region_radius(r)?,
                    None => q,
                };
                Ok(Problem::SpectrumQuadratic(q))
            }
            ProblemConfig::File { path } => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Problem::from_json(&text)
            }
            ProblemConfig::Constants { .. } => Err(Error::InvalidConfig(
                "the `constants` family supports parameter derivation only".into(),
            )),
        }
    }

    /// `(n, d, constants)` for parameter derivation.
    pub fn summary(&self, x0: Option<&[f64]>) -> Result<ProblemSummary> {
        match self {
            ProblemConfig::Constants {
                d,
                n,
                lipschitz,
                smoothness,
                effective_rank,
            } => Ok(ProblemSummary {
                n: *n,
                d: *d,
                constants: ProblemConstants {
                    lipschitz: *lipschitz,
                    smoothness: *smoothness,
                    effective_rank: *effective_rank,
                    trace_hessian: effective_rank * smoothness,
                    hessian_norm: *smoothness,
                    min_value: None,
                },
            }),
            other => Ok((&other.build(x0)?).into()),
        }
    }
}

/// Optional replacements for derived hyperparameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default, rename = "T")]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub lambda: Option<f64>,
    /// A number or `"inf"`.
    #[serde(default, rename = "C", with = "clip_override")]
    pub clip: Option<f64>,
    /// Setting σ by hand marks the run as not calibrated to the budget.
    #[serde(default)]
    pub sigma: Option<f64>,
}

mod clip_override {
    use serde::{de, Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(c) if c.is_infinite() && *c > 0.0 => s.serialize_str("inf"),
            Some(c) => s.serialize_f64(*c),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(c)) => Ok(Some(c)),
            Some(Raw::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Raw::Text(t)) => Err(de::Error::custom(format!(
                "expected a number or \"inf\", got \"{t}\""
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub problem: ProblemConfig,
    pub algorithm: Algorithm,
    pub budget: PrivacyBudget,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default = "default_one_f64")]
    pub lambda_multiplier: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_stride")]
    pub log_stride: usize,
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub record_wall_time: bool,
}

/// Every settable config key with its unit or meaning, in help order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("schema_version", "integer, must be 1"),
    ("problem.family", "low_rank_logistic | spectrum_quadratic | file | constants"),
    ("problem.d", "ambient dimension (count)"),
    ("problem.r", "feature-subspace rank, logistic only (count)"),
    ("problem.n", "number of samples (count)"),
    ("problem.seed", "problem-generation seed (u64)"),
    ("problem.feature_scale", "largest feature norm, logistic only (dimensionless)"),
    ("problem.label_flip", "label-noise probability, logistic only (0..1)"),
    ("problem.spectrum", "quadratic Hessian eigenvalues: list, or {\"harmonic\":{\"top\":..,\"len\":..}}"),
    ("problem.region_radius", "quadratic iterate-region radius R (norm units)"),
    ("problem.path", "problem JSON file, family=file only (path)"),
    ("problem.lipschitz", "L, family=constants only"),
    ("problem.smoothness", "ℓ, family=constants only"),
    ("problem.effective_rank", "r, family=constants only"),
    ("algorithm", "alg1 | dpzero | zo-gd"),
    ("budget.eps", "privacy ε (> 0)"),
    ("budget.delta", "privacy δ (0..1)"),
    ("overrides.alpha", "step size α (>= 0)"),
    ("overrides.T", "iterations (count >= 1)"),
    ("overrides.lambda", "smoothing radius λ (> 0)"),
    ("overrides.C", "clipping threshold (> 0, or \"inf\")"),
    ("overrides.sigma", "noise std σ; disables calibration (>= 0)"),
    ("lambda_multiplier", "scales the derived λ (0..1]"),
    ("seeds", "run seeds (list of u64, nonempty)"),
    ("output_dir", "directory for traces and summary (path)"),
    ("log_stride", "log loss/gradient every k iterations (count >= 1)"),
    ("snapshot_stride", "keep x_t for output selection every k iterations (count >= 1)"),
    ("x0", "initial point (list of d floats; default zeros)"),
    ("record_wall_time", "write wall time into trace footers (bool)"),
];

fn json_error_to_schema(e: serde_json::Error) -> Error {
    Error::Schema {
        line: e.line() as u64,
        message: e.to_string(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        if self.log_stride == 0 || self.snapshot_stride == 0 {
            return Err(Error::InvalidConfig("strides must be at least 1".into()));
        }
        if !(self.lambda_multiplier > 0.0 && self.lambda_multiplier <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_multiplier must lie in (0, 1], got {}",
                self.lambda_multiplier
            )));
        }
        if let ProblemConfig::LowRankLogistic { d, r, .. } = &self.problem {
            if r > d {
                return Err(Error::InvalidProblem(format!("r = {r} exceeds d = {d}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(json_error_to_schema)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values parse as JSON, falling back to
    /// a bare string; the result is re-validated against the schema.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for s in sets {
            let (key, raw) = parse_assignment(s.as_ref())?;
            set_dotted(&mut v, key, raw)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(v)
            .map_err(|e| Error::InvalidConfig(format!("after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hyperparameters for this config: derived defaults, then the λ
    /// multiplier, then explicit overrides. σ is recalibrated when `T` or
    /// `C` is overridden unless σ itself is.
    pub fn hyperparams(&self, summary: &ProblemSummary) -> Result<HyperParams> {
        let mut hp = derive_params(self.algorithm, summary, &self.budget)?
            .with_lambda_multiplier(self.lambda_multiplier)?;
        let o = &self.overrides;
        if let Some(a) = o.alpha {
            hp.alpha = a;
        }
        if let Some(l) = o.lambda {
            hp.lambda = l;
        }
        let mut recalibrate = false;
        if let Some(t) = o.iterations {
            hp.iterations = t;
            recalibrate = true;
        }
        if let Some(c) = o.clip {
            hp.clip = c;
            recalibrate = true;
        }
        if recalibrate && hp.clip.is_finite() && hp.iterations > 0 {
            hp.recalibrate(summary.n)?;
        }
        if let Some(s) = o.sigma {
            hp.sigma = s;
            hp.sigma_calibrated = false;
        } else if hp.algorithm.is_private() && hp.clip.is_infinite() {
            return Err(Error::InvalidConfig(
                "a private algorithm with C = inf needs an explicit overrides.sigma".into(),
            ));
        }
        hp.validate()?;
        Ok(hp)
    }

    fn run_options(&self) -> RunOptions {
        RunOptions {
            x0: self.x0.clone(),
            log_stride: self.log_stride,
            snapshot_stride: self.snapshot_stride,
            record_wall_time: self.record_wall_time,
        }
    }
}

fn parse_assignment(s: &str) -> Result<(&str, &str)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    // whole sections (`problem={...}`) are allowed too
    let known = CONFIG_KEYS.iter().any(|(k, _)| {
        *k == key || k.strip_prefix(key).is_some_and(|rest| rest.starts_with('.'))
    });
    if !known {
        return Err(Error::InvalidConfig(format!("unknown config key `{key}`")));
    }
    Ok((key, raw.trim()))
}

fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut cur = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "`{key}`: `{part}` is not inside an object"
                )))
            }
        };
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses `key=value` overrides against an untyped config document. Used by
/// fuzzing and by [`ExperimentConfig::with_overrides`].
pub fn apply_overrides_to_json(doc: &str, sets: &[&str]) -> Result<ExperimentConfig> {
    let mut v: Value = serde_json::from_str(doc).map_err(json_error_to_schema)?;
    for s in sets {
        let (key, raw) = parse_assignment(s)?;
        set_dotted(&mut v, key, raw)?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text).map_err(|e| match e {
        Error::Schema { line, message } => Error::InvalidConfig(format!(
            "{}: line {line}: {message}",
            path.display()
        )),
        other => other,
    })
}

/// Aggregate over seeds for one (algorithm, problem) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub d: usize,
    /// Effective rank of the problem's Hessian bound.
    pub r: f64,
    pub n: usize,
    pub eps: f64,
    pub delta: f64,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub iterations: usize,
    pub lambda: f64,
    #[serde(rename = "C", with = "crate::trace::inf_as_null")]
    pub clip: f64,
    pub sigma: f64,
    pub seeds: Vec<u64>,
    pub mean_final_grad_norm_sq: f64,
    pub stderr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
}

/// Mean and standard error of the mean (0 for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// In-memory result of [`execute`].
#[derive(Clone, Debug)]
pub struct Experiment {
    pub hyperparams: HyperParams,
    pub traces: Vec<RunTrace>,
    pub summary: Summary,
}

impl Experiment {
    pub fn final_metrics(&self) -> Vec<f64> {
        self.traces
            .iter()
            .map(|t| t.footer.as_ref().map_or(f64::NAN, |f| f.final_grad_norm_sq))
            .collect()
    }
}

/// Runs every seed of `cfg` without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let problem = cfg.problem.build(cfg.x0.as_deref())?;
    let summary_in: ProblemSummary = (&problem).into();
    let hp = cfg.hyperparams(&summary_in)?;
    execute_with(cfg, &problem, hp)
}

/// Runs every seed on an already-built problem with fixed hyperparameters.
pub fn execute_with(cfg: &ExperimentConfig, problem: &Problem, hp: HyperParams) -> Result<Experiment> {
    let opts = cfg.run_options();
    let traces = cfg
        .seeds
        .iter()
        .map(|&s| run(problem, &hp, &make_rng(s), &opts))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<f64> = traces
        .iter()
        .map(|t| t.footer.as_ref().expect("completed run").final_grad_norm_sq)
        .collect();
    let (mean, stderr) = mean_stderr(&finals);
    let summary = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        algorithm: hp.algorithm,
        d: problem.dim(),
        r: problem.constants().effective_rank,
        n: problem.num_samples(),
        eps: cfg.budget.eps(),
        delta: cfg.budget.delta(),
        alpha: hp.alpha,
        iterations: hp.iterations,
        lambda: hp.lambda,
        clip: hp.clip,
        sigma: hp.sigma,
        seeds: cfg.seeds.clone(),
        mean_final_grad_norm_sq: mean,
        stderr,
        slope: None,
    };
    Ok(Experiment {
        hyperparams: hp,
        traces,
        summary,
    })
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.csv")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn check_writable(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::WouldOverwrite {
            path: path.to_path_buf(),
        });
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes one trace per seed and `summary.json` into `dir`. Nothing is
/// written if any target exists and `force` is false.
pub fn write_experiment(exp: &Experiment, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut paths: Vec<PathBuf> = exp
        .traces
        .iter()
        .map(|t| dir.join(trace_file_name(t.header.seed)))
        .collect();
    paths.push(dir.join("summary.json"));
    for p in &paths {
        check_writable(p, force)?;
    }
    for (t, p) in exp.traces.iter().zip(&paths) {
        write_file(p, &trace_to_csv(t)?)?;
    }
    let summary = serde_json::to_string_pretty(&exp.summary)? + "\n";
    write_file(paths.last().expect("summary path"), &summary)?;
    Ok(paths)
}

/// [`execute`] followed by [`write_experiment`] into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<Experiment> {
    let exp = execute(cfg)?;
    write_experiment(&exp, &cfg.output_dir, force)?;
    Ok(exp)
}

pub fn trace_to_csv(trace: &RunTrace) -> Result<String> {
    let mut out = String::new();
    out.push_str("# header: ");
    out.push_str(&serde_json::to_string(&trace.header)?);
    out.push('\n');
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument {
        name: "trace",
        reason: e.to_string(),
    };
    w.write_record(TRACE_COLUMNS).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &trace.rows {
        w.write_record([
            r.t.to_string(),
            opt(r.loss),
            opt(r.grad_norm_sq),
            r.clip_count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument {
        name: "trace",
        reason: e.to_string(),
    })?;
    out.push_str(std::str::from_utf8(&bytes).expect("csv output is utf-8"));
    if let Some(f) = &trace.footer {
        out.push_str("# footer: ");
        out.push_str(&serde_json::to_string(f)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_trace_csv(trace: &RunTrace, path: &Path, force: bool) -> Result<()> {
    check_writable(path, force)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_file(path, &trace_to_csv(trace)?)
}

fn schema(line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        line: line as u64,
        message: message.into(),
    }
}

fn parse_cell(cell: &str, line: usize, column: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| schema(line, format!("{column}: `{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(schema(line, format!("{column}: non-finite value")));
    }
    Ok(Some(v))
}

/// Parses and checks a trace: schema version, column order, row count
/// `T + 1`, consecutive `t`, stride layout, oracle calls `2nT`, clip total,
/// and σ against the calibration formula (to 1e-12 relative).
pub fn parse_trace_csv(text: &str) -> Result<RunTrace> {
    let mut header: Option<TraceHeader> = None;
    let mut footer: Option<(usize, TraceFooter)> = None;
    let mut rows = Vec::new();
    let mut saw_columns = false;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if let Some(rest) = line.strip_prefix("# header: ") {
            if lineno != 1 {
                return Err(schema(lineno, "header must be the first line"));
            }
            let h: TraceHeader = serde_json::from_str(rest)
                .map_err(|e| schema(lineno, format!("header: {e}")))?;
            if h.schema_version != TRACE_SCHEMA_VERSION {
                return Err(schema(lineno, format!("unsupported schema_version {}", h.schema_version)));
            }
            header = Some(h);
            continue;
        }
        if let Some(rest) = line.strip_prefix("# footer: ") {
            if footer.is_some() {
                return Err(schema(lineno, "duplicate footer"));
            }
            let f: TraceFooter = serde_json::from_str(rest)
                .map_err(|e| schema(lineno, format!("footer: {e}")))?;
            footer = Some((lineno, f));
            continue;
        }
        if header.is_none() {
            return Err(schema(lineno, "missing `# header:` line"));
        }
        if footer.is_some() {
            return Err(schema(lineno, "content after footer"));
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(line.as_bytes());
        let rec = match rdr.records().next() {
            Some(r) => r.map_err(|e| schema(lineno, e.to_string()))?,
            None => return Err(schema(lineno, "empty line")),
        };
        if !saw_columns {
            if rec.iter().ne(TRACE_COLUMNS.iter().copied()) {
                return Err(schema(
                    lineno,
                    format!("expected columns {}", TRACE_COLUMNS.join(",")),
                ));
            }
            saw_columns = true;
            continue;
        }
        if rec.len() != TRACE_COLUMNS.len() {
            return Err(schema(lineno, format!("expected 4 fields, found {}", rec.len())));
        }
        let t: usize = rec[0]
            .parse()
            .map_err(|_| schema(lineno, format!("t: `{}` is not an integer", &rec[0])))?;
        if t != rows.len() {
            return Err(schema(lineno, format!("expected t = {}, found {t}", rows.len())));
        }
        let clip_count: u64 = rec[3]
            .parse()
            .map_err(|_| schema(lineno, format!("clip_count: `{}` is not an integer", &rec[3])))?;
        rows.push((
            lineno,
            TraceRow {
                t,
                loss: parse_cell(&rec[1], lineno, "loss")?,
                grad_norm_sq: parse_cell(&rec[2], lineno, "grad_norm_sq")?,
                clip_count,
            },
        ));
    }

    let last = text.lines().count().max(1);
    let header = header.ok_or_else(|| schema(1, "missing `# header:` line"))?;
    if !saw_columns {
        return Err(schema(last, "missing column line"));
    }
    let (footer_line, footer) = footer.ok_or_else(|| schema(last, "missing `# footer:` line"))?;
    let t_max = header.iterations;
    if rows.len() != t_max + 1 {
        return Err(schema(
            footer_line,
            format!("expected T + 1 = {} rows, found {}", t_max + 1, rows.len()),
        ));
    }
    if header.log_stride == 0 || header.snapshot_stride == 0 {
        return Err(schema(1, "strides must be at least 1"));
    }
    for (lineno, r) in &rows {
        let logged = r.t % header.log_stride == 0 || r.t == t_max;
        if logged != r.loss.is_some() || logged != r.grad_norm_sq.is_some() {
            return Err(schema(*lineno, "logged cells do not match log_stride"));
        }
        if r.t == 0 && r.clip_count != 0 {
            return Err(schema(*lineno, "clip_count at t = 0 must be 0"));
        }
    }
    let rows: Vec<TraceRow> = rows.into_iter().map(|(_, r)| r).collect();

    let expected_calls = 2 * header.n as u64 * t_max as u64;
    if footer.oracle_calls != expected_calls {
        return Err(schema(
            footer_line,
            format!("oracle_calls {} != 2nT = {expected_calls}", footer.oracle_calls),
        ));
    }
    let clip_sum: u64 = rows.iter().map(|r| r.clip_count).sum();
    if footer.clip_total != clip_sum {
        return Err(schema(footer_line, "clip_total does not match the row sum"));
    }
    if footer.tau >= t_max || footer.tau % header.snapshot_stride != 0 {
        return Err(schema(footer_line, format!("tau = {} is not a stored iterate", footer.tau)));
    }
    if header.sigma_calibrated {
        let (Some(eps), Some(delta)) = (header.eps, header.delta) else {
            return Err(schema(1, "calibrated sigma without a budget"));
        };
        let budget = PrivacyBudget::new(eps, delta).map_err(|e| schema(1, e.to_string()))?;
        let expected = noise_scale(header.clip, header.n, t_max, &budget)
            .map_err(|e| schema(1, e.to_string()))?
            .sigma;
        if (header.sigma - expected).abs() > 1e-12 * expected {
            return Err(schema(
                1,
                format!("sigma {} does not match calibrated {expected}", header.sigma),
            ));
        }
    }
    Ok(RunTrace {
        header,
        rows,
        footer: Some(footer),
        snapshots: Vec::new(),
    })
}

pub fn read_trace_csv(path: &Path) -> Result<RunTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace_csv(&text)
}

/// One line of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub d: usize,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSlope {
    pub algorithm: Algorithm,
    /// Least-squares slope of log(mean) against log(d); absent for one `d`.
    pub slope: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub rows: Vec<SweepRow>,
    pub slopes: Vec<SweepSlope>,
}

/// Runs `cfg` at every `d` in `d_list` for each algorithm, each with its own
/// derived hyperparameters (plus any overrides in `cfg`).
pub fn sweep_dimension(
    cfg: &ExperimentConfig,
    d_list: &[usize],
    algorithms: &[Algorithm],
) -> Result<SweepTable> {
    if d_list.is_empty() || algorithms.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one d and one algorithm".into()));
    }
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &alg in algorithms {
        let mut means = Vec::new();
        for &d in d_list {
            let c = ExperimentConfig {
                problem: cfg.problem.with_dim(d)?,
                algorithm: alg,
                x0: None,
                ..cfg.clone()
            };
            let exp = execute(&c)?;
            means.push(exp.summary.mean_final_grad_norm_sq);
            rows.push(SweepRow {
                algorithm: alg,
                d,
                summary: exp.summary,
            });
        }
        let slope = (d_list.len() > 1).then(|| {
            let lx: Vec<f64> = d_list.iter().map(|&d| (d as f64).ln()).collect();
            let ly: Vec<f64> = means.iter().map(|m| m.ln()).collect();
            ls_slope(&lx, &ly)
        });
        for r in rows.iter_mut().filter(|r| r.algorithm == alg) {
            r.summary.slope = slope;
        }
        slopes.push(SweepSlope {
            algorithm: alg,
            slope,
        });
    }
    Ok(SweepTable {
        schema_version: SUMMARY_SCHEMA_VERSION,
        rows,
        slopes,
    })
}

pub fn write_sweep(table: &SweepTable, dir: &Path, force: bool) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join("sweep.json");
    check_writable(&path, force)?;
    write_file(&path, &(serde_json::to_string_pretty(table)? + "\n"))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::avg_grad_norm_sq;

    fn logistic_cfg() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: 1,
            problem: ProblemConfig::LowRankLogistic {
                d: 16,
                r: 3,
                n: 40,
                seed: 7,
                feature_scale: 1.0,
                label_flip: 0.1,
            },
            algorithm: Algorithm::DpZero,
            budget: PrivacyBudget::new(2.0, 1e-5).unwrap(),
            overrides: Overrides {
                iterations: Some(12),
                ..Default::default()
            },
            lambda_multiplier: 1.0,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("out"),
            log_stride: 1,
            snapshot_stride: 1,
            x0: None,
            record_wall_time: false,
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = logistic_cfg();
        let back = ExperimentConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_defaults_apply() {
        let text = r#"{"schema_version":1,
            "problem":{"family":"low_rank_logistic","d":8,"r":2,"n":10,"seed":1},
            "algorithm":"dpzero","budget":{"eps":2,"delta":1e-5},
            "seeds":[1],"output_dir":"o"}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.log_stride, 1);
        assert_eq!(cfg.lambda_multiplier, 1.0);
        assert_eq!(cfg.overrides, Overrides::default());
    }

    #[test]
    fn config_rejects_unknown_fields_with_line() {
        let text = "{\"schema_version\":1,\n\"bogus\":3}";
        match ExperimentConfig::from_json(text) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_rejects_empty_seeds_and_bad_rank() {
        let mut cfg = logistic_cfg();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let err = logistic_cfg().with_overrides(&["problem.r=20"]).unwrap_err();
        assert!(err.is_usage_error());
    }

    #[test]
    fn dotted_overrides() {
        let cfg = logistic_cfg()
            .with_overrides(&["budget.eps=4", "overrides.C=inf", "overrides.sigma=0", "seeds=[9]"])
            .unwrap();
        assert_eq!(cfg.budget.eps(), 4.0);
        assert_eq!(cfg.overrides.clip, Some(f64::INFINITY));
        assert_eq!(cfg.seeds, vec![9]);
        let back = ExperimentConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reject_unknown_and_mistyped() {
        assert!(logistic_cfg().with_overrides(&["budget.epsilon=1"]).is_err());
        assert!(logistic_cfg().with_overrides(&["budget.eps=abc"]).is_err());
        assert!(logistic_cfg().with_overrides(&["budget.delta=1"]).is_err());
        assert!(logistic_cfg().with_overrides(&["noequals"]).is_err());
    }

    #[test]
    fn overriding_t_recalibrates_sigma() {
        let cfg = logistic_cfg();
        let p = cfg.problem.build(None).unwrap();
        let hp = cfg.hyperparams(&(&p).into()).unwrap();
        let expected = noise_scale(hp.clip, 40, 12, &cfg.budget).unwrap().sigma;
        assert_eq!(hp.sigma, expected);
        assert!(hp.sigma_calibrated);

        let cfg = cfg.with_overrides(&["overrides.sigma=0.5"]).unwrap();
        let hp = cfg.hyperparams(&(&p).into()).unwrap();
        assert_eq!(hp.sigma, 0.5);
        assert!(!hp.sigma_calibrated);
    }

    #[test]
    fn private_without_clip_needs_sigma() {
        let cfg = logistic_cfg().with_overrides(&["overrides.C=inf"]).unwrap();
        let p = cfg.problem.build(None).unwrap();
        assert!(cfg.hyperparams(&(&p).into()).is_err());
    }

    #[test]
    fn constants_family_derives_only() {
        let cfg = logistic_cfg()
            .with_overrides(&[
                r#"problem={"family":"constants","d":1024,"n":1000,"lipschitz":1,"smoothness":1,"effective_rank":4}"#,
            ])
            .unwrap();
        let s = cfg.problem.summary(None).unwrap();
        let mut c = cfg.clone();
        c.overrides = Overrides::default();
        let hp = c.hyperparams(&s).unwrap();
        assert_eq!(hp.iterations, 429);
        assert!(execute(&cfg).is_err());
    }

    #[test]
    fn single_zero_step_summary_is_initial_gradient() {
        let cfg = logistic_cfg()
            .with_overrides(&["overrides.T=1", "overrides.alpha=0", "seeds=[5]"])
            .unwrap();
        let exp = execute(&cfg).unwrap();
        let p = cfg.problem.build(None).unwrap();
        let g0 = avg_grad_norm_sq(&p, &vec![0.0; p.dim()]);
        assert_eq!(exp.summary.mean_final_grad_norm_sq, g0);
        assert_eq!(exp.summary.stderr, 0.0);
    }

    #[test]
    fn summary_mean_matches_per_seed() {
        let exp = execute(&logistic_cfg()).unwrap();
        let finals = exp.final_metrics();
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        assert!((exp.summary.mean_final_grad_norm_sq - mean).abs() <= 1e-12 * mean.abs());
        assert_eq!(exp.summary.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn mean_stderr_known_values() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = logistic_cfg().with_overrides(&["log_stride=5", "snapshot_stride=2"]).unwrap();
        let exp = execute(&cfg).unwrap();
        for t in &exp.traces {
            let text = trace_to_csv(t).unwrap();
            let back = parse_trace_csv(&text).unwrap();
            assert_eq!(back.header, t.header);
            assert_eq!(back.rows, t.rows);
            assert_eq!(back.footer, t.footer);
            assert_eq!(trace_to_csv(&back).unwrap(), text);
        }
    }

    fn sample_csv() -> String {
        let exp = execute(&logistic_cfg()).unwrap();
        trace_to_csv(&exp.traces[0]).unwrap()
    }

    #[test]
    fn csv_rejects_missing_row() {
        let text = sample_csv();
        let lines: Vec<&str> = text.lines().collect();
        let mut cut: Vec<&str> = lines[..lines.len() - 2].to_vec();
        cut.push(lines[lines.len() - 1]);
        match parse_trace_csv(&(cut.join("\n") + "\n")) {
            Err(Error::Schema { line, message }) => {
                assert!(message.contains("rows"), "{message}");
                assert_eq!(line as usize, cut.len());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_rejects_tampered_sigma() {
        let text = sample_csv();
        let exp = execute(&logistic_cfg()).unwrap();
        let s = exp.traces[0].header.sigma;
        let tampered = text.replacen(&format!("\"sigma\":{s}"), &format!("\"sigma\":{}", s * 1.001), 1);
        assert_ne!(tampered, text);
        assert!(matches!(parse_trace_csv(&tampered), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn csv_rejects_bad_cells_and_columns() {
        let text = sample_csv();
        let bad = text.replacen("t,loss,grad_norm_sq,clip_count", "t,grad_norm_sq,loss,clip_count", 1);
        assert!(matches!(parse_trace_csv(&bad), Err(Error::Schema { line: 2, .. })));
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = "1,abc,0.1,0".into();
        let err = parse_trace_csv(&lines.join("\n")).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 4, .. }), "{err:?}");
        assert!(parse_trace_csv("").is_err());
    }

    #[test]
    fn files_are_not_overwritten_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = logistic_cfg();
        cfg.output_dir = dir.path().join("nested/out");
        run_experiment(&cfg, false).unwrap();
        let before = fs::read(cfg.output_dir.join("summary.json")).unwrap();
        assert!(matches!(run_experiment(&cfg, false), Err(Error::WouldOverwrite { .. })));
        run_experiment(&cfg, true).unwrap();
        assert_eq!(fs::read(cfg.output_dir.join("summary.json")).unwrap(), before);
        let t = read_trace_csv(&cfg.output_dir.join(trace_file_name(2))).unwrap();
        assert_eq!(t.header.seed, 2);
    }

    #[test]
    fn summary_json_keys() {
        let exp = execute(&logistic_cfg()).unwrap();
        let v = serde_json::to_value(&exp.summary).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        keys.sort();
        let mut expected = vec![
            "algorithm", "d", "r", "n", "eps", "delta", "alpha", "T", "lambda", "C", "sigma",
            "seeds", "mean_final_grad_norm_sq", "stderr", "schema_version",
        ];
        expected.sort();
        assert_eq!(keys, expected);
    }

    #[test]
    fn sweep_single_dimension_has_one_row_per_algorithm() {
        let table = sweep_dimension(&logistic_cfg(), &[16], &[Algorithm::DpZero]).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.slopes[0].slope, None);
    }

    #[test]
    fn sweep_without_noise_matches_across_algorithms() {
        let cfg = logistic_cfg()
            .with_overrides(&[
                "overrides.sigma=0",
                "overrides.C=inf",
                "overrides.alpha=0.5",
                "overrides.lambda=0.001",
            ])
            .unwrap();
        let t = sweep_dimension(&cfg, &[16], &[Algorithm::Alg1, Algorithm::DpZero, Algorithm::ZoGd])
            .unwrap();
        let m: Vec<f64> = t.rows.iter().map(|r| r.summary.mean_final_grad_norm_sq).collect();
        assert_eq!(m[0].to_bits(), m[1].to_bits());
        assert_eq!(m[1].to_bits(), m[2].to_bits());
    }

    #[test]
    fn quadratic_region_follows_x0() {
        let pc = ProblemConfig::SpectrumQuadratic {
            d: 4,
            n: 3,
            seed: 1,
            spectrum: SpectrumConfig::Harmonic {
                harmonic: HarmonicSpectrum { top: 1.0, len: 4 },
            },
            region_radius: None,
        };
        let a = pc.build(None).unwrap().region_radius().unwrap();
        let b = pc.build(Some(&[3.0, 4.0, 0.0, 0.0])).unwrap().region_radius().unwrap();
        assert!((b - a - 10.0).abs() < 1e-12);
        let q = pc.build(None).unwrap();
        assert_eq!(q.num_samples(), 3);
    }

    #[test]
    fn override_helper_matches_method() {
        let cfg = logistic_cfg();
        let json = serde_json::to_string(&cfg).unwrap();
        let a = apply_overrides_to_json(&json, &["budget.eps=3"]).unwrap();
        let b = cfg.with_overrides(&["budget.eps=3"]).unwrap();
        assert_eq!(a, b);
    }
}
