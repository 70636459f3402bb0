//! Per-run record: a header echoing every parameter, one row per iterate,
//! and a footer with the output-iterate metrics.

use serde::{Deserialize, Serialize};

use crate::optimizers::Algorithm;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// `f64` that serializes `+∞` as JSON `null`.
pub(crate) mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub iterations: usize,
    pub lambda: f64,
    #[serde(rename = "C", with = "inf_as_null")]
    pub clip: f64,
    pub sigma: f64,
    /// `2C/n`, absent when `C` is infinite.
    pub sensitivity: Option<f64>,
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    /// False when σ was set by hand instead of calibrated from (C, n, T, ε, δ).
    pub sigma_calibrated: bool,
    pub lipschitz: f64,
    pub smoothness: f64,
    pub effective_rank: f64,
    pub problem_family: String,
    pub problem_fingerprint: String,
    pub region_radius: Option<f64>,
    pub log_stride: usize,
    pub snapshot_stride: usize,
    /// Loss and gradient columns are non-private diagnostics.
    pub diagnostics_private: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub loss: Option<f64>,
    pub grad_norm_sq: Option<f64>,
    /// Clip events in the step that produced `x_t` (0 for `t = 0`).
    pub clip_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFooter {
    pub tau: usize,
    pub final_grad_norm_sq: f64,
    pub final_loss: f64,
    pub oracle_calls: u64,
    pub clip_total: u64,
    pub max_iterate_norm: f64,
    /// Iterates left the region where the reported `L` holds.
    pub left_region: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub rows: Vec<TraceRow>,
    pub footer: Option<TraceFooter>,
    /// Stored iterates `(t, x_t)`, `t < T`, every `snapshot_stride` steps.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl RunTrace {
    pub fn clip_total(&self) -> u64 {
        self.rows.iter().map(|r| r.clip_count).sum()
    }
}
