//! Diagnostic computations over runs: update-alignment cosines, coefficient
//! statistics, the in-domain/out-of-domain gradient-alignment measure, the
//! final-accuracy metric, and the line-delimited metrics schema.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::merge::SearchTrace;
use crate::nn::ParamVector;

/// Cosine similarity of two same-length slices; errors on zero vectors.
pub fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "cosine of lengths {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (mut uu, mut vv, mut uv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uu += a * a;
        vv += b * b;
        uv += a * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(CoreError::InvalidArgument(
            "cosine of a zero vector".into(),
        ));
    }
    Ok((uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine similarity of two parameter vectors.
pub fn cosine(u: &ParamVector, v: &ParamVector) -> Result<f64> {
    cosine_slices(u.as_slice(), v.as_slice())
}

/// The dataset-size-weighted average of client updates, i.e. the reference
/// direction individual updates are compared against.
pub fn true_update(deltas: &[ParamVector], sizes: &[usize]) -> Result<ParamVector> {
    if deltas.is_empty() {
        return Err(CoreError::InvalidArgument("no updates".into()));
    }
    if deltas.len() != sizes.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} deltas vs {} sizes",
            deltas.len(),
            sizes.len()
        )));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(CoreError::InvalidArgument("client sizes must be positive".into()));
    }
    let total: usize = sizes.iter().sum();
    let mut out = ParamVector::zeros(deltas[0].spec().clone());
    for (delta, &n) in deltas.iter().zip(sizes) {
        out.add_scaled(delta, n as f64 / total as f64)?;
    }
    Ok(out)
}

/// Mean / min / max of per-client cosines against the true update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-client cosine similarity against the size-weighted true update.
pub fn update_alignment_stats(deltas: &[ParamVector], sizes: &[usize]) -> Result<AlignmentStats> {
    if deltas.len() < 2 {
        return Err(CoreError::InvalidArgument(
            "alignment needs at least two updates".into(),
        ));
    }
    let reference = true_update(deltas, sizes)?;
    if reference.norm() == 0.0 {
        return Err(CoreError::InvalidArgument(
            "true update is the zero vector".into(),
        ));
    }
    let mut mean = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for delta in deltas {
        let c = cosine(delta, &reference)?;
        mean += c;
        min = min.min(c);
        max = max.max(c);
    }
    mean /= deltas.len() as f64;
    Ok(AlignmentStats { mean, min, max })
}

/// Descriptive statistics of one searched coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub fraction_negative: f64,
}

pub fn coefficient_stats(coefficients: &[f64]) -> Result<CoefficientStats> {
    if coefficients.is_empty() {
        return Err(CoreError::InvalidArgument("no coefficients".into()));
    }
    let n = coefficients.len() as f64;
    let mean = coefficients.iter().sum::<f64>() / n;
    let min = coefficients.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = coefficients.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let fraction_negative = coefficients.iter().filter(|&&c| c < 0.0).count() as f64 / n;
    Ok(CoefficientStats {
        mean,
        min,
        max,
        fraction_negative,
    })
}

/// Cosine between the coefficient gradients induced by in-domain and
/// out-of-domain data at the same coefficients. A zero gradient makes the
/// measure undefined, which is recorded as missing rather than an error.
pub fn id_ood_alignment(grad_id: &[f64], grad_ood: &[f64]) -> Result<Option<f64>> {
    if grad_id.len() != grad_ood.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "gradient lengths {} vs {}",
            grad_id.len(),
            grad_ood.len()
        )));
    }
    match cosine_slices(grad_id, grad_ood) {
        Ok(c) => Ok(Some(c)),
        Err(CoreError::InvalidArgument(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Final model performance: the maximum accuracy over the last (up to) five
/// evaluation rounds.
pub fn final_metric(accuracy_series: &[(usize, f64)]) -> Result<f64> {
    if accuracy_series.is_empty() {
        return Err(CoreError::InvalidArgument("no evaluations".into()));
    }
    let window = accuracy_series.len().min(5);
    Ok(accuracy_series[accuracy_series.len() - window..]
        .iter()
        .map(|&(_, acc)| acc)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Cosine between true updates `lag` rounds apart. Entry `k` compares round
/// `k` with round `k - lag`; missing or zero-norm entries yield `None`.
pub fn lagged_true_update_cosines(
    updates: &[Option<ParamVector>],
    lag: usize,
) -> Vec<Option<f64>> {
    let mut out = vec![None; updates.len()];
    if lag == 0 {
        return out;
    }
    for k in lag..updates.len() {
        if let (Some(a), Some(b)) = (&updates[k], &updates[k - lag]) {
            out[k] = cosine(a, b).ok();
        }
    }
    out
}

/// Per-round staleness digest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StalenessSummary {
    pub count: usize,
    pub mean: f64,
    pub max: u64,
}

impl StalenessSummary {
    pub fn from_values(staleness: &[u64]) -> Option<Self> {
        if staleness.is_empty() {
            return None;
        }
        Some(Self {
            count: staleness.len(),
            mean: staleness.iter().sum::<u64>() as f64 / staleness.len() as f64,
            max: *staleness.iter().max().expect("nonempty"),
        })
    }
}

/// Lag-labelled cosine between true updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagCosine {
    pub lag: usize,
    pub cosine: f64,
}

/// One per-round diagnostics row. Optional fields stay absent when the
/// aggregator or the round does not produce them; the schema itself is
/// append-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub round: usize,
    pub aggregator: String,
    pub arrivals: usize,
    /// Late updates a synchronous aggregator dropped this round.
    pub discarded: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coefficients: Option<CoefficientStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub update_alignment: Option<AlignmentStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lag_cosines: Option<Vec<LagCosine>>,
    /// Inner product between the surrogate and task coefficient gradients.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alignment_inner: Option<f64>,
    /// Cosine form of the same alignment measure.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub id_ood_cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub staleness: Option<StalenessSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub search: Option<SearchTrace>,
    /// Cumulative floating-point-operation proxies for cost accounting.
    pub client_flops: f64,
    pub server_flops: f64,
}

/// End-of-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub aggregator: String,
    pub rounds: usize,
    pub final_metric: Option<f64>,
    pub accuracy_series: Vec<(usize, f64)>,
    pub total_arrivals: usize,
    pub total_discarded: usize,
    /// Updates still in flight when the run stopped.
    pub undelivered: usize,
    pub max_staleness: u64,
    pub client_flops: f64,
    pub server_flops: f64,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsLine {
    Round(MetricsRecord),
    Summary(RunSummary),
}

/// Renders metrics lines as line-delimited JSON.
pub fn metrics_to_jsonl(lines: &[MetricsLine]) -> String {
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(line).expect("metrics are serializable"));
        out.push('\n');
    }
    out
}

/// Parses a metrics stream produced by [`metrics_to_jsonl`].
pub fn metrics_from_jsonl(text: &str) -> Result<Vec<MetricsLine>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(line).map_err(|e| {
            CoreError::MalformedMetrics(format!("line {}: {e}", line_no + 1))
        })?;
        out.push(parsed);
    }
    Ok(out)
}

/// Accuracy series extracted from a metrics stream.
pub fn accuracy_series(lines: &[MetricsLine]) -> Vec<(usize, f64)> {
    lines
        .iter()
        .filter_map(|line| match line {
            MetricsLine::Round(r) => r.test_accuracy.map(|acc| (r.round, acc)),
            MetricsLine::Summary(_) => None,
        })
        .collect()
}
