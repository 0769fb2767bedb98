//! Aggregation strategies: data-guided merging-coefficient search over the
//! atlas (in-domain and out-of-domain variants), the FedBuff-style fallback
//! mechanism, and the classical baselines FedAvg / FedAsync / FedBuff plus
//! server-side fine-tuning.
//!
//! The search treats anchors as constants: the gradient of the objective with
//! respect to coefficient `m` is the inner product of the model-space
//! gradient at the composed point with anchor `m`, so no differentiation ever
//! flows through the anchor store.

use ndarray::s;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::atlas::Atlas;
use crate::error::{CoreError, Result};
use crate::nn::{self, Batch, ParamVector, TrainConfig};
use crate::rng::stream_rng;

/// Signed merging coefficients, one per atlas anchor. Negative values are
/// deliberate: an anchor pointing against the descent direction earns a
/// negative weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector(Vec<f64>);

impl CoefficientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("coefficient vector".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Server-side step size: an explicit value, or an inverse-smoothness bound
/// computed from the anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServerLr {
    Fixed(f64),
    Auto,
}

impl Serialize for ServerLr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ServerLr::Fixed(v) => serializer.serialize_f64(*v),
            ServerLr::Auto => serializer.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for ServerLr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Ok(ServerLr::Fixed(v)),
            Raw::Text(s) if s == "auto" => Ok(ServerLr::Auto),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "server_lr must be a number or \"auto\", got {s:?}"
            ))),
        }
    }
}

/// Hyperparameters of one coefficient search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub server_lr: ServerLr,
    pub steps: usize,
    pub fallback_lambda: f64,
    pub fallback_init: bool,
    pub server_batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Estimate of the loss smoothness constant used by the "auto" step size.
    pub smoothness_estimate: f64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::InvalidConfig("search steps must be >= 1".into()));
        }
        if !(self.fallback_lambda >= 0.0) || !self.fallback_lambda.is_finite() {
            return Err(CoreError::InvalidConfig(
                "fallback_lambda must be finite and >= 0".into(),
            ));
        }
        if self.server_batch_size == 0 {
            return Err(CoreError::InvalidConfig(
                "server_batch_size must be positive".into(),
            ));
        }
        if !(self.smoothness_estimate > 0.0) || !self.smoothness_estimate.is_finite() {
            return Err(CoreError::InvalidConfig(
                "smoothness_estimate must be positive".into(),
            ));
        }
        if let ServerLr::Fixed(v) = self.server_lr {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CoreError::InvalidConfig(
                    "server_lr must be positive or \"auto\"".into(),
                ));
            }
        }
        Ok(())
    }

    /// The per-step learning rate. The auto rule is the inverse smoothness
    /// bound of the regularized objective: the data term is at most
    /// `L * sum_m ||a_m||^2`-smooth in the coefficients and the quadratic
    /// regularizer adds exactly `lambda`.
    fn effective_lr(&self, anchor_sq_sum: f64) -> f64 {
        match self.server_lr {
            ServerLr::Fixed(v) => v,
            ServerLr::Auto => {
                1.0 / (self.smoothness_estimate * anchor_sq_sum + self.fallback_lambda)
                    .max(f64::MIN_POSITIVE)
            }
        }
    }
}

/// Record of one coefficient search, appended to the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub initial: Vec<f64>,
    /// Regularized objective value observed before each step.
    pub objective: Vec<f64>,
    pub final_coefficients: Vec<f64>,
}

/// A freshly trained linear classifier head for the surrogate objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateHead {
    pub theta: ParamVector,
    pub trained: bool,
}

/// Reshuffling mini-batch cursor over a fixed dataset.
struct MiniBatcher {
    order: Vec<usize>,
    position: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl MiniBatcher {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            position: n, // force a shuffle on the first draw
            batch_size,
            rng: stream_rng(seed, "server-batches", &[]),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.position >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.position = 0;
        }
        let end = (self.position + self.batch_size).min(self.order.len());
        let chunk = self.order[self.position..end].to_vec();
        self.position = end;
        chunk
    }
}

/// `omega + sum_m c_m * anchors_m`.
fn compose(omega: &ParamVector, anchors: &[ParamVector], coefficients: &[f64]) -> Result<ParamVector> {
    let mut out = omega.clone();
    for (anchor, &c) in anchors.iter().zip(coefficients) {
        out.add_scaled(anchor, c)?;
    }
    Ok(out)
}

/// Coefficient gradient by projection: entry `m` is the inner product of the
/// model-space gradient with anchor `m`. Anchors act as constants.
pub fn coeff_grad(model_grad: &ParamVector, anchors: &[ParamVector]) -> Result<Vec<f64>> {
    anchors.iter().map(|a| model_grad.dot(a)).collect()
}

/// Plain gradient descent on the coefficients of a composed objective.
fn run_search<F>(
    init: &[f64],
    reference: &[f64],
    lambda: f64,
    lr: f64,
    steps: usize,
    mut data_loss_grad: F,
) -> Result<(Vec<f64>, SearchTrace)>
where
    F: FnMut(&[f64], usize) -> Result<(f64, Vec<f64>)>,
{
    let mut c = init.to_vec();
    let mut objective = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, mut grad) = data_loss_grad(&c, step)?;
        let mut regularizer = 0.0;
        for m in 0..c.len() {
            let diff = c[m] - reference[m];
            regularizer += 0.5 * lambda * diff * diff;
            grad[m] += lambda * diff;
        }
        objective.push(loss + regularizer);
        for m in 0..c.len() {
            c[m] -= lr * grad[m];
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "coefficient search diverged at step {step}"
            )));
        }
    }
    let trace = SearchTrace {
        initial: init.to_vec(),
        objective,
        final_coefficients: c.clone(),
    };
    Ok((c, trace))
}

fn resolve_fallback(
    anchors: usize,
    cfg: &SearchConfig,
    fallback: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(f) = fallback {
        if f.len() != anchors {
            return Err(CoreError::ShapeMismatch(format!(
                "{} fallback coefficients for {} anchors",
                f.len(),
                anchors
            )));
        }
    }
    let reference = fallback.map_or_else(|| vec![0.0; anchors], <[f64]>::to_vec);
    let init = if cfg.fallback_init {
        reference.clone()
    } else {
        vec![0.0; anchors]
    };
    Ok((init, reference))
}

/// Coefficient search against an arbitrary model-space objective; the
/// objective sees the fully composed parameter vector each step.
///
/// This is the generic engine behind [`search_coefficients_id`]; tests drive
/// it with closed-form objectives.
pub fn search_with_objective<F>(
    omega: &ParamVector,
    anchors: &[ParamVector],
    cfg: &SearchConfig,
    fallback: Option<&[f64]>,
    mut loss_grad: F,
) -> Result<(CoefficientVector, SearchTrace)>
where
    F: FnMut(&ParamVector, usize) -> Result<(f64, ParamVector)>,
{
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(CoreError::EmptyAtlas);
    }
    let (init, reference) = resolve_fallback(anchors.len(), cfg, fallback)?;
    let anchor_sq_sum: f64 = anchors.iter().map(|a| a.dot(a).expect("same shape")).sum();
    let lr = cfg.effective_lr(anchor_sq_sum);
    let (c, trace) = run_search(
        &init,
        &reference,
        cfg.fallback_lambda,
        lr,
        cfg.steps,
        |c, step| {
            let composed = compose(omega, anchors, c)?;
            let (loss, grad) = loss_grad(&composed, step)?;
            Ok((loss, coeff_grad(&grad, anchors)?))
        },
    )?;
    Ok((CoefficientVector::new(c)?, trace))
}

/// Direct search on the task loss over in-domain server data: `steps`
/// mini-batch gradient steps on the coefficients, reshuffling each epoch.
pub fn search_coefficients_id(
    omega: &ParamVector,
    atlas: &Atlas,
    server_data: &Batch,
    cfg: &SearchConfig,
    fallback: Option<&[f64]>,
) -> Result<(CoefficientVector, SearchTrace)> {
    if server_data.is_empty() {
        return Err(CoreError::InvalidArgument("empty server dataset".into()));
    }
    let anchors = atlas.normalize_anchors()?;
    let mut batcher = MiniBatcher::new(server_data.len(), cfg.server_batch_size, cfg.seed);
    search_with_objective(omega, &anchors, cfg, fallback, |composed, _| {
        let rows = batcher.next();
        let minibatch = server_data.select(&rows);
        nn::loss_and_grad(composed, &minibatch)
    })
}

/// Applies searched coefficients to the full (body and head) anchors.
pub fn apply_update(
    omega: &ParamVector,
    anchors: &[ParamVector],
    coefficients: &CoefficientVector,
) -> Result<ParamVector> {
    if anchors.len() != coefficients.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} coefficients for {} anchors",
            coefficients.len(),
            anchors.len()
        )));
    }
    compose(omega, anchors, coefficients.as_slice())
}

/// Coefficients that make `apply_update` over normalized anchors reproduce
/// the FedBuff step `omega + (eta_g / n) * sum(delta)` over the newly arrived
/// anchors: the normalization is undone by weighting each new anchor with its
/// own norm over the median.
pub fn fallback_init(
    atlas: &Atlas,
    new_anchor_ids: &BTreeSet<u64>,
    eta_g: f64,
    median_norm: f64,
) -> Result<Vec<f64>> {
    if new_anchor_ids.is_empty() {
        return Err(CoreError::FallbackUndefined);
    }
    if !(median_norm > 0.0) || !median_norm.is_finite() {
        return Err(CoreError::InvalidArgument(
            "median norm must be positive".into(),
        ));
    }
    if !eta_g.is_finite() {
        return Err(CoreError::InvalidArgument("eta_g must be finite".into()));
    }
    for id in new_anchor_ids {
        if !atlas.contains_id(*id) {
            return Err(CoreError::InvalidArgument(format!(
                "new anchor id {id} not present in the atlas"
            )));
        }
    }
    let n = new_anchor_ids.len() as f64;
    Ok(atlas
        .entries()
        .iter()
        .map(|a| {
            if new_anchor_ids.contains(&a.id) {
                (eta_g / n) * (a.norm / median_norm)
            } else {
                0.0
            }
        })
        .collect())
}

/// Trains a fresh linear head on the frozen body's representations of the
/// out-of-domain data.
pub fn train_surrogate_head(
    model: &ParamVector,
    ood_data: &Batch,
    cfg: &TrainConfig,
) -> Result<SurrogateHead> {
    if ood_data.is_empty() {
        return Err(CoreError::InvalidArgument("empty surrogate dataset".into()));
    }
    let classes = ood_data.num_classes();
    if classes < 2 {
        return Err(CoreError::InvalidArgument(
            "surrogate data needs at least two classes".into(),
        ));
    }
    let representations = nn::body_forward(model, ood_data.features())?;
    let rep_batch = Batch::new(representations, ood_data.labels().to_vec())?;
    let head_spec = nn::ModelSpec::new(
        vec![model.spec().rep_dim(), classes],
        model.spec().activation(),
    )?;
    let init = nn::init_params(&head_spec, cfg.rng_seed);
    let delta = nn::local_train(&init, &rep_batch, cfg)?;
    let mut theta = init;
    theta.add_scaled(&delta, 1.0)?;
    Ok(SurrogateHead {
        theta,
        trained: cfg.epochs > 0,
    })
}

/// Surrogate-loss coefficient search with an already-trained head: gradient
/// steps see only the body slices of the anchors (head slices carry zero
/// projection weight), while the returned coefficients are meant for the full
/// anchors via [`apply_update`].
pub fn search_coefficients_ood_with_head(
    omega: &ParamVector,
    atlas: &Atlas,
    ood_data: &Batch,
    cfg: &SearchConfig,
    head: &SurrogateHead,
    fallback: Option<&[f64]>,
) -> Result<(CoefficientVector, SearchTrace)> {
    let fallback = fallback.ok_or(CoreError::FallbackMissing)?;
    cfg.validate()?;
    if ood_data.is_empty() {
        return Err(CoreError::InvalidArgument("empty server dataset".into()));
    }
    let anchors = atlas.normalize_anchors()?;
    let (init, reference) = resolve_fallback(anchors.len(), cfg, Some(fallback))?;

    let head_classes = head.theta.spec().num_classes();
    let surrogate_base = nn::replace_head(
        omega,
        (omega.spec().rep_dim(), head_classes),
        head.theta.as_slice(),
    )?;
    let body_len = omega.spec().head_split();
    let anchor_sq_sum: f64 = anchors
        .iter()
        .map(|a| a.body_slice().dot(&a.body_slice()))
        .sum();
    let lr = cfg.effective_lr(anchor_sq_sum);
    let mut batcher = MiniBatcher::new(ood_data.len(), cfg.server_batch_size, cfg.seed);

    let (c, trace) = run_search(
        &init,
        &reference,
        cfg.fallback_lambda,
        lr,
        cfg.steps,
        |c, _| {
            let mut composed = surrogate_base.clone();
            for (anchor, &cm) in anchors.iter().zip(c) {
                let mut body = composed.values_mut().slice_mut(s![..body_len]);
                body.scaled_add(cm, &anchor.values().slice(s![..body_len]));
            }
            let rows = batcher.next();
            let minibatch = ood_data.select(&rows);
            let (loss, grad) = nn::loss_and_grad(&composed, &minibatch)?;
            let projected = anchors
                .iter()
                .map(|a| grad.body_slice().dot(&a.body_slice()))
                .collect();
            Ok((loss, projected))
        },
    )?;
    Ok((CoefficientVector::new(c)?, trace))
}

/// Full out-of-domain search: train the surrogate head at the fallback
/// candidate, then run the coefficient steps against it. Fallback
/// coefficients are a hard requirement in this mode.
pub fn search_coefficients_ood(
    omega: &ParamVector,
    atlas: &Atlas,
    ood_data: &Batch,
    cfg: &SearchConfig,
    head_cfg: &TrainConfig,
    fallback: Option<&[f64]>,
) -> Result<(CoefficientVector, SurrogateHead, SearchTrace)> {
    let fallback = fallback.ok_or(CoreError::FallbackMissing)?;
    cfg.validate()?;
    let anchors = atlas.normalize_anchors()?;
    let (init, _) = resolve_fallback(anchors.len(), cfg, Some(fallback))?;
    let candidate = compose(omega, &anchors, &init)?;
    let head = train_surrogate_head(&candidate, ood_data, head_cfg)?;
    let (c, trace) =
        search_coefficients_ood_with_head(omega, atlas, ood_data, cfg, &head, Some(fallback))?;
    Ok((c, head, trace))
}

/// Dataset-size-weighted averaging of client deltas.
pub fn fedavg_merge(
    deltas: &[ParamVector],
    sizes: &[usize],
    omega: &ParamVector,
) -> Result<ParamVector> {
    if deltas.is_empty() {
        return Err(CoreError::InvalidArgument("no updates to merge".into()));
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
    let mut out = omega.clone();
    for (delta, &n) in deltas.iter().zip(sizes) {
        out.add_scaled(delta, n as f64 / total as f64)?;
    }
    Ok(out)
}

/// Staleness-discounted interpolation toward a client model:
/// `alpha_t = alpha * (staleness + 1)^(-adaptivity)`.
pub fn fedasync_merge(
    omega: &ParamVector,
    omega_client: &ParamVector,
    staleness: u64,
    alpha: f64,
    adaptivity: f64,
) -> Result<ParamVector> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CoreError::InvalidArgument(
            "mixing constant must lie in (0, 1]".into(),
        ));
    }
    if !(adaptivity >= 0.0) || !adaptivity.is_finite() {
        return Err(CoreError::InvalidArgument(
            "adaptivity must be finite and >= 0".into(),
        ));
    }
    let alpha_t = alpha * ((staleness + 1) as f64).powf(-adaptivity);
    let mut out = omega.clone();
    out.scale(1.0 - alpha_t);
    out.add_scaled(omega_client, alpha_t)?;
    Ok(out)
}

/// Buffered mean step: `omega + (eta_g / n) * sum(delta)`.
pub fn fedbuff_merge(
    omega: &ParamVector,
    buffered_deltas: &[ParamVector],
    eta_g: f64,
) -> Result<ParamVector> {
    if buffered_deltas.is_empty() {
        return Err(CoreError::InvalidArgument("empty buffer".into()));
    }
    let weight = eta_g / buffered_deltas.len() as f64;
    let mut out = omega.clone();
    for delta in buffered_deltas {
        out.add_scaled(delta, weight)?;
    }
    Ok(out)
}

/// Fine-tunes the model on server-side data and returns the updated
/// parameters (not a delta). Serves both the per-round fine-tuning baseline
/// and the purely centralized one.
pub fn server_finetune(
    omega: &ParamVector,
    server_data: &Batch,
    cfg: &TrainConfig,
) -> Result<ParamVector> {
    let delta = nn::local_train(omega, server_data, cfg)?;
    let mut out = omega.clone();
    out.add_scaled(&delta, 1.0)?;
    Ok(out)
}
