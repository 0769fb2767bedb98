//! Event-driven asynchronous federated-learning orchestration: client
//! sampling, delay-scheduled update delivery, atlas maintenance, and
//! per-round global-model production for any aggregator.
//!
//! Every stochastic choice is drawn from a named counter-based stream of the
//! master seed (see [`crate::rng`]), so swapping the aggregator cannot
//! perturb the environment: client sampling, delays, and data stay identical
//! across methods under the same seed.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, AlignmentStats, LagCosine, MetricsLine, MetricsRecord, RunSummary, StalenessSummary,
};
use crate::atlas::{AnchorMeta, Atlas, AtlasSnapshotRecord};
use crate::datagen::{
    dirichlet_partition, inject_label_noise, make_blobs, make_ood_dataset, sample_delay,
    DelayModel, NoiseSpec, SyntheticTaskSpec,
};
use crate::error::{CoreError, Result};
use crate::merge::{
    self, CoefficientVector, SearchConfig, SearchTrace, ServerLr, SurrogateHead,
};
use crate::nn::{self, Activation, Batch, ModelSpec, ParamVector, TrainConfig};
use crate::rng::{stream_rng, stream_seed};

/// Server-side aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    FeddleId,
    FeddleOod,
    Fedavg,
    Fedasync,
    Fedbuff,
    FedFt,
    Center,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::FeddleId => "feddle_id",
            Aggregator::FeddleOod => "feddle_ood",
            Aggregator::Fedavg => "fedavg",
            Aggregator::Fedasync => "fedasync",
            Aggregator::Fedbuff => "fedbuff",
            Aggregator::FedFt => "fed_ft",
            Aggregator::Center => "center",
        }
    }

    /// Whether the server trains on in-domain data.
    fn uses_id_server_data(self) -> bool {
        matches!(
            self,
            Aggregator::FeddleId | Aggregator::FedFt | Aggregator::Center
        )
    }
}

/// Which dataset the server optimizes against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerDataKind {
    IdSubset,
    Ood,
}

fn default_eval_every() -> usize {
    10
}
fn default_one() -> usize {
    1
}
fn default_lags() -> Vec<usize> {
    vec![1]
}

/// Round loop shape: population, schedule, aggregator and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub aggregator: Aggregator,
    pub rounds: usize,
    pub num_clients: usize,
    pub sampled_per_round: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_lags")]
    pub correlation_lags: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub alpha: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self { alpha: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySection {
    pub sigma: f64,
}

impl Default for DelaySection {
    fn default() -> Self {
        Self { sigma: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Tanh,
        }
    }
}

fn default_id_size() -> usize {
    100
}
fn default_ood_classes() -> usize {
    5
}
fn default_ood_spc() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerDataSection {
    pub kind: ServerDataKind,
    /// Samples carved out of the test split for the server; the carve always
    /// happens so every aggregator is evaluated on the same remainder.
    #[serde(default = "default_id_size")]
    pub id_size: usize,
    #[serde(default = "default_ood_classes")]
    pub ood_classes: usize,
    #[serde(default = "default_ood_spc")]
    pub ood_samples_per_class: usize,
}

impl Default for ServerDataSection {
    fn default() -> Self {
        Self {
            kind: ServerDataKind::IdSubset,
            id_size: default_id_size(),
            ood_classes: default_ood_classes(),
            ood_samples_per_class: default_ood_spc(),
        }
    }
}

fn default_atlas_capacity() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_eta_g() -> f64 {
    1.0
}
fn default_steps() -> usize {
    60
}
fn default_batch() -> usize {
    32
}
fn default_smoothness() -> f64 {
    1.0
}

/// Atlas and coefficient-search knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeddleSection {
    #[serde(default = "default_atlas_capacity")]
    pub atlas_capacity: usize,
    /// Run the coefficient search every this many rounds.
    #[serde(default = "default_one")]
    pub cadence: usize,
    /// Enables fallback initialization (and the regularizer through
    /// `fallback_lambda`).
    #[serde(default = "default_true")]
    pub fallback: bool,
    #[serde(default = "default_eta_g")]
    pub fallback_eta_g: f64,
    #[serde(default = "default_server_lr")]
    pub server_lr: ServerLr,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub fallback_lambda: f64,
    #[serde(default = "default_batch")]
    pub server_batch_size: usize,
    #[serde(default = "default_smoothness")]
    pub smoothness_estimate: f64,
    #[serde(default)]
    pub snapshot_deltas: bool,
}

fn default_server_lr() -> ServerLr {
    ServerLr::Auto
}

impl Default for FeddleSection {
    fn default() -> Self {
        Self {
            atlas_capacity: default_atlas_capacity(),
            cadence: 1,
            fallback: true,
            fallback_eta_g: default_eta_g(),
            server_lr: ServerLr::Auto,
            steps: default_steps(),
            fallback_lambda: 0.0,
            server_batch_size: default_batch(),
            smoothness_estimate: default_smoothness(),
            snapshot_deltas: false,
        }
    }
}

/// Learning-rate/epoch/batch knobs reused by the client, surrogate-head and
/// fine-tuning loops; per-round seeds are derived by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl SgdSection {
    fn to_train_config(self, rng_seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            rng_seed,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(CoreError::InvalidConfig(format!(
                "{what}.learning_rate must be finite and >= 0"
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "{what}.batch_size must be positive"
            )));
        }
        Ok(())
    }
}

impl Default for SgdSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 2,
            batch_size: 32,
        }
    }
}

fn default_surrogate() -> SgdSection {
    SgdSection {
        learning_rate: 0.2,
        epochs: 20,
        batch_size: 32,
    }
}

fn default_buffer_size() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedbuffSection {
    #[serde(default = "default_eta_g")]
    pub eta_g: f64,
    #[serde(default = "default_buffer_size")]
    pub buffer_size: usize,
}

impl Default for FedbuffSection {
    fn default() -> Self {
        Self {
            eta_g: 1.0,
            buffer_size: default_buffer_size(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedasyncSection {
    pub alpha: f64,
    pub adaptivity: f64,
}

impl Default for FedasyncSection {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            adaptivity: 0.5,
        }
    }
}

/// Full declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub task: SyntheticTaskSpec,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub delay: DelaySection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub server_data: ServerDataSection,
    #[serde(default)]
    pub feddle: FeddleSection,
    #[serde(default = "default_surrogate")]
    pub surrogate: SgdSection,
    #[serde(default)]
    pub train: SgdSection,
    #[serde(default)]
    pub server_finetune: SgdSection,
    #[serde(default)]
    pub fedbuff: FedbuffSection,
    #[serde(default)]
    pub fedasync: FedasyncSection,
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> Result<Arc<ModelSpec>> {
        let mut widths = Vec::with_capacity(self.model.hidden.len() + 2);
        widths.push(self.task.feature_dim);
        widths.extend_from_slice(&self.model.hidden);
        widths.push(self.task.num_classes);
        ModelSpec::new(widths, self.model.activation)
    }

    pub fn validate(&self) -> Result<()> {
        let run = &self.run;
        if run.rounds == 0 {
            return Err(CoreError::InvalidConfig("run.rounds must be >= 1".into()));
        }
        if run.num_clients == 0 {
            return Err(CoreError::InvalidConfig(
                "run.num_clients must be >= 1".into(),
            ));
        }
        if run.sampled_per_round == 0 || run.sampled_per_round > run.num_clients {
            return Err(CoreError::InvalidConfig(
                "run.sampled_per_round must lie in [1, num_clients]".into(),
            ));
        }
        if run.eval_every == 0 {
            return Err(CoreError::InvalidConfig(
                "run.eval_every must be >= 1".into(),
            ));
        }
        self.task.validate()?;
        if !(self.partition.alpha > 0.0) || !self.partition.alpha.is_finite() {
            return Err(CoreError::InvalidConfig(
                "partition.alpha must be positive".into(),
            ));
        }
        DelayModel::new(self.delay.sigma)?;
        if !(0.0..=1.0).contains(&self.noise.fraction) {
            return Err(CoreError::InvalidConfig(
                "noise.fraction must lie in [0, 1]".into(),
            ));
        }
        if self.model.hidden.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidConfig(
                "model.hidden widths must be positive".into(),
            ));
        }
        self.train.validate("train")?;
        self.surrogate.validate("surrogate")?;
        self.server_finetune.validate("server_finetune")?;

        let feddle = &self.feddle;
        if feddle.atlas_capacity == 0 {
            return Err(CoreError::InvalidConfig(
                "feddle.atlas_capacity must be >= 1".into(),
            ));
        }
        if feddle.cadence == 0 {
            return Err(CoreError::InvalidConfig("feddle.cadence must be >= 1".into()));
        }
        self.search_config(0).validate()?;
        if !feddle.fallback_eta_g.is_finite() {
            return Err(CoreError::InvalidConfig(
                "feddle.fallback_eta_g must be finite".into(),
            ));
        }
        if self.fedbuff.buffer_size == 0 {
            return Err(CoreError::InvalidConfig(
                "fedbuff.buffer_size must be >= 1".into(),
            ));
        }
        if !self.fedbuff.eta_g.is_finite() {
            return Err(CoreError::InvalidConfig("fedbuff.eta_g must be finite".into()));
        }
        if !(self.fedasync.alpha > 0.0 && self.fedasync.alpha <= 1.0) {
            return Err(CoreError::InvalidConfig(
                "fedasync.alpha must lie in (0, 1]".into(),
            ));
        }
        if !(self.fedasync.adaptivity >= 0.0) || !self.fedasync.adaptivity.is_finite() {
            return Err(CoreError::InvalidConfig(
                "fedasync.adaptivity must be finite and >= 0".into(),
            ));
        }

        let sd = &self.server_data;
        if sd.id_size == 0 {
            return Err(CoreError::InvalidConfig(
                "server_data.id_size must be >= 1".into(),
            ));
        }
        if sd.ood_classes < 2 || sd.ood_samples_per_class < 2 {
            return Err(CoreError::InvalidConfig(
                "server_data ood settings must describe a valid task".into(),
            ));
        }
        match (run.aggregator, sd.kind) {
            (Aggregator::FeddleOod, ServerDataKind::Ood) => {}
            (Aggregator::FeddleOod, _) => {
                return Err(CoreError::InvalidConfig(
                    "feddle_ood requires server_data.kind = \"ood\"".into(),
                ))
            }
            (a, ServerDataKind::Ood) if a.uses_id_server_data() => {
                return Err(CoreError::InvalidConfig(format!(
                    "{} requires server_data.kind = \"id_subset\"",
                    a.name()
                )))
            }
            _ => {}
        }
        self.model_spec()?;
        Ok(())
    }

    fn search_config(&self, round: u64) -> SearchConfig {
        SearchConfig {
            server_lr: self.feddle.server_lr,
            steps: self.feddle.steps,
            fallback_lambda: if self.feddle.fallback {
                self.feddle.fallback_lambda
            } else {
                0.0
            },
            fallback_init: self.feddle.fallback,
            server_batch_size: self.feddle.server_batch_size,
            seed: stream_seed(self.run.master_seed, "search", &[round]),
            smoothness_estimate: self.feddle.smoothness_estimate,
        }
    }
}

/// One simulated client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data_indices: Vec<usize>,
    pub busy: bool,
    pub dispatch_round: Option<usize>,
}

/// A client delta travelling back to the server.
#[derive(Debug, Clone)]
pub struct InFlightUpdate {
    pub source_client: usize,
    pub delta: ParamVector,
    pub dispatch_round: usize,
    pub arrival_round: usize,
}

/// End-of-round observation; immutable once emitted.
#[derive(Debug, Clone)]
pub struct RoundSnapshot {
    pub round: usize,
    pub global: Arc<ParamVector>,
    pub arrivals: usize,
    pub accuracy: Option<f64>,
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub final_model: ParamVector,
    pub metrics: Vec<MetricsLine>,
    pub snapshots: Vec<RoundSnapshot>,
    pub atlas_snapshot: Option<Vec<AtlasSnapshotRecord>>,
    /// `(round, client, delay)` for every dispatched training job.
    pub dispatch_log: Vec<(usize, usize, u64)>,
}

/// Uniform sampling without replacement among idle clients; returns at most
/// `n` ids, in draw order.
pub fn sample_clients(pool: &[ClientState], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let mut idle: Vec<usize> = pool.iter().filter(|c| !c.busy).map(|c| c.id).collect();
    let take = n.min(idle.len());
    for i in 0..take {
        let j = rng.random_range(i..idle.len());
        idle.swap(i, j);
    }
    idle.truncate(take);
    idle
}

/// Removes and returns all updates scheduled to arrive this round, ordered by
/// (arrival round, dispatch round, client id).
pub fn deliver_arrivals(queue: &mut Vec<InFlightUpdate>, round: usize) -> Vec<InFlightUpdate> {
    let mut delivered = Vec::new();
    let mut remaining = Vec::with_capacity(queue.len());
    for update in queue.drain(..) {
        if update.arrival_round == round {
            delivered.push(update);
        } else {
            remaining.push(update);
        }
    }
    *queue = remaining;
    delivered.sort_by_key(|u| (u.arrival_round, u.dispatch_round, u.source_client));
    delivered
}

/// Splits the test data into a server-held subset and the evaluation
/// remainder. Derived from the task seed so every aggregator and every master
/// seed sees the same evaluation set.
pub fn carve_server_subset(test: &Batch, id_size: usize, task_seed: u64) -> Result<(Batch, Batch)> {
    use rand::seq::SliceRandom;
    if id_size >= test.len() {
        return Err(CoreError::InvalidConfig(format!(
            "server_data.id_size {} must leave evaluation data (test set has {})",
            id_size,
            test.len()
        )));
    }
    let mut order: Vec<usize> = (0..test.len()).collect();
    let mut rng = stream_rng(task_seed, "server-carve", &[]);
    order.shuffle(&mut rng);
    let mut server_rows = order[..id_size].to_vec();
    let mut eval_rows = order[id_size..].to_vec();
    server_rows.sort_unstable();
    eval_rows.sort_unstable();
    Ok((test.select(&server_rows), test.select(&eval_rows)))
}

/// Cost proxy: floating-point operations of one SGD pass over `rows` samples
/// of a `params`-sized model (forward plus backward).
fn sgd_flops(params: usize, rows: usize) -> f64 {
    6.0 * params as f64 * rows as f64
}

struct FeddleRoundOutcome {
    coefficients: CoefficientVector,
    trace: SearchTrace,
    alignment_inner: Option<f64>,
    id_ood_cosine: Option<f64>,
    flops: f64,
}

struct FeddleState {
    atlas: Atlas,
    new_anchor_ids: BTreeSet<u64>,
}

/// Runs one experiment to completion. `workers` > 1 fans client training out
/// across threads; results are merged in sampling order so the output is
/// identical to the sequential run.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<RunOutput> {
    cfg.validate()?;
    let master = cfg.run.master_seed;
    let aggregator = cfg.run.aggregator;
    let model_spec = cfg.model_spec()?;
    let params = model_spec.param_count();

    // --- environment -----------------------------------------------------
    let (train, test) = make_blobs(&cfg.task)?;
    let train = if cfg.noise.fraction > 0.0 {
        inject_label_noise(
            &train,
            &NoiseSpec {
                noise_fraction: cfg.noise.fraction,
                seed: stream_seed(master, "noise", &[]),
            },
        )?
    } else {
        train
    };
    if cfg.run.num_clients > train.len() {
        return Err(CoreError::InvalidConfig(format!(
            "{} clients but only {} training samples",
            cfg.run.num_clients,
            train.len()
        )));
    }
    let plan = dirichlet_partition(
        train.labels(),
        cfg.partition.alpha,
        cfg.run.num_clients,
        stream_seed(master, "partition", &[]),
    )?;
    let (id_server, eval_set) =
        carve_server_subset(&test, cfg.server_data.id_size, cfg.task.seed)?;
    let ood_server = if cfg.server_data.kind == ServerDataKind::Ood {
        let sized_task = SyntheticTaskSpec {
            samples_per_class: cfg.server_data.ood_samples_per_class,
            ..cfg.task
        };
        Some(make_ood_dataset(
            &sized_task,
            cfg.server_data.ood_classes,
            stream_seed(cfg.task.seed, "ood-data", &[]),
        )?)
    } else {
        None
    };
    let delay_model = DelayModel::new(cfg.delay.sigma)?;

    let mut clients: Vec<ClientState> = plan
        .client_indices
        .iter()
        .enumerate()
        .map(|(id, indices)| ClientState {
            id,
            data_indices: indices.clone(),
            busy: false,
            dispatch_round: None,
        })
        .collect();
    let client_sizes: Vec<usize> = clients.iter().map(|c| c.data_indices.len()).collect();
    let client_batches: Vec<Batch> = clients
        .iter()
        .map(|c| train.select(&c.data_indices))
        .collect();

    let pool = if workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| CoreError::InvalidConfig(format!("worker pool: {e}")))?,
        )
    } else {
        None
    };

    // --- state ------------------------------------------------------------
    let mut omega = nn::init_params(&model_spec, stream_seed(master, "model-init", &[]));
    let mut queue: Vec<InFlightUpdate> = Vec::new();
    let mut feddle = FeddleState {
        atlas: Atlas::new(cfg.feddle.atlas_capacity)?,
        new_anchor_ids: BTreeSet::new(),
    };
    let mut fedbuff_buffer: Vec<ParamVector> = Vec::new();
    let mut broadcast_history: Vec<Arc<ParamVector>> = Vec::new(); // fedasync only
    let mut snapshots: Vec<RoundSnapshot> = Vec::new();
    let mut metrics: Vec<MetricsLine> = Vec::new();
    let mut dispatch_log: Vec<(usize, usize, u64)> = Vec::new();
    let mut accuracy_series: Vec<(usize, f64)> = Vec::new();
    let max_lag = cfg.run.correlation_lags.iter().copied().max().unwrap_or(0);
    let mut recent_true_updates: Vec<Option<ParamVector>> = Vec::new();
    let mut total_arrivals = 0usize;
    let mut total_discarded = 0usize;
    let mut max_staleness = 0u64;
    let mut client_flops = 0.0f64;
    let mut server_flops = 0.0f64;

    for round in 1..=cfg.run.rounds {
        if aggregator == Aggregator::Fedasync {
            broadcast_history.push(Arc::new(omega.clone()));
        }

        // (1)+(2): sample idle clients, train, enqueue with sampled delays.
        let sampled = if aggregator == Aggregator::Center {
            Vec::new()
        } else {
            let mut rng = stream_rng(master, "sampling", &[round as u64]);
            sample_clients(&clients, cfg.run.sampled_per_round, &mut rng)
        };
        let jobs: Vec<(usize, TrainConfig)> = sampled
            .iter()
            .map(|&id| {
                (
                    id,
                    cfg.train.to_train_config(stream_seed(
                        master,
                        "client-shuffle",
                        &[round as u64, id as u64],
                    )),
                )
            })
            .collect();
        let train_one = |&(id, ref tc): &(usize, TrainConfig)| -> Result<ParamVector> {
            nn::local_train(&omega, &client_batches[id], tc)
        };
        let deltas: Vec<Result<ParamVector>> = match &pool {
            Some(p) => p.install(|| jobs.par_iter().map(train_one).collect()),
            None => jobs.iter().map(train_one).collect(),
        };
        for ((id, _), delta) in jobs.iter().zip(deltas) {
            let delta = delta?;
            let mut rng = stream_rng(master, "delay", &[round as u64, *id as u64]);
            let delay = sample_delay(&delay_model, &mut rng);
            debug_assert!(!clients[*id].busy, "client sampled while busy");
            clients[*id].busy = true;
            clients[*id].dispatch_round = Some(round);
            client_flops += sgd_flops(params, client_sizes[*id] * cfg.train.epochs);
            dispatch_log.push((round, *id, delay));
            queue.push(InFlightUpdate {
                source_client: *id,
                delta,
                dispatch_round: round,
                arrival_round: round + delay as usize,
            });
        }

        // (3): deliver everything scheduled for this round.
        let arrivals = deliver_arrivals(&mut queue, round);
        let mut staleness_values = Vec::with_capacity(arrivals.len());
        for update in &arrivals {
            let client = &mut clients[update.source_client];
            debug_assert_eq!(client.dispatch_round, Some(update.dispatch_round));
            client.busy = false;
            client.dispatch_round = None;
            let staleness = (round - update.dispatch_round) as u64;
            staleness_values.push(staleness);
            max_staleness = max_staleness.max(staleness);
        }
        total_arrivals += arrivals.len();

        // Alignment diagnostics over this round's arrivals.
        let update_alignment: Option<AlignmentStats> = if arrivals.len() >= 2 {
            let deltas: Vec<ParamVector> = arrivals.iter().map(|u| u.delta.clone()).collect();
            let sizes: Vec<usize> = arrivals
                .iter()
                .map(|u| client_sizes[u.source_client])
                .collect();
            analysis::update_alignment_stats(&deltas, &sizes).ok()
        } else {
            None
        };
        let round_true_update = if arrivals.is_empty() {
            None
        } else {
            let deltas: Vec<ParamVector> = arrivals.iter().map(|u| u.delta.clone()).collect();
            let sizes: Vec<usize> = arrivals
                .iter()
                .map(|u| client_sizes[u.source_client])
                .collect();
            analysis::true_update(&deltas, &sizes).ok()
        };
        let lag_cosines: Option<Vec<LagCosine>> = if max_lag > 0 {
            let mut cosines = Vec::new();
            for &lag in &cfg.run.correlation_lags {
                if lag == 0 || lag > recent_true_updates.len() {
                    continue;
                }
                if let (Some(current), Some(past)) = (
                    &round_true_update,
                    &recent_true_updates[recent_true_updates.len() - lag],
                ) {
                    if let Ok(c) = analysis::cosine(current, past) {
                        cosines.push(LagCosine { lag, cosine: c });
                    }
                }
            }
            (!cosines.is_empty()).then_some(cosines)
        } else {
            None
        };
        if max_lag > 0 {
            recent_true_updates.push(round_true_update.clone());
            if recent_true_updates.len() > max_lag {
                recent_true_updates.remove(0);
            }
        }

        // (4): aggregator-specific server step.
        let mut discarded_this_round = 0usize;
        let mut coefficients = None;
        let mut search_trace = None;
        let mut alignment_inner = None;
        let mut id_ood_cosine = None;
        match aggregator {
            Aggregator::Fedavg | Aggregator::FedFt => {
                let on_time: Vec<&InFlightUpdate> = arrivals
                    .iter()
                    .filter(|u| u.dispatch_round == round)
                    .collect();
                discarded_this_round = arrivals.len() - on_time.len();
                if !on_time.is_empty() {
                    let deltas: Vec<ParamVector> =
                        on_time.iter().map(|u| u.delta.clone()).collect();
                    let sizes: Vec<usize> = on_time
                        .iter()
                        .map(|u| client_sizes[u.source_client])
                        .collect();
                    omega = merge::fedavg_merge(&deltas, &sizes, &omega)?;
                    server_flops += params as f64 * deltas.len() as f64;
                }
                if aggregator == Aggregator::FedFt {
                    let tc = cfg
                        .server_finetune
                        .to_train_config(stream_seed(master, "server-finetune", &[round as u64]));
                    omega = merge::server_finetune(&omega, &id_server, &tc)?;
                    server_flops += sgd_flops(params, id_server.len() * tc.epochs);
                }
            }
            Aggregator::Fedasync => {
                for update in &arrivals {
                    let staleness = (round - update.dispatch_round) as u64;
                    let broadcast = &broadcast_history[update.dispatch_round - 1];
                    let mut client_model = (**broadcast).clone();
                    client_model.add_scaled(&update.delta, 1.0)?;
                    omega = merge::fedasync_merge(
                        &omega,
                        &client_model,
                        staleness,
                        cfg.fedasync.alpha,
                        cfg.fedasync.adaptivity,
                    )?;
                    server_flops += params as f64;
                }
            }
            Aggregator::Fedbuff => {
                for update in &arrivals {
                    fedbuff_buffer.push(update.delta.clone());
                }
                if fedbuff_buffer.len() >= cfg.fedbuff.buffer_size {
                    omega = merge::fedbuff_merge(&omega, &fedbuff_buffer, cfg.fedbuff.eta_g)?;
                    server_flops += params as f64 * fedbuff_buffer.len() as f64;
                    fedbuff_buffer.clear();
                }
            }
            Aggregator::Center => {
                let tc = cfg
                    .server_finetune
                    .to_train_config(stream_seed(master, "server-finetune", &[round as u64]));
                omega = merge::server_finetune(&omega, &id_server, &tc)?;
                server_flops += sgd_flops(params, id_server.len() * tc.epochs);
            }
            Aggregator::FeddleId | Aggregator::FeddleOod => {
                for update in &arrivals {
                    if update.delta.norm() == 0.0 {
                        // nothing to normalize or search over; drop it
                        discarded_this_round += 1;
                        continue;
                    }
                    let evicted = feddle.atlas.add_anchor(
                        update.delta.clone(),
                        AnchorMeta {
                            source_client: update.source_client,
                            dispatch_round: update.dispatch_round,
                            arrival_round: update.arrival_round,
                        },
                    )?;
                    if let Some(old) = evicted {
                        feddle.new_anchor_ids.remove(&old.id);
                    }
                    let newest = feddle
                        .atlas
                        .entries()
                        .iter()
                        .map(|a| a.id)
                        .max()
                        .expect("just inserted");
                    feddle.new_anchor_ids.insert(newest);
                }
                if !feddle.atlas.is_empty() && round % cfg.feddle.cadence == 0 {
                    let outcome = feddle_round(
                        cfg,
                        &mut feddle,
                        &omega,
                        &id_server,
                        ood_server.as_ref(),
                        round,
                    )?;
                    let anchors = feddle.atlas.normalize_anchors()?;
                    omega = merge::apply_update(&omega, &anchors, &outcome.coefficients)?;
                    feddle
                        .atlas
                        .set_scores(outcome.coefficients.as_slice())?;
                    feddle.new_anchor_ids.clear();
                    server_flops += outcome.flops;
                    alignment_inner = outcome.alignment_inner;
                    id_ood_cosine = outcome.id_ood_cosine;
                    coefficients = Some(outcome.coefficients);
                    search_trace = Some(outcome.trace);
                }
            }
        }
        total_discarded += discarded_this_round;

        // (5): evaluation on the held-out set.
        let accuracy = if round % cfg.run.eval_every == 0 || round == cfg.run.rounds {
            let acc = nn::evaluate_accuracy(&omega, &eval_set)?;
            accuracy_series.push((round, acc));
            Some(acc)
        } else {
            None
        };

        snapshots.push(RoundSnapshot {
            round,
            global: Arc::new(omega.clone()),
            arrivals: arrivals.len(),
            accuracy,
        });
        metrics.push(MetricsLine::Round(MetricsRecord {
            round,
            aggregator: aggregator.name().to_string(),
            arrivals: arrivals.len(),
            discarded: discarded_this_round,
            test_accuracy: accuracy,
            coefficients: coefficients
                .as_ref()
                .and_then(|c| analysis::coefficient_stats(c.as_slice()).ok()),
            update_alignment,
            lag_cosines,
            alignment_inner,
            id_ood_cosine,
            staleness: StalenessSummary::from_values(&staleness_values),
            search: search_trace,
            client_flops,
            server_flops,
        }));
    }

    let final_metric = analysis::final_metric(&accuracy_series).ok();
    metrics.push(MetricsLine::Summary(RunSummary {
        aggregator: aggregator.name().to_string(),
        rounds: cfg.run.rounds,
        final_metric,
        accuracy_series,
        total_arrivals,
        total_discarded,
        undelivered: queue.len(),
        max_staleness,
        client_flops,
        server_flops,
    }));

    let atlas_snapshot = match aggregator {
        Aggregator::FeddleId | Aggregator::FeddleOod => {
            Some(feddle.atlas.snapshot(cfg.feddle.snapshot_deltas))
        }
        _ => None,
    };
    Ok(RunOutput {
        final_model: omega,
        metrics,
        snapshots,
        atlas_snapshot,
        dispatch_log,
    })
}

/// One coefficient search plus its diagnostics.
fn feddle_round(
    cfg: &ExperimentConfig,
    feddle: &mut FeddleState,
    omega: &ParamVector,
    id_server: &Batch,
    ood_server: Option<&Batch>,
    round: usize,
) -> Result<FeddleRoundOutcome> {
    let search_cfg = cfg.search_config(round as u64);
    let atlas = &feddle.atlas;
    let params = omega.len() as f64;

    // FedBuff-equivalent coefficients over the anchors that arrived since the
    // previous search; zero when the fallback is disabled or nothing arrived,
    // which reproduces "no FedBuff step this round".
    let fallback: Vec<f64> = if cfg.feddle.fallback && !feddle.new_anchor_ids.is_empty() {
        merge::fallback_init(
            atlas,
            &feddle.new_anchor_ids,
            cfg.feddle.fallback_eta_g,
            atlas.median_norm()?,
        )?
    } else {
        vec![0.0; atlas.len()]
    };

    let steps_flops = search_cfg.steps as f64
        * (6.0 * params * search_cfg.server_batch_size as f64 + 3.0 * atlas.len() as f64 * params);

    match cfg.run.aggregator {
        Aggregator::FeddleId => {
            let (coefficients, trace) = merge::search_coefficients_id(
                omega,
                atlas,
                id_server,
                &search_cfg,
                Some(&fallback),
            )?;
            Ok(FeddleRoundOutcome {
                coefficients,
                trace,
                alignment_inner: None,
                id_ood_cosine: None,
                flops: steps_flops,
            })
        }
        Aggregator::FeddleOod => {
            let ood = ood_server.expect("validated ood server data");
            let anchors = atlas.normalize_anchors()?;
            let init = if search_cfg.fallback_init {
                fallback.clone()
            } else {
                vec![0.0; atlas.len()]
            };
            let mut candidate = omega.clone();
            for (anchor, &c) in anchors.iter().zip(&init) {
                candidate.add_scaled(anchor, c)?;
            }
            let head_cfg = SgdSection::to_train_config(
                cfg.surrogate,
                stream_seed(cfg.run.master_seed, "surrogate-head", &[round as u64]),
            );
            let head = merge::train_surrogate_head(&candidate, ood, &head_cfg)?;

            // Instrumentation at the search starting point: coefficient
            // gradients of the surrogate loss (full out-of-domain batch)
            // versus the task loss (full in-domain server batch).
            let (alignment_inner, id_ood_cosine) =
                alignment_diagnostics(omega, &anchors, &candidate, &head, id_server, ood)?;

            let (coefficients, trace) = merge::search_coefficients_ood_with_head(
                omega,
                atlas,
                ood,
                &search_cfg,
                &head,
                Some(&fallback),
            )?;
            let head_params = head.theta.len() as f64;
            let head_flops =
                6.0 * head_params * (ood.len() * head_cfg.epochs) as f64 + 2.0 * params * ood.len() as f64;
            Ok(FeddleRoundOutcome {
                coefficients,
                trace,
                alignment_inner,
                id_ood_cosine,
                flops: steps_flops + head_flops,
            })
        }
        _ => unreachable!("feddle_round is only called for feddle aggregators"),
    }
}

/// Coefficient gradients of the surrogate and task objectives at the same
/// starting point, reduced to their inner product and cosine.
fn alignment_diagnostics(
    omega: &ParamVector,
    anchors: &[ParamVector],
    candidate: &ParamVector,
    head: &SurrogateHead,
    id_server: &Batch,
    ood: &Batch,
) -> Result<(Option<f64>, Option<f64>)> {
    let (_, id_grad) = nn::loss_and_grad(candidate, id_server)?;
    let grad_id = merge::coeff_grad(&id_grad, anchors)?;

    let surrogate = nn::replace_head(
        candidate,
        (omega.spec().rep_dim(), head.theta.spec().num_classes()),
        head.theta.as_slice(),
    )?;
    let (_, ood_grad) = nn::loss_and_grad(&surrogate, ood)?;
    let grad_ood: Vec<f64> = anchors
        .iter()
        .map(|a| ood_grad.body_slice().dot(&a.body_slice()))
        .collect();

    let inner: f64 = grad_id.iter().zip(&grad_ood).map(|(a, b)| a * b).sum();
    let cosine = analysis::id_ood_alignment(&grad_id, &grad_ood)?;
    Ok((Some(inner), cosine))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(aggregator: Aggregator) -> ExperimentConfig {
        ExperimentConfig {
            run: RunSection {
                aggregator,
                rounds: 6,
                num_clients: 6,
                sampled_per_round: 3,
                eval_every: 2,
                master_seed: 11,
                correlation_lags: vec![1],
            },
            task: SyntheticTaskSpec {
                num_classes: 4,
                feature_dim: 6,
                cluster_spread: 1.0,
                samples_per_class: 40,
                seed: 0,
            },
            partition: PartitionSection { alpha: 0.3 },
            delay: DelaySection { sigma: 2.0 },
            noise: NoiseSection::default(),
            model: ModelSection {
                hidden: vec![8],
                activation: Activation::Tanh,
            },
            server_data: ServerDataSection {
                kind: ServerDataKind::IdSubset,
                id_size: 12,
                ood_classes: 3,
                ood_samples_per_class: 20,
            },
            feddle: FeddleSection {
                atlas_capacity: 6,
                steps: 10,
                ..FeddleSection::default()
            },
            surrogate: SgdSection {
                learning_rate: 0.2,
                epochs: 5,
                batch_size: 16,
            },
            train: SgdSection {
                learning_rate: 0.1,
                epochs: 1,
                batch_size: 16,
            },
            server_finetune: SgdSection {
                learning_rate: 0.05,
                epochs: 1,
                batch_size: 16,
            },
            fedbuff: FedbuffSection::default(),
            fedasync: FedasyncSection::default(),
        }
    }

    fn idle_pool(n: usize) -> Vec<ClientState> {
        (0..n)
            .map(|id| ClientState {
                id,
                data_indices: vec![id],
                busy: false,
                dispatch_round: None,
            })
            .collect()
    }

    #[test]
    fn sampling_respects_busy_flags() {
        let mut pool = idle_pool(5);
        for c in pool.iter_mut() {
            c.busy = true;
        }
        let mut rng = stream_rng(1, "test-sampling", &[]);
        assert!(sample_clients(&pool, 3, &mut rng).is_empty());

        pool[1].busy = false;
        pool[3].busy = false;
        pool[4].busy = false;
        let sampled = sample_clients(&pool, 10, &mut rng);
        let mut sorted = sampled.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 3, 4]);
    }

    #[test]
    fn sampling_is_uniform() {
        // binomial concentration: each of 10 clients drawn 2 per round over
        // 10^4 rounds lands near 2000
        let pool = idle_pool(10);
        let mut counts = vec![0usize; 10];
        for round in 0..10_000u64 {
            let mut rng = stream_rng(7, "uniform-sampling", &[round]);
            for id in sample_clients(&pool, 2, &mut rng) {
                counts[id] += 1;
            }
        }
        for (id, &count) in counts.iter().enumerate() {
            assert!(
                (count as i64 - 2000).abs() <= 150,
                "client {id} sampled {count} times"
            );
        }
    }

    #[test]
    fn delivery_orders_and_removes() {
        let spec = ModelSpec::new(vec![2, 2], Activation::Tanh).unwrap();
        let delta = |v: f64| {
            ParamVector::from_values(spec.clone(), vec![v; spec.param_count()]).unwrap()
        };
        let mut queue = vec![
            InFlightUpdate {
                source_client: 2,
                delta: delta(1.0),
                dispatch_round: 3,
                arrival_round: 5,
            },
            InFlightUpdate {
                source_client: 1,
                delta: delta(2.0),
                dispatch_round: 1,
                arrival_round: 5,
            },
            InFlightUpdate {
                source_client: 0,
                delta: delta(3.0),
                dispatch_round: 4,
                arrival_round: 6,
            },
        ];
        assert!(deliver_arrivals(&mut queue, 4).is_empty());
        let delivered = deliver_arrivals(&mut queue, 5);
        assert_eq!(delivered.len(), 2);
        assert_eq!(delivered[0].dispatch_round, 1); // earlier dispatch first
        assert_eq!(delivered[1].dispatch_round, 3);
        assert_eq!(queue.len(), 1);
        let delivered = deliver_arrivals(&mut queue, 6);
        assert_eq!(delivered.len(), 1);
        assert!(queue.is_empty());
    }

    /// Independent synchronous reference: with zero delay and full
    /// participation the event loop must reduce to plain FedAvg, bit for bit.
    #[test]
    fn zero_delay_full_participation_is_synchronous_fedavg() {
        let mut cfg = small_config(Aggregator::Fedavg);
        cfg.run.rounds = 3;
        cfg.run.sampled_per_round = cfg.run.num_clients;
        cfg.run.eval_every = 1;
        cfg.delay.sigma = 0.0;
        let output = run_experiment(&cfg, 1).unwrap();

        // reference loop, written directly against the module primitives
        let master = cfg.run.master_seed;
        let (train, test) = make_blobs(&cfg.task).unwrap();
        let plan = dirichlet_partition(
            train.labels(),
            cfg.partition.alpha,
            cfg.run.num_clients,
            stream_seed(master, "partition", &[]),
        )
        .unwrap();
        let (_, eval_set) =
            carve_server_subset(&test, cfg.server_data.id_size, cfg.task.seed).unwrap();
        let spec = cfg.model_spec().unwrap();
        let mut omega = nn::init_params(&spec, stream_seed(master, "model-init", &[]));
        for round in 1..=cfg.run.rounds {
            let mut deltas = Vec::new();
            let mut sizes = Vec::new();
            for client in 0..cfg.run.num_clients {
                let batch = train.select(&plan.client_indices[client]);
                let tc = cfg.train.to_train_config(stream_seed(
                    master,
                    "client-shuffle",
                    &[round as u64, client as u64],
                ));
                deltas.push(nn::local_train(&omega, &batch, &tc).unwrap());
                sizes.push(batch.len());
            }
            omega = merge::fedavg_merge(&deltas, &sizes, &omega).unwrap();
            let acc = nn::evaluate_accuracy(&omega, &eval_set).unwrap();
            let snapshot = &output.snapshots[round - 1];
            assert_eq!(snapshot.accuracy, Some(acc));
            assert_eq!(*snapshot.global, omega, "round {round} diverged");
        }
        assert_eq!(output.final_model, omega);
    }

    /// Single round, single arrival: the global step is exactly
    /// `omega + c * normalized_anchor` with the coefficients of one search.
    #[test]
    fn one_round_feddle_composes_the_module_contracts() {
        let mut cfg = small_config(Aggregator::FeddleId);
        cfg.run.rounds = 1;
        cfg.run.sampled_per_round = 1;
        cfg.delay.sigma = 0.0;
        let output = run_experiment(&cfg, 1).unwrap();

        let master = cfg.run.master_seed;
        let (train, test) = make_blobs(&cfg.task).unwrap();
        let plan = dirichlet_partition(
            train.labels(),
            cfg.partition.alpha,
            cfg.run.num_clients,
            stream_seed(master, "partition", &[]),
        )
        .unwrap();
        let (id_server, _) =
            carve_server_subset(&test, cfg.server_data.id_size, cfg.task.seed).unwrap();
        let spec = cfg.model_spec().unwrap();
        let omega = nn::init_params(&spec, stream_seed(master, "model-init", &[]));

        let mut rng = stream_rng(master, "sampling", &[1]);
        let sampled = sample_clients(&idle_pool(cfg.run.num_clients), 1, &mut rng);
        let client = sampled[0];
        let batch = train.select(&plan.client_indices[client]);
        let tc = cfg
            .train
            .to_train_config(stream_seed(master, "client-shuffle", &[1, client as u64]));
        let delta = nn::local_train(&omega, &batch, &tc).unwrap();

        let mut atlas = Atlas::new(cfg.feddle.atlas_capacity).unwrap();
        atlas
            .add_anchor(
                delta,
                AnchorMeta {
                    source_client: client,
                    dispatch_round: 1,
                    arrival_round: 1,
                },
            )
            .unwrap();
        let ids: BTreeSet<u64> = [0].into();
        let fallback = merge::fallback_init(
            &atlas,
            &ids,
            cfg.feddle.fallback_eta_g,
            atlas.median_norm().unwrap(),
        )
        .unwrap();
        let (coefficients, _) = merge::search_coefficients_id(
            &omega,
            &atlas,
            &id_server,
            &cfg.search_config(1),
            Some(&fallback),
        )
        .unwrap();
        let anchors = atlas.normalize_anchors().unwrap();
        let expected = merge::apply_update(&omega, &anchors, &coefficients).unwrap();
        assert_eq!(output.final_model, expected);

        // single-anchor form: omega + c * normalized anchor
        let mut direct = omega.clone();
        direct
            .add_scaled(&anchors[0], coefficients.as_slice()[0])
            .unwrap();
        assert_eq!(output.final_model, direct);
    }

    #[test]
    fn reruns_are_bit_identical() {
        for aggregator in [
            Aggregator::FeddleId,
            Aggregator::Fedbuff,
            Aggregator::Fedasync,
            Aggregator::FedFt,
        ] {
            let cfg = small_config(aggregator);
            let a = run_experiment(&cfg, 1).unwrap();
            let b = run_experiment(&cfg, 1).unwrap();
            assert_eq!(
                analysis::metrics_to_jsonl(&a.metrics),
                analysis::metrics_to_jsonl(&b.metrics),
                "{} rerun diverged",
                aggregator.name()
            );
            assert_eq!(a.final_model, b.final_model);
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cfg = small_config(Aggregator::FeddleId);
        let sequential = run_experiment(&cfg, 1).unwrap();
        let parallel = run_experiment(&cfg, 2).unwrap();
        assert_eq!(sequential.final_model, parallel.final_model);
        assert_eq!(
            analysis::metrics_to_jsonl(&sequential.metrics),
            analysis::metrics_to_jsonl(&parallel.metrics)
        );
    }

    #[test]
    fn environment_streams_are_aggregator_independent() {
        let a = run_experiment(&small_config(Aggregator::Fedbuff), 1).unwrap();
        let b = run_experiment(&small_config(Aggregator::FeddleId), 1).unwrap();
        let c = run_experiment(&small_config(Aggregator::Fedasync), 1).unwrap();
        assert_eq!(a.dispatch_log, b.dispatch_log);
        assert_eq!(a.dispatch_log, c.dispatch_log);
    }

    #[test]
    fn conservation_and_staleness_bounds() {
        let mut cfg = small_config(Aggregator::Fedbuff);
        cfg.delay.sigma = 4.0;
        cfg.run.rounds = 12;
        let output = run_experiment(&cfg, 1).unwrap();
        let summary = output
            .metrics
            .iter()
            .find_map(|line| match line {
                MetricsLine::Summary(s) => Some(s.clone()),
                _ => None,
            })
            .expect("summary line");
        assert_eq!(
            output.dispatch_log.len(),
            summary.total_arrivals + summary.undelivered,
            "every dispatch is delivered exactly once or still queued"
        );
        let max_delay = output.dispatch_log.iter().map(|&(_, _, d)| d).max().unwrap();
        assert!(summary.max_staleness <= max_delay);

        // a client is never re-sampled while busy: per client, dispatches
        // are separated by at least the delay
        for client in 0..cfg.run.num_clients {
            let mut dispatches: Vec<(usize, u64)> = output
                .dispatch_log
                .iter()
                .filter(|&&(_, c, _)| c == client)
                .map(|&(round, _, delay)| (round, delay))
                .collect();
            dispatches.sort_unstable();
            for pair in dispatches.windows(2) {
                let earliest_redispatch = pair[0].0 + pair[0].1 as usize + 1;
                assert!(
                    pair[1].0 >= earliest_redispatch,
                    "client {client} resampled while in flight"
                );
            }
        }
    }

    #[test]
    fn fed_ft_composes_fedavg_then_finetune() {
        let mut cfg = small_config(Aggregator::FedFt);
        cfg.run.rounds = 1;
        cfg.run.sampled_per_round = cfg.run.num_clients;
        cfg.delay.sigma = 0.0;
        let output = run_experiment(&cfg, 1).unwrap();

        let mut plain = small_config(Aggregator::Fedavg);
        plain.run.rounds = 1;
        plain.run.sampled_per_round = plain.run.num_clients;
        plain.delay.sigma = 0.0;
        let merged = run_experiment(&plain, 1).unwrap();

        let (_, test) = make_blobs(&cfg.task).unwrap();
        let (id_server, _) =
            carve_server_subset(&test, cfg.server_data.id_size, cfg.task.seed).unwrap();
        let tc = cfg
            .server_finetune
            .to_train_config(stream_seed(cfg.run.master_seed, "server-finetune", &[1]));
        let expected = merge::server_finetune(&merged.final_model, &id_server, &tc).unwrap();
        assert_eq!(output.final_model, expected);
    }

    #[test]
    fn center_ignores_clients() {
        let cfg = small_config(Aggregator::Center);
        let output = run_experiment(&cfg, 1).unwrap();
        assert!(output.dispatch_log.is_empty());
        let accuracy = output
            .snapshots
            .last()
            .and_then(|s| s.accuracy)
            .expect("final round evaluates");
        assert!(accuracy > 0.0);
    }

    #[test]
    fn feddle_ood_records_alignment_diagnostics() {
        let mut cfg = small_config(Aggregator::FeddleOod);
        cfg.server_data.kind = ServerDataKind::Ood;
        cfg.run.rounds = 4;
        let output = run_experiment(&cfg, 1).unwrap();
        let with_diagnostics = output
            .metrics
            .iter()
            .filter(|line| {
                matches!(line, MetricsLine::Round(r) if r.id_ood_cosine.is_some() && r.alignment_inner.is_some())
            })
            .count();
        assert!(with_diagnostics >= 1, "no alignment diagnostics recorded");
        assert!(output.atlas_snapshot.is_some());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_config(Aggregator::Fedavg);
        cfg.run.sampled_per_round = 99;
        assert!(matches!(
            run_experiment(&cfg, 1),
            Err(CoreError::InvalidConfig(_))
        ));

        let mut cfg = small_config(Aggregator::FeddleOod);
        cfg.server_data.kind = ServerDataKind::IdSubset;
        assert!(matches!(cfg.validate(), Err(CoreError::InvalidConfig(_))));

        let mut cfg = small_config(Aggregator::Center);
        cfg.server_data.kind = ServerDataKind::Ood;
        assert!(matches!(cfg.validate(), Err(CoreError::InvalidConfig(_))));

        let mut cfg = small_config(Aggregator::Fedavg);
        cfg.server_data.id_size = 10_000;
        assert!(matches!(
            run_experiment(&cfg, 1),
            Err(CoreError::InvalidConfig(_))
        ));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = small_config(Aggregator::FeddleId);
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
