//! Synthetic task construction and experiment environment sampling: Gaussian
//! cluster tasks, Dirichlet non-IID partitioning, label-noise injection,
//! out-of-domain server datasets, and half-normal communication delays.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::Batch;
use crate::rng::stream_rng;

/// Distance of class means from the origin; cluster_spread is measured
/// against this fixed scale.
const MEAN_RADIUS: f64 = 4.0;

/// Description of one synthetic classification task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub cluster_spread: f64,
    pub samples_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CoreError::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.feature_dim < 2 {
            return Err(CoreError::InvalidConfig("feature_dim must be >= 2".into()));
        }
        if !(self.cluster_spread > 0.0) || !self.cluster_spread.is_finite() {
            return Err(CoreError::InvalidConfig(
                "cluster_spread must be positive".into(),
            ));
        }
        if self.samples_per_class < 2 {
            return Err(CoreError::InvalidConfig(
                "samples_per_class must be >= 2 for a train/test split".into(),
            ));
        }
        Ok(())
    }
}

/// Per-client index lists forming a disjoint, exhaustive partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub num_clients: usize,
    pub client_indices: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }
}

/// Half-normal communication delay in whole rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub sigma: f64,
}

impl DelayModel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(CoreError::InvalidConfig(
                "delay sigma must be finite and >= 0".into(),
            ));
        }
        Ok(Self { sigma })
    }
}

/// Fraction of training samples whose label is replaced at random.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub noise_fraction: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return Err(CoreError::InvalidConfig(
                "noise_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian square matrix.
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut q = Array2::zeros((dim, dim));
    for col in 0..dim {
        let mut v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        for prev in 0..col {
            let proj = q.column(prev).dot(&v);
            let prev_col = q.column(prev).to_owned();
            v.scaled_add(-proj, &prev_col);
        }
        let norm = v.dot(&v).sqrt();
        assert!(norm > 1e-9, "degenerate Gram-Schmidt column");
        v /= norm;
        q.column_mut(col).assign(&v);
    }
    q
}

/// The generative class means: a fixed ring (or axis-aligned frame when the
/// feature dimension allows) rotated by a seed-dependent orthogonal map.
pub fn class_means(spec: &SyntheticTaskSpec) -> Array2<f64> {
    let (c, d) = (spec.num_classes, spec.feature_dim);
    let mut rng = stream_rng(spec.seed, "task-rotation", &[]);
    let rotation = random_rotation(d, &mut rng);
    let mut means = Array2::zeros((c, d));
    for class in 0..c {
        let mut unit = Array1::zeros(d);
        if d >= c {
            unit[class] = 1.0;
        } else {
            let angle = 2.0 * std::f64::consts::PI * class as f64 / c as f64;
            unit[0] = angle.cos();
            unit[1] = angle.sin();
        }
        let mean = rotation.dot(&unit) * MEAN_RADIUS;
        means.row_mut(class).assign(&mean);
    }
    means
}

fn sample_clusters(spec: &SyntheticTaskSpec, stream: &str) -> (Array2<f64>, Vec<usize>) {
    let means = class_means(spec);
    let total = spec.num_classes * spec.samples_per_class;
    let mut features = Array2::zeros((total, spec.feature_dim));
    let mut labels = Vec::with_capacity(total);
    let mut rng = stream_rng(spec.seed, stream, &[]);
    let mut row = 0;
    for class in 0..spec.num_classes {
        for _ in 0..spec.samples_per_class {
            for (j, f) in features.row_mut(row).iter_mut().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *f = means[[class, j]] + spec.cluster_spread * noise;
            }
            labels.push(class);
            row += 1;
        }
    }
    (features, labels)
}

/// Deterministic Gaussian clusters with an 80/20 per-class train/test split.
pub fn make_blobs(spec: &SyntheticTaskSpec) -> Result<(Batch, Batch)> {
    spec.validate()?;
    let (features, labels) = sample_clusters(spec, "task-samples");
    let train_per_class = (spec.samples_per_class * 4) / 5;
    let train_per_class = train_per_class.max(1).min(spec.samples_per_class - 1);
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for class in 0..spec.num_classes {
        let start = class * spec.samples_per_class;
        for offset in 0..spec.samples_per_class {
            if offset < train_per_class {
                train_rows.push(start + offset);
            } else {
                test_rows.push(start + offset);
            }
        }
    }
    let all = Batch::new(features, labels)?;
    Ok((all.select(&train_rows), all.select(&test_rows)))
}

/// Splits sample indices across clients by drawing per-class proportions from
/// a symmetric Dirichlet. Clients left empty receive one sample stolen from
/// the largest client, so every client stays trainable.
pub fn dirichlet_partition(
    labels: &[usize],
    alpha: f64,
    num_clients: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(CoreError::InvalidArgument("need at least one client".into()));
    }
    if num_clients > labels.len() {
        return Err(CoreError::InvalidArgument(format!(
            "{num_clients} clients but only {} samples",
            labels.len()
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(CoreError::InvalidArgument(
            "dirichlet alpha must be positive".into(),
        ));
    }

    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for class in 0..num_classes {
        let mut class_rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect();
        if class_rows.is_empty() {
            continue;
        }
        let mut rng = stream_rng(seed, "dirichlet", &[class as u64]);
        class_rows.shuffle(&mut rng);

        // Symmetric Dirichlet via normalized Gamma draws.
        let gamma = Gamma::new(alpha, 1.0)
            .map_err(|e| CoreError::InvalidArgument(format!("gamma({alpha}): {e}")))?;
        let mut proportions: Vec<f64> =
            (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = proportions.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            proportions = vec![1.0 / num_clients as f64; num_clients];
        } else {
            for p in &mut proportions {
                *p /= total;
            }
        }

        let n = class_rows.len() as f64;
        let mut cumulative = 0.0;
        let mut prev_boundary = 0usize;
        for (client, &p) in proportions.iter().enumerate() {
            cumulative += p;
            let boundary = if client + 1 == num_clients {
                class_rows.len()
            } else {
                ((cumulative * n).round() as usize).min(class_rows.len())
            };
            let boundary = boundary.max(prev_boundary);
            client_indices[client].extend_from_slice(&class_rows[prev_boundary..boundary]);
            prev_boundary = boundary;
        }
    }

    // Repair rule: the largest client donates its last index to each empty
    // client (ties on size break toward the smaller client id).
    loop {
        let empty = match client_indices.iter().position(Vec::is_empty) {
            Some(i) => i,
            None => break,
        };
        let donor = client_indices
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("at least one client");
        let moved = client_indices[donor]
            .pop()
            .expect("donor larger than empty client");
        client_indices[empty].push(moved);
    }

    Ok(PartitionPlan {
        alpha,
        num_clients,
        client_indices,
    })
}

/// Replaces the labels of exactly `floor(fraction * n)` samples (chosen
/// deterministically from the seed) with a uniform draw over the other
/// classes.
pub fn inject_label_noise(train: &Batch, spec: &NoiseSpec) -> Result<Batch> {
    spec.validate()?;
    let n = train.len();
    let count = (spec.noise_fraction * n as f64).floor() as usize;
    let num_classes = train.num_classes();
    if count == 0 || num_classes < 2 {
        return Ok(train.clone());
    }
    let mut rng = stream_rng(spec.seed, "label-noise", &[]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = train.labels().to_vec();
    for &row in order.iter().take(count) {
        let old = labels[row];
        let draw = rng.random_range(0..num_classes - 1);
        labels[row] = if draw >= old { draw + 1 } else { draw };
    }
    Batch::new(train.features().to_owned(), labels)
}

/// Builds a server-side dataset from an unrelated label space: same feature
/// dimension as the base task, different class count, and cluster geometry
/// moved by a fixed orthogonal rotation plus translation.
pub fn make_ood_dataset(
    id_spec: &SyntheticTaskSpec,
    ood_classes: usize,
    seed: u64,
) -> Result<Batch> {
    if ood_classes < 2 {
        return Err(CoreError::InvalidArgument("ood_classes must be >= 2".into()));
    }
    let ood_spec = SyntheticTaskSpec {
        num_classes: ood_classes,
        seed,
        ..*id_spec
    };
    ood_spec.validate()?;
    let (features, labels) = sample_clusters(&ood_spec, "ood-samples");
    let mut rng = stream_rng(seed, "ood-transform", &[]);
    let rotation = random_rotation(id_spec.feature_dim, &mut rng);
    let shift = Array1::from_shape_fn(id_spec.feature_dim, |_| rng.random_range(-2.0..2.0));
    let mut transformed = features.dot(&rotation.t());
    transformed += &shift;
    Batch::new(transformed, labels)
}

/// One half-normal delay draw, rounded to whole rounds.
pub fn sample_delay(model: &DelayModel, rng: &mut ChaCha8Rng) -> u64 {
    if model.sigma == 0.0 {
        return 0;
    }
    let normal = Normal::new(0.0, model.sigma).expect("validated sigma");
    let draw: f64 = normal.sample(rng);
    draw.abs().round() as u64
}

/// Renders a batch as a plain text table, one row per sample: the feature
/// values then the integer label.
pub fn to_table_string(batch: &Batch) -> String {
    let mut out = String::new();
    for (row, &label) in batch.features().rows().into_iter().zip(batch.labels()) {
        for value in row.iter() {
            out.push_str(&format!("{value:?} "));
        }
        out.push_str(&format!("{label}\n"));
    }
    out
}

/// Parses the table format produced by [`to_table_string`].
pub fn from_table_string(text: &str) -> Result<Batch> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "table row {} needs at least one feature and a label",
                line_no + 1
            )));
        }
        let mut row = Vec::with_capacity(fields.len() - 1);
        for f in &fields[..fields.len() - 1] {
            row.push(f.parse::<f64>().map_err(|e| {
                CoreError::InvalidArgument(format!("table row {}: {e}", line_no + 1))
            })?);
        }
        let label = fields[fields.len() - 1]
            .parse::<usize>()
            .map_err(|e| CoreError::InvalidArgument(format!("table row {}: {e}", line_no + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(CoreError::ShapeMismatch(format!(
                    "table row {} has {} features, expected {}",
                    line_no + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
        labels.push(label);
    }
    let dim = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((labels.len(), dim), flat)
        .map_err(|e| CoreError::ShapeMismatch(e.to_string()))?;
    Batch::new(features, labels)
}
