//! Minimal dense-network engine over flat parameter vectors.
//!
//! Models are multilayer perceptrons with a linear classifier head. All
//! parameters live in one flat `f64` vector whose layout is fixed by a
//! [`ModelSpec`]: for each layer, a row-major `(fan_in, fan_out)` weight block
//! followed by a bias block. The final weight+bias block is the head; the rest
//! is the body used for representation extraction.
//!
//! Everything here is pure and deterministic given seeds, so callers may fan
//! work out across threads freely.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::stream_rng;

/// Hidden-layer nonlinearity. The final layer is always linear logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed in terms of the pre-activation value.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    weight_offset: usize,
    bias_offset: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Layer widths plus activation; fixes the flat parameter layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerLayout>,
    head_split: usize,
    param_count: usize,
}

impl ModelSpec {
    /// Builds a spec from layer widths `[input, hidden.., classes]`.
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Arc<Self>> {
        if layer_widths.len() < 2 {
            return Err(CoreError::InvalidArgument(
                "model needs at least input and output widths".into(),
            ));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(CoreError::InvalidArgument(
                "layer widths must be positive".into(),
            ));
        }
        let mut layers = Vec::with_capacity(layer_widths.len() - 1);
        let mut offset = 0;
        for pair in layer_widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layers.push(LayerLayout {
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
                fan_in,
                fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }
        let head_split = layers.last().expect("at least one layer").weight_offset;
        Ok(Arc::new(Self {
            layer_widths,
            activation,
            layers,
            head_split,
            param_count: offset,
        }))
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("nonempty widths")
    }

    /// Dimension of the representation fed to the classifier head.
    pub fn rep_dim(&self) -> usize {
        self.layer_widths[self.layer_widths.len() - 2]
    }

    /// Parameter offset at which the head (final weight+bias block) begins.
    pub fn head_split(&self) -> usize {
        self.head_split
    }

    pub fn head_len(&self) -> usize {
        self.param_count - self.head_split
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Same body, classifier head resized to `classes` outputs.
    pub fn with_head_classes(&self, classes: usize) -> Result<Arc<Self>> {
        let mut widths = self.layer_widths.clone();
        *widths.last_mut().expect("nonempty widths") = classes;
        Self::new(widths, self.activation)
    }
}

/// Flat vector of model parameters (or an update/gradient in the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Array1<f64>,
    spec: Arc<ModelSpec>,
}

impl ParamVector {
    pub fn zeros(spec: Arc<ModelSpec>) -> Self {
        let values = Array1::zeros(spec.param_count());
        Self { values, spec }
    }

    /// Wraps raw values, checking length and finiteness.
    pub fn from_values(spec: Arc<ModelSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(CoreError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("parameter vector".into()));
        }
        Ok(Self {
            values: Array1::from_vec(values),
            spec,
        })
    }

    pub fn spec(&self) -> &Arc<ModelSpec> {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("contiguous storage")
    }

    /// Mutable access for tests and composition; callers keep entries finite.
    pub fn values_mut(&mut self) -> &mut Array1<f64> {
        &mut self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other)?;
        Ok(self.values.dot(&other.values))
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ParamVector, factor: f64) -> Result<()> {
        self.check_len(other)?;
        self.values.scaled_add(factor, &other.values);
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other)?;
        Ok(ParamVector {
            values: &self.values - &other.values,
            spec: self.spec.clone(),
        })
    }

    pub fn scale(&mut self, factor: f64) {
        self.values *= factor;
    }

    pub fn body_slice(&self) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![..self.spec.head_split()])
    }

    pub fn head_slice(&self) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![self.spec.head_split()..])
    }

    fn check_len(&self, other: &ParamVector) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "parameter vectors of length {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }

    fn weight_view(&self, layer: &LayerLayout) -> ArrayView2<'_, f64> {
        let slice = self.as_slice();
        ArrayView2::from_shape(
            (layer.fan_in, layer.fan_out),
            &slice[layer.weight_offset..layer.weight_offset + layer.fan_in * layer.fan_out],
        )
        .expect("layout is consistent")
    }

    fn bias_view(&self, layer: &LayerLayout) -> ArrayView1<'_, f64> {
        let slice = self.as_slice();
        ArrayView1::from(&slice[layer.bias_offset..layer.bias_offset + layer.fan_out])
    }
}

/// A design matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Smallest class count consistent with the labels present.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Gathers the given rows into a new batch.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut features = Array2::zeros((indices.len(), self.features.ncols()));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &ix) in indices.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(ix));
            labels.push(self.labels[ix]);
        }
        Batch { features, labels }
    }
}

/// Hyperparameters for one client-side (or server-side) SGD fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(CoreError::InvalidConfig(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Deterministic fan-in-scaled uniform initialization; biases start at zero.
pub fn init_params(spec: &Arc<ModelSpec>, seed: u64) -> ParamVector {
    let mut rng = stream_rng(seed, "init", &[]);
    let mut values = vec![0.0; spec.param_count()];
    for layer in &spec.layers {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        for w in values
            .iter_mut()
            .skip(layer.weight_offset)
            .take(layer.fan_in * layer.fan_out)
        {
            *w = rng.random_range(-bound..bound);
        }
        // bias entries stay zero
    }
    ParamVector {
        values: Array1::from_vec(values),
        spec: spec.clone(),
    }
}

struct ForwardPass {
    /// Layer inputs: activations[0] is the batch, activations[i] feeds layer i.
    activations: Vec<Array2<f64>>,
    /// Pre-activation values for each hidden layer.
    pre_activations: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

fn check_batch(params: &ParamVector, batch: &Batch) -> Result<()> {
    if batch.feature_dim() != params.spec.input_dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "batch feature dim {} vs model input dim {}",
            batch.feature_dim(),
            params.spec.input_dim()
        )));
    }
    let classes = params.spec.num_classes();
    if batch.labels.iter().any(|&y| y >= classes) {
        return Err(CoreError::InvalidArgument(format!(
            "label out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn forward(params: &ParamVector, features: ArrayView2<'_, f64>) -> ForwardPass {
    let spec = &params.spec;
    let n_layers = spec.layers.len();
    let mut activations = Vec::with_capacity(n_layers);
    let mut pre_activations = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut current = features.to_owned();
    let mut logits = None;
    for (i, layer) in spec.layers.iter().enumerate() {
        let mut z = current.dot(&params.weight_view(layer));
        z += &params.bias_view(layer);
        activations.push(std::mem::take(&mut current));
        if i + 1 == n_layers {
            logits = Some(z);
        } else {
            current = z.mapv(|v| spec.activation.apply(v));
            pre_activations.push(z);
        }
    }
    ForwardPass {
        activations,
        pre_activations,
        logits: logits.expect("at least one layer"),
    }
}

/// Row-wise softmax probabilities and mean cross-entropy, max-subtracted for
/// stability.
fn softmax_loss(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (mut row, &label) in probs.axis_iter_mut(Axis(0)).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
        // loss_i = log-sum-exp - z_y = ln(sum) + max - z_y; use the stabilized
        // probability directly: -ln p_y.
        loss -= row[label].ln();
    }
    (loss / labels.len() as f64, probs)
}

/// Mean cross-entropy over the batch plus its exact gradient.
pub fn loss_and_grad(params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    check_batch(params, batch)?;
    let spec = &params.spec;
    let pass = forward(params, batch.features());
    let (loss, probs) = softmax_loss(&pass.logits, &batch.labels);
    if !loss.is_finite() {
        return Err(CoreError::NonFinite("cross-entropy loss".into()));
    }

    let n = batch.len() as f64;
    let mut grad = vec![0.0; spec.param_count()];
    // d(loss)/d(logits) for softmax cross-entropy.
    let mut delta = probs;
    for (mut row, &label) in delta.axis_iter_mut(Axis(0)).zip(&batch.labels) {
        row[label] -= 1.0;
    }
    delta /= n;

    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let input = &pass.activations[i];
        let grad_w = input.t().dot(&delta);
        let grad_b = delta.sum_axis(Axis(0));
        grad[layer.weight_offset..layer.weight_offset + layer.fan_in * layer.fan_out]
            .copy_from_slice(grad_w.as_slice().expect("row-major"));
        grad[layer.bias_offset..layer.bias_offset + layer.fan_out]
            .copy_from_slice(grad_b.as_slice().expect("contiguous"));
        if i > 0 {
            let mut upstream = delta.dot(&params.weight_view(layer).t());
            upstream.zip_mut_with(&pass.pre_activations[i - 1], |u, &z| {
                *u *= spec.activation.derivative(z);
            });
            delta = upstream;
        }
    }

    let grad = ParamVector::from_values(spec.clone(), grad)?;
    Ok((loss, grad))
}

/// Mean cross-entropy only (no gradient).
pub fn loss_only(params: &ParamVector, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    check_batch(params, batch)?;
    let pass = forward(params, batch.features());
    let (loss, _) = softmax_loss(&pass.logits, &batch.labels);
    if !loss.is_finite() {
        return Err(CoreError::NonFinite("cross-entropy loss".into()));
    }
    Ok(loss)
}

/// Runs mini-batch SGD and returns the parameter delta (final minus initial).
///
/// Shuffling is drawn from a dedicated stream of `cfg.rng_seed` per epoch, so
/// two clients with distinct seeds never share batch orderings.
pub fn local_train(params: &ParamVector, data: &Batch, cfg: &TrainConfig) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(CoreError::EmptyClientData);
    }
    cfg.validate()?;
    check_batch(params, data)?;
    let mut current = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.rng_seed, "shuffle", &[epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let minibatch = data.select(chunk);
            let (_, grad) = loss_and_grad(&current, &minibatch)?;
            current.add_scaled(&grad, -cfg.learning_rate)?;
        }
    }
    current.sub(params)
}

/// Representations produced by the body (input passes through every hidden
/// layer; a head-only model returns the features unchanged).
pub fn body_forward(params: &ParamVector, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if features.ncols() != params.spec.input_dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "feature dim {} vs model input dim {}",
            features.ncols(),
            params.spec.input_dim()
        )));
    }
    let spec = &params.spec;
    let mut current = features.to_owned();
    for layer in &spec.layers[..spec.layers.len() - 1] {
        let mut z = current.dot(&params.weight_view(layer));
        z += &params.bias_view(layer);
        current = z.mapv(|v| spec.activation.apply(v));
    }
    Ok(current)
}

/// Splits a parameter vector into its body and head slices.
pub fn split_body_head(params: &ParamVector) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
    (params.body_slice(), params.head_slice())
}

/// Replaces the classifier head with `theta`, yielding a model whose output
/// dimension is `head_dims.1`.
pub fn replace_head(
    params: &ParamVector,
    head_dims: (usize, usize),
    theta: &[f64],
) -> Result<ParamVector> {
    let (fan_in, fan_out) = head_dims;
    if fan_in != params.spec.rep_dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "head input dim {} vs body output dim {}",
            fan_in,
            params.spec.rep_dim()
        )));
    }
    let expected = fan_in * fan_out + fan_out;
    if theta.len() != expected {
        return Err(CoreError::ShapeMismatch(format!(
            "head slice of length {} vs expected {}",
            theta.len(),
            expected
        )));
    }
    let spec = params.spec.with_head_classes(fan_out)?;
    let mut values = Vec::with_capacity(spec.param_count());
    values.extend_from_slice(&params.as_slice()[..params.spec.head_split()]);
    values.extend_from_slice(theta);
    ParamVector::from_values(spec, values)
}

/// Argmax-of-logits classification accuracy; ties resolve to the lowest class.
pub fn evaluate_accuracy(params: &ParamVector, test: &Batch) -> Result<f64> {
    if test.is_empty() {
        return Err(CoreError::EmptyTestSet);
    }
    check_batch(params, test)?;
    let pass = forward(params, test.features());
    let mut correct = 0usize;
    for (row, &label) in pass.logits.axis_iter(Axis(0)).zip(&test.labels) {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > best_val {
                best = j;
                best_val = v;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn spec(widths: &[usize]) -> Arc<ModelSpec> {
        ModelSpec::new(widths.to_vec(), Activation::Relu).unwrap()
    }

    fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Batch {
        let mut rng = stream_rng(seed, "test-batch", &[]);
        let features = Array2::from_shape_fn((n, spec.input_dim()), |_| {
            rng.random_range(-1.0..1.0)
        });
        let labels = (0..n)
            .map(|_| rng.random_range(0..spec.num_classes()))
            .collect();
        Batch::new(features, labels).unwrap()
    }

    /// Independent oracle: central finite differences of the batch loss.
    fn finite_difference_grad(params: &ParamVector, batch: &Batch, h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let lp = loss_only(&plus, batch).unwrap();
            let lm = loss_only(&minus, batch).unwrap();
            out.push((lp - lm) / (2.0 * h));
        }
        out
    }

    fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(reference)
            .map(|(&a, &b)| (a - b).abs() / (a.abs() + b.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn param_count_matches_layout() {
        let s = spec(&[2, 3, 2]);
        assert_eq!(s.param_count(), 2 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(init_params(&s, 0).len(), 17);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let s = spec(&[4, 5, 3]);
        assert_eq!(init_params(&s, 0), init_params(&s, 0));
        assert_ne!(init_params(&s, 0), init_params(&s, 1));
    }

    #[test]
    fn init_biases_are_zero() {
        let s = spec(&[2, 3, 2]);
        let p = init_params(&s, 3);
        let v = p.as_slice();
        // bias blocks: [6..9] and [15..17]
        assert!(v[6..9].iter().all(|&b| b == 0.0));
        assert!(v[15..17].iter().all(|&b| b == 0.0));
        assert!(v[..6].iter().any(|&w| w != 0.0));
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let s = spec(&[3, 4, 5]);
        let mut p = init_params(&s, 1);
        for i in s.head_split()..s.param_count() {
            p.values_mut()[i] = 0.0;
        }
        let batch = random_batch(&s, 7, 2);
        let (loss, _) = loss_and_grad(&p, &batch).unwrap();
        assert_abs_diff_eq!(loss, (5.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn saturated_softmax_loss_vanishes() {
        let s = spec(&[2, 2]);
        // Head-only model: logits = x·W + b. Craft b so class 0 wins by +30.
        let p = ParamVector::from_values(s.clone(), vec![0.0, 0.0, 0.0, 0.0, 30.0, 0.0]).unwrap();
        let batch = Batch::new(array![[0.0, 0.0]], vec![0]).unwrap();
        let (loss, _) = loss_and_grad(&p, &batch).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let s = spec(&[3, 4, 3]);
        let p = init_params(&s, 5);
        let batch = random_batch(&s, 5, 6);
        let (_, grad) = loss_and_grad(&p, &batch).unwrap();
        let reference = finite_difference_grad(&p, &batch, 1e-5);
        assert!(max_relative_error(grad.as_slice(), &reference) < 1e-4);
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        let s = ModelSpec::new(vec![3, 5, 4, 2], Activation::Tanh).unwrap();
        let p = init_params(&s, 9);
        let batch = random_batch(&s, 6, 10);
        let (_, grad) = loss_and_grad(&p, &batch).unwrap();
        let reference = finite_difference_grad(&p, &batch, 1e-5);
        assert!(max_relative_error(grad.as_slice(), &reference) < 1e-4);
    }

    #[test]
    fn loss_is_nonnegative() {
        for seed in 0..10 {
            let s = spec(&[4, 6, 3]);
            let p = init_params(&s, seed);
            let batch = random_batch(&s, 9, seed + 100);
            let (loss, _) = loss_and_grad(&p, &batch).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn zero_learning_rate_moves_nothing() {
        let s = spec(&[3, 4, 2]);
        let p = init_params(&s, 0);
        let data = random_batch(&s, 12, 1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 4,
            rng_seed: 7,
        };
        let delta = local_train(&p, &data, &cfg).unwrap();
        assert!(delta.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_is_negative_lr_times_gradient() {
        let s = spec(&[3, 4, 2]);
        let p = init_params(&s, 0);
        let data = random_batch(&s, 8, 1);
        let cfg = TrainConfig {
            learning_rate: 0.3,
            epochs: 1,
            batch_size: 8,
            rng_seed: 7,
        };
        let delta = local_train(&p, &data, &cfg).unwrap();
        let (_, grad) = loss_and_grad(&p, &data).unwrap();
        for (d, g) in delta.as_slice().iter().zip(grad.as_slice()) {
            assert_abs_diff_eq!(*d, -0.3 * g, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let s = spec(&[2, 2]);
        let p = init_params(&s, 0);
        let empty = Batch::new(Array2::zeros((0, 2)), vec![]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 4,
            rng_seed: 0,
        };
        assert!(matches!(
            local_train(&p, &empty, &cfg),
            Err(CoreError::EmptyClientData)
        ));
        assert!(matches!(
            evaluate_accuracy(&p, &empty),
            Err(CoreError::EmptyTestSet)
        ));
    }

    #[test]
    fn logistic_regression_separates_blobs() {
        // Two well-separated 2-D clusters, no hidden layer.
        let mut rng = stream_rng(42, "blob-test", &[]);
        let n = 60;
        let mut feats = Array2::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { -2.0 } else { 2.0 };
            feats[[i, 0]] = center + 0.3 * rng.random_range(-1.0..1.0);
            feats[[i, 1]] = center + 0.3 * rng.random_range(-1.0..1.0);
            labels.push(class);
        }
        let data = Batch::new(feats, labels).unwrap();
        let s = spec(&[2, 2]);
        let p = init_params(&s, 0);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 50,
            batch_size: 16,
            rng_seed: 3,
        };
        let delta = local_train(&p, &data, &cfg).unwrap();
        let mut trained = p.clone();
        trained.add_scaled(&delta, 1.0).unwrap();
        let acc = evaluate_accuracy(&trained, &data).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn full_batch_descent_is_monotone_below_inverse_smoothness() {
        // Logistic regression; cross-entropy smoothness is bounded by the
        // largest squared sample norm, so 1/L steps cannot increase the loss.
        let s = spec(&[2, 2]);
        let mut p = init_params(&s, 11);
        let data = random_batch(&s, 20, 12);
        let l_estimate = data
            .features()
            .axis_iter(Axis(0))
            .map(|row| row.iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max);
        let lr = 1.0 / l_estimate;
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let (loss, grad) = loss_and_grad(&p, &data).unwrap();
            assert!(loss <= prev + 1e-12, "loss increased: {prev} -> {loss}");
            prev = loss;
            p.add_scaled(&grad, -lr).unwrap();
        }
    }

    #[test]
    fn split_and_replace_head_shapes() {
        let s = spec(&[2, 3, 2]);
        let p = init_params(&s, 0);
        let (body, head) = split_body_head(&p);
        assert_eq!(body.len(), 9);
        assert_eq!(head.len(), 8);

        // split then recombine reproduces the original vector
        let mut recombined = body.to_vec();
        recombined.extend_from_slice(head.as_slice().unwrap());
        let back = ParamVector::from_values(s.clone(), recombined).unwrap();
        assert_eq!(back, p);

        let theta = vec![0.5; 3 * 5 + 5];
        let swapped = replace_head(&p, (3, 5), &theta).unwrap();
        assert_eq!(swapped.len(), 9 + 20);
        assert_eq!(swapped.spec().num_classes(), 5);
        assert_eq!(swapped.body_slice(), p.body_slice());

        assert!(matches!(
            replace_head(&p, (4, 5), &vec![0.0; 25]),
            Err(CoreError::ShapeMismatch(_))
        ));
        assert!(matches!(
            replace_head(&p, (3, 5), &vec![0.0; 7]),
            Err(CoreError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn constant_predictor_scores_class_share() {
        let s = spec(&[2, 4]);
        // bias strongly favors class 0
        let mut values = vec![0.0; s.param_count()];
        values[s.param_count() - 4] = 10.0;
        let p = ParamVector::from_values(s.clone(), values).unwrap();
        let feats = Array2::zeros((8, 2));
        let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let test = Batch::new(feats, labels).unwrap();
        assert_abs_diff_eq!(evaluate_accuracy(&p, &test).unwrap(), 0.25);
    }

    #[test]
    fn memorizing_model_scores_one() {
        // One-hot features with an identity head classify their own batch
        // perfectly.
        let s = spec(&[3, 3]);
        let mut values = vec![0.0; s.param_count()];
        values[0] = 5.0; // W[0,0]
        values[4] = 5.0; // W[1,1]
        values[8] = 5.0; // W[2,2]
        let p = ParamVector::from_values(s.clone(), values).unwrap();
        let feats = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let test = Batch::new(feats, vec![0, 1, 2]).unwrap();
        assert_abs_diff_eq!(evaluate_accuracy(&p, &test).unwrap(), 1.0);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let s = spec(&[3, 5, 2]);
        let p = init_params(&s, 21);
        let data = random_batch(&s, 16, 22);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 4,
            batch_size: 5,
            rng_seed: 23,
        };
        let a = local_train(&p, &data, &cfg).unwrap();
        let b = local_train(&p, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn body_forward_matches_manual_composition() {
        let s = spec(&[2, 3, 2]);
        let p = init_params(&s, 4);
        let x = array![[0.3, -0.7], [1.2, 0.5]];
        let reps = body_forward(&p, x.view()).unwrap();
        assert_eq!(reps.dim(), (2, 3));
        // head applied to representations reproduces the full forward pass
        let head_spec = ModelSpec::new(vec![3, 2], Activation::Relu).unwrap();
        let head =
            ParamVector::from_values(head_spec, p.head_slice().to_vec()).unwrap();
        let full = forward(&p, x.view()).logits;
        let via_body = forward(&head, reps.view()).logits;
        for (a, b) in full.iter().zip(via_body.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
