//! Minimal dense network stack: forward pass, softmax, CE/KL losses,
//! backpropagation and minibatch SGD.
//!
//! Parameters are stored as one flat vector. For every layer `l` (in order)
//! the block is the weight matrix `W_l` (`out x in`, row-major) followed by
//! the bias vector `b_l` (`out`). Hidden layers apply the configured
//! activation; the last layer is linear and produces logits.
//!
//! The feature extractor of a classifier is everything up to the penultimate
//! activation; the classification head is the final linear layer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QueenError, Result};

/// Lower bound applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Tolerance on the sum of a confidence vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let spec = NetworkSpec {
            layer_sizes,
            activation,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds `[input, hidden..., output]`.
    pub fn classifier(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, activation, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(QueenError::InvalidInput(
                "a network needs at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(QueenError::InvalidInput("layer sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// Size of the penultimate layer (the feature space).
    pub fn feature_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Offset of layer `l`'s weight block in the flat parameter vector.
    fn layer_offset(&self, layer: usize) -> usize {
        self.layer_sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        NetworkSpec {
            seed,
            ..self.clone()
        }
    }
}

/// A probability vector on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfidenceVector(Vec<f64>);

impl ConfidenceVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_simplex(&probs, SIMPLEX_TOL)?;
        Ok(ConfidenceVector(probs))
    }

    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(validate_simplex(&probs, 1e-6).is_ok(), "{probs:?}");
        ConfidenceVector(probs)
    }

    pub fn uniform(n: usize) -> Self {
        ConfidenceVector(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, class: usize) -> Self {
        let mut v = vec![0.0; n];
        v[class] = 1.0;
        ConfidenceVector(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max_prob(&self) -> f64 {
        self.0[self.argmax()]
    }
}

impl AsRef<[f64]> for ConfidenceVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Lowest index of the maximum entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn validate_simplex(v: &[f64], tol: f64) -> Result<()> {
    if v.is_empty() {
        return Err(QueenError::InvalidInput("empty probability vector".into()));
    }
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(QueenError::InvalidInput(format!(
            "probability vector has negative or non-finite entries: {v:?}"
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(QueenError::InvalidInput(format!(
            "probability vector sums to {sum}"
        )));
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Result<ConfidenceVector> {
    if logits.is_empty() {
        return Err(QueenError::InvalidInput("empty logits".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(QueenError::InvalidInput("non-finite logits".into()));
    }
    Ok(ConfidenceVector(softmax_raw(logits)))
}

fn softmax_raw(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Kldiv,
}

/// `-sum t * ln(max(p, floor))`.
pub fn ce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(QueenError::DimensionMismatch {
            expected: pred.len(),
            actual: target.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| -t * p.max(LOG_FLOOR).ln())
        .sum())
}

/// `sum t * (ln t - ln max(p, floor))`, with `0 ln 0 = 0`.
pub fn kldiv_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(QueenError::DimensionMismatch {
            expected: pred.len(),
            actual: target.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| t * (t.ln() - p.max(LOG_FLOOR).ln()))
        .sum())
}

pub fn loss(kind: LossKind, pred: &[f64], target: &[f64]) -> Result<f64> {
    match kind {
        LossKind::Ce => ce_loss(pred, target),
        LossKind::Kldiv => kldiv_loss(pred, target),
    }
}

/// Gradient of either loss with respect to the logits that produced `probs`.
///
/// Both losses differ only by a target-dependent constant, so they share this
/// gradient. Terms whose probability sits below the log floor are constant and
/// drop out; without clamping this reduces to `probs - target`.
pub fn loss_grad_logits(probs: &[f64], target: &[f64]) -> Vec<f64> {
    let active_mass: f64 = probs
        .iter()
        .zip(target)
        .filter(|(&p, _)| p >= LOG_FLOOR)
        .map(|(_, &t)| t)
        .sum();
    probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let own = if p >= LOG_FLOOR { t } else { 0.0 };
            p * active_mass - own
        })
        .collect()
}

/// Rows of (input, target) pairs stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    input_dim: usize,
    target_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Batch {
    pub fn new(input_dim: usize, target_dim: usize) -> Self {
        Batch {
            input_dim,
            target_dim,
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    /// Adds a row. Targets must lie on the simplex (soft or one-hot).
    pub fn push(&mut self, input: &[f64], target: &[f64]) -> Result<()> {
        if input.len() != self.input_dim {
            return Err(QueenError::DimensionMismatch {
                expected: self.input_dim,
                actual: input.len(),
            });
        }
        if target.len() != self.target_dim {
            return Err(QueenError::DimensionMismatch {
                expected: self.target_dim,
                actual: target.len(),
            });
        }
        validate_simplex(target, 1e-6)?;
        if input.iter().any(|x| !x.is_finite()) {
            return Err(QueenError::InvalidInput("non-finite input".into()));
        }
        self.inputs.extend_from_slice(input);
        self.targets.extend_from_slice(target);
        Ok(())
    }

    pub fn push_label(&mut self, input: &[f64], class: usize) -> Result<()> {
        if class >= self.target_dim {
            return Err(QueenError::UnknownClass {
                class,
                n_classes: self.target_dim,
            });
        }
        let mut target = vec![0.0; self.target_dim];
        target[class] = 1.0;
        self.push(input, &target)
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.target_dim..(i + 1) * self.target_dim]
    }
}

/// Output of a forward pass: logits and the penultimate activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// Per-layer activations kept for backpropagation. `acts[0]` is the input,
/// `acts[l + 1]` the output of layer `l` (post-activation; logits last).
#[derive(Debug, Clone)]
pub struct Cache {
    acts: Vec<Vec<f64>>,
}

impl Cache {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("non-empty")
    }

    pub fn hidden(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: NetworkSpec,
    params: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights drawn from the spec's seed, zero biases.
    pub fn init(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for w in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Mlp { spec, params })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let params = vec![0.0; spec.param_count()];
        Ok(Mlp { spec, params })
    }

    pub fn from_parameters(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(QueenError::DimensionMismatch {
                expected: spec.param_count(),
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(QueenError::InvalidInput("non-finite parameter".into()));
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(QueenError::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    /// Applies layer `l` to `input`, writing pre-activations into `out`.
    fn affine(&self, layer: usize, input: &[f64], out: &mut Vec<f64>) {
        let n_in = self.spec.layer_sizes[layer];
        let n_out = self.spec.layer_sizes[layer + 1];
        let off = self.spec.layer_offset(layer);
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        out.clear();
        out.extend(
            w.chunks_exact(n_in)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()),
        );
    }

    pub fn forward_cache(&self, input: &[f64]) -> Result<Cache> {
        self.check_input(input)?;
        let n_layers = self.spec.n_layers();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for l in 0..n_layers {
            let mut out = Vec::new();
            self.affine(l, &acts[l], &mut out);
            if l + 1 < n_layers {
                let act = self.spec.activation;
                for v in &mut out {
                    *v = act.apply(*v);
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(QueenError::NonFinite { layer: l });
            }
            acts.push(out);
        }
        Ok(Cache { acts })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Forward> {
        let mut cache = self.forward_cache(input)?;
        let logits = cache.acts.pop().expect("non-empty");
        let hidden = cache.acts.pop().expect("non-empty");
        Ok(Forward { logits, hidden })
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.logits)
    }

    pub fn predict_proba(&self, input: &[f64]) -> Result<ConfidenceVector> {
        softmax(&self.logits(input)?)
    }

    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(input)?))
    }

    /// The feature extractor: the penultimate activation.
    pub fn features(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.hidden)
    }

    /// The classification head: final linear layer applied to a feature.
    pub fn head_logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.feature_dim() {
            return Err(QueenError::DimensionMismatch {
                expected: self.feature_dim(),
                actual: feature.len(),
            });
        }
        let mut out = Vec::new();
        self.affine(self.spec.n_layers() - 1, feature, &mut out);
        Ok(out)
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the network output) and
    /// accumulates `scale * dL/dparams` into `grad_params`. Returns the
    /// gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &Cache,
        grad_out: &[f64],
        scale: f64,
        grad_params: &mut [f64],
    ) -> Vec<f64> {
        let n_layers = self.spec.n_layers();
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let n_in = self.spec.layer_sizes[l];
            let n_out = self.spec.layer_sizes[l + 1];
            let off = self.spec.layer_offset(l);
            let input = &cache.acts[l];
            {
                let (gw, gb) =
                    grad_params[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for (o, d) in delta.iter().enumerate() {
                    let d = d * scale;
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (p, a) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * a;
                }
            }
            if l > 0 {
                let act = self.spec.activation;
                for (p, y) in prev.iter_mut().zip(&cache.acts[l]) {
                    *p *= act.derivative_from_output(*y);
                }
            }
            delta = prev;
        }
        delta
    }

    /// Mean batch loss and its gradient with respect to the parameters.
    pub fn loss_and_grad(&self, batch: &Batch, kind: LossKind) -> Result<(f64, Vec<f64>)> {
        let idx: Vec<usize> = (0..batch.len()).collect();
        self.loss_and_grad_indices(batch, &idx, kind)
    }

    fn loss_and_grad_indices(
        &self,
        batch: &Batch,
        indices: &[usize],
        kind: LossKind,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch)?;
        if indices.is_empty() {
            return Err(QueenError::InvalidInput("empty batch".into()));
        }
        let scale = 1.0 / indices.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for &i in indices {
            let cache = self.forward_cache(batch.input(i))?;
            let probs = softmax_raw(cache.logits());
            let target = batch.target(i);
            total += loss(kind, &probs, target)?;
            let g = loss_grad_logits(&probs, target);
            self.backward(&cache, &g, scale, &mut grad);
        }
        Ok((total * scale, grad))
    }

    pub fn grad(&self, batch: &Batch, kind: LossKind) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(batch, kind)?.1)
    }

    pub fn mean_loss(&self, batch: &Batch, kind: LossKind) -> Result<f64> {
        self.check_batch(batch)?;
        let mut total = 0.0;
        for i in 0..batch.len() {
            let probs = self.predict_proba(batch.input(i))?;
            total += loss(kind, probs.as_slice(), batch.target(i))?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Gradient of `loss(softmax(f(x)), target)` with respect to `x`.
    pub fn input_grad(&self, input: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cache(input)?;
        let probs = softmax_raw(cache.logits());
        let g = loss_grad_logits(&probs, target);
        let mut scratch = vec![0.0; self.params.len()];
        Ok(self.backward(&cache, &g, 0.0, &mut scratch))
    }

    /// Parameter gradient of `loss(softmax(f(x)), target)` for a raw target
    /// that only needs to sum to one (entries may be negative).
    pub fn param_grad_raw(&self, input: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        if target.len() != self.output_dim() {
            return Err(QueenError::DimensionMismatch {
                expected: self.output_dim(),
                actual: target.len(),
            });
        }
        let cache = self.forward_cache(input)?;
        let probs = softmax_raw(cache.logits());
        let g = loss_grad_logits(&probs, target);
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&cache, &g, 1.0, &mut grad);
        Ok(grad)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.input_dim() != self.input_dim() {
            return Err(QueenError::DimensionMismatch {
                expected: self.input_dim(),
                actual: batch.input_dim(),
            });
        }
        if batch.target_dim() != self.output_dim() {
            return Err(QueenError::DimensionMismatch {
                expected: self.output_dim(),
                actual: batch.target_dim(),
            });
        }
        Ok(())
    }

    pub fn accuracy(&self, inputs: impl IntoIterator<Item = (Vec<f64>, usize)>) -> Result<f64> {
        let mut n = 0usize;
        let mut hit = 0usize;
        for (x, y) in inputs {
            n += 1;
            if self.predict(&x)? == y {
                hit += 1;
            }
        }
        if n == 0 {
            return Err(QueenError::InvalidInput("empty evaluation set".into()));
        }
        Ok(hit as f64 / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f64,
    /// Halve the learning rate every this many epochs.
    #[serde(default)]
    pub lr_halving_every: Option<usize>,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            momentum: 0.9,
            lr_halving_every: None,
            loss: LossKind::Ce,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(QueenError::InvalidInput("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(QueenError::InvalidInput("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(QueenError::InvalidInput("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(QueenError::InvalidInput(
                "momentum must be in [0, 1)".into(),
            ));
        }
        if self.lr_halving_every == Some(0) {
            return Err(QueenError::InvalidInput(
                "lr_halving_every must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_halving_every {
            Some(every) => self.lr * 0.5f64.powi((epoch / every) as i32),
            None => self.lr,
        }
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD (with optional momentum) from the spec's initialization.
pub fn sgd_train(spec: &NetworkSpec, data: &Batch, cfg: &TrainConfig) -> Result<(Mlp, TrainTrace)> {
    let model = Mlp::init(spec.clone())?;
    sgd_train_from(model, data, cfg)
}

/// Continues training an existing model.
pub fn sgd_train_from(
    mut model: Mlp,
    data: &Batch,
    cfg: &TrainConfig,
) -> Result<(Mlp, TrainTrace)> {
    cfg.validate()?;
    model.check_batch(data)?;
    if data.is_empty() {
        return Err(QueenError::InvalidInput("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = vec![0.0; model.params.len()];
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (l, g) =
                model
                    .loss_and_grad_indices(data, chunk, cfg.loss)
                    .map_err(|e| match e {
                        QueenError::NonFinite { .. } => QueenError::Diverged { epoch },
                        other => other,
                    })?;
            epoch_loss += l * chunk.len() as f64;
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&g) {
                *v = cfg.momentum * *v - lr * g;
                *p += *v;
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(QueenError::Diverged { epoch });
        }
        trace.epoch_losses.push(mean);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize], seed: u64) -> NetworkSpec {
        NetworkSpec::new(sizes.to_vec(), Activation::Tanh, seed).unwrap()
    }

    #[test]
    fn identity_net_passes_input_through() {
        let s = spec(&[2, 2], 0);
        let m = Mlp::from_parameters(s, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let f = m.forward(&[1.0, 0.0]).unwrap();
        assert_eq!(f.logits, vec![1.0, 0.0]);
        assert_eq!(f.hidden, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let m = Mlp::zeros(spec(&[3, 5, 4], 1)).unwrap();
        let p = m.predict_proba(&[0.3, -2.0, 7.0]).unwrap();
        assert_eq!(m.logits(&[0.3, -2.0, 7.0]).unwrap(), vec![0.0; 4]);
        for &q in p.as_slice() {
            assert!((q - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = Mlp::init(spec(&[3, 4, 2], 1)).unwrap();
        assert!(matches!(
            m.forward(&[1.0, 2.0]),
            Err(QueenError::DimensionMismatch {
                expected: 3,
                actual: 2
            })
        ));
    }

    #[test]
    fn spec_needs_two_layers_and_positive_sizes() {
        assert!(NetworkSpec::new(vec![3], Activation::Relu, 0).is_err());
        assert!(NetworkSpec::new(vec![3, 0, 2], Activation::Relu, 0).is_err());
        assert_eq!(spec(&[3, 4, 2], 0).param_count(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Mlp::init(spec(&[5, 7, 3], 42)).unwrap();
        let b = Mlp::init(spec(&[5, 7, 3], 42)).unwrap();
        let c = Mlp::init(spec(&[5, 7, 3], 43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.params()[..35].iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        // exp(-1000) underflows to zero after max subtraction.
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn ce_examples() {
        let l = ce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l.abs() < 1e-15);
        let l = ce_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = ce_loss(&[0.2, 0.8], &[0.3, 0.7]).unwrap();
        let oracle = -(0.3 * 0.2f64.ln() + 0.7 * 0.8f64.ln());
        assert!((l - oracle).abs() < 1e-15);
        assert!(ce_loss(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn kldiv_is_zero_at_target() {
        let l = kldiv_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert!(l.abs() < 1e-15);
        let l = kldiv_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logit_gradient_is_softmax_minus_target() {
        let p = softmax(&[0.3, -1.2, 2.0]).unwrap();
        let t = [0.2, 0.5, 0.3];
        let g = loss_grad_logits(p.as_slice(), &t);
        for i in 0..3 {
            assert_eq!(g[i], p.as_slice()[i] - t[i]);
        }
    }

    #[test]
    fn single_layer_ce_grad_matches_identity() {
        // With a linear network the gradient w.r.t. biases equals dL/dlogits.
        let m = Mlp::init(spec(&[3, 4], 9)).unwrap();
        let x = [0.5, -0.3, 1.2];
        let mut b = Batch::new(3, 4);
        b.push_label(&x, 2).unwrap();
        let g = m.grad(&b, LossKind::Ce).unwrap();
        let p = m.predict_proba(&x).unwrap();
        let expect: Vec<f64> = p
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &q)| q - if i == 2 { 1.0 } else { 0.0 })
            .collect();
        for i in 0..4 {
            assert!((g[12 + i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_vanishes_when_prediction_equals_target() {
        let m = Mlp::init(spec(&[3, 5, 3], 4)).unwrap();
        let mut b = Batch::new(3, 3);
        for x in [[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]] {
            let p = m.predict_proba(&x).unwrap();
            b.push(&x, p.as_slice()).unwrap();
        }
        for kind in [LossKind::Ce, LossKind::Kldiv] {
            let g = m.grad(&b, kind).unwrap();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 1e-8, "{norm}");
        }
    }

    #[test]
    fn batch_rejects_bad_targets() {
        let mut b = Batch::new(2, 2);
        assert!(b.push(&[0.0, 0.0], &[0.6, 0.6]).is_err());
        assert!(b.push(&[0.0, 0.0], &[-0.1, 1.1]).is_err());
        assert!(b.push(&[0.0], &[0.5, 0.5]).is_err());
        assert!(b.push_label(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn train_rejects_zero_epochs() {
        let s = spec(&[2, 2], 0);
        let mut b = Batch::new(2, 2);
        b.push_label(&[0.0, 1.0], 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(sgd_train(&s, &b, &cfg).is_err());
    }

    #[test]
    fn train_detects_divergence() {
        let s = NetworkSpec::new(vec![1, 2], Activation::Tanh, 3).unwrap();
        let mut b = Batch::new(1, 2);
        for i in 0..16 {
            b.push_label(&[4.0 * (i as f64 - 7.5)], i % 2).unwrap();
        }
        let cfg = TrainConfig {
            epochs: 3,
            lr: f64::MAX,
            ..TrainConfig::default()
        };
        let err = sgd_train(&s, &b, &cfg).unwrap_err();
        assert!(matches!(err, QueenError::Diverged { .. }), "{err}");
    }

    #[test]
    fn lr_halving_schedule() {
        let cfg = TrainConfig {
            lr: 0.01,
            lr_halving_every: Some(20),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(19), 0.01);
        assert_eq!(cfg.lr_at(20), 0.005);
        assert_eq!(cfg.lr_at(45), 0.0025);
    }
}
