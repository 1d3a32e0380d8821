//! Mapping network from the protectee's feature space to 2D, trained with the
//! supervised contrastive loss.
//!
//! Inside the loss every 2D feature is L2-normalized before inner products
//! are taken; the raw (unnormalized) output is what the sensitivity geometry
//! uses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{QueenError, Result};
use crate::nn::{Activation, Cache, Mlp, NetworkSpec, TrainTrace};

/// Norm floor used when normalizing features inside the loss.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperSpec {
    pub input_dim: usize,
    /// Widths of the three hidden layers (four dense layers in total).
    pub hidden: [usize; 3],
    pub activation: Activation,
    pub temperature: f64,
    pub seed: u64,
}

impl MapperSpec {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        MapperSpec {
            input_dim,
            hidden: [64, 32, 16],
            activation: Activation::Relu,
            temperature: 0.1,
            seed,
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(QueenError::InvalidInput("temperature must be > 0".into()));
        }
        let mut sizes = vec![self.input_dim];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(2);
        NetworkSpec::new(sizes, self.activation, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature2D {
    pub z: [f64; 2],
    pub label: usize,
}

impl Feature2D {
    pub fn new(z: [f64; 2], label: usize) -> Self {
        Feature2D { z, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupConLoss {
    /// Sum over anchors with at least one positive.
    pub value: f64,
    /// Anchors without a same-label partner in the batch.
    pub skipped: usize,
}

impl SupConLoss {
    pub fn anchors(&self, batch_len: usize) -> usize {
        batch_len - self.skipped
    }
}

fn normalize(z: [f64; 2]) -> ([f64; 2], f64) {
    let n = (z[0] * z[0] + z[1] * z[1]).sqrt().max(NORM_FLOOR);
    ([z[0] / n, z[1] / n], n)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Supervised contrastive loss of a labeled batch (positives are the other
/// samples sharing the anchor's label; the mean over positives sits inside
/// the logarithm).
pub fn supcon_loss(features: &[Feature2D], temperature: f64) -> Result<SupConLoss> {
    Ok(supcon_loss_and_grad(features, temperature)?.0)
}

/// Loss together with its gradient with respect to each raw 2D feature.
pub fn supcon_loss_and_grad(
    features: &[Feature2D],
    temperature: f64,
) -> Result<(SupConLoss, Vec<[f64; 2]>)> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(QueenError::InvalidInput("temperature must be > 0".into()));
    }
    let n = features.len();
    if n < 2 {
        return Err(QueenError::InvalidInput(
            "batch needs at least 2 features".into(),
        ));
    }
    if features
        .iter()
        .any(|f| !f.z[0].is_finite() || !f.z[1].is_finite())
    {
        return Err(QueenError::InvalidInput("non-finite 2D feature".into()));
    }
    let normed: Vec<([f64; 2], f64)> = features.iter().map(|f| normalize(f.z)).collect();
    let unit = |i: usize| normed[i].0;
    let sim = |i: usize, j: usize| {
        let (a, b) = (unit(i), unit(j));
        (a[0] * b[0] + a[1] * b[1]) / temperature
    };

    let mut value = 0.0;
    let mut skipped = 0;
    // Gradient w.r.t. the unit vectors.
    let mut g_unit = vec![[0.0f64; 2]; n];
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&o| o != i && features[o].label == features[i].label)
            .collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        let others = (0..n).filter(|&a| a != i);
        let lse_all = log_sum_exp(others.clone().map(|a| sim(i, a)));
        let lse_pos = log_sum_exp(positives.iter().map(|&o| sim(i, o)));
        value += -(lse_pos - (positives.len() as f64).ln() - lse_all);

        // dL_i/ds_ij = softmax_all(j) - [j in O(i)] softmax_pos(j)
        for j in others {
            let s = sim(i, j);
            let mut w = (s - lse_all).exp();
            if features[j].label == features[i].label {
                w -= (s - lse_pos).exp();
            }
            let (ui, uj) = (unit(i), unit(j));
            for k in 0..2 {
                g_unit[i][k] += w * uj[k] / temperature;
                g_unit[j][k] += w * ui[k] / temperature;
            }
        }
    }
    if skipped == n {
        return Err(QueenError::NoPositivePairs);
    }
    let grads = g_unit
        .iter()
        .zip(&normed)
        .map(|(g, (u, norm))| {
            let dot = g[0] * u[0] + g[1] * u[1];
            [(g[0] - u[0] * dot) / norm, (g[1] - u[1] * dot) / norm]
        })
        .collect();
    Ok((SupConLoss { value, skipped }, grads))
}

/// The trained mapping network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mapper {
    net: Mlp,
    temperature: f64,
}

impl Mapper {
    pub fn from_network(net: Mlp, temperature: f64) -> Result<Self> {
        if net.output_dim() != 2 {
            return Err(QueenError::DimensionMismatch {
                expected: 2,
                actual: net.output_dim(),
            });
        }
        Ok(Mapper { net, temperature })
    }

    pub fn untrained(spec: &MapperSpec) -> Result<Self> {
        Mapper::from_network(Mlp::init(spec.network_spec()?)?, spec.temperature)
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn map(&self, feature: &[f64]) -> Result<[f64; 2]> {
        let z = self.net.logits(feature)?;
        Ok([z[0], z[1]])
    }

    pub fn map_feature(&self, feature: &[f64], label: usize) -> Result<Feature2D> {
        Ok(Feature2D::new(self.map(feature)?, label))
    }

    pub fn map_batch(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Feature2D>> {
        if features.len() != labels.len() {
            return Err(QueenError::DimensionMismatch {
                expected: features.len(),
                actual: labels.len(),
            });
        }
        features
            .iter()
            .zip(labels)
            .map(|(f, &y)| self.map_feature(f, y))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_halving_every: Option<usize>,
    pub seed: u64,
}

impl Default for MapperTrainConfig {
    fn default() -> Self {
        MapperTrainConfig {
            epochs: 100,
            lr: 0.01,
            batch_size: 128,
            momentum: 0.9,
            lr_halving_every: Some(20),
            seed: 0,
        }
    }
}

/// Trains the mapper on the frozen extractor's training features. The
/// per-batch objective is the loss averaged over contributing anchors.
pub fn train_mapper(
    extractor: &Mlp,
    train: &Dataset,
    spec: &MapperSpec,
    cfg: &MapperTrainConfig,
) -> Result<(Mapper, TrainTrace)> {
    if cfg.epochs == 0 {
        return Err(QueenError::InvalidInput("epochs must be >= 1".into()));
    }
    if !(cfg.lr > 0.0) || cfg.batch_size < 2 {
        return Err(QueenError::InvalidInput(
            "mapper training needs lr > 0 and batch size >= 2".into(),
        ));
    }
    if spec.input_dim != extractor.feature_dim() {
        return Err(QueenError::DimensionMismatch {
            expected: extractor.feature_dim(),
            actual: spec.input_dim,
        });
    }
    let features: Vec<Vec<f64>> = train
        .iter()
        .map(|(x, _)| extractor.features(x))
        .collect::<Result<_>>()?;
    let labels = train.labels();

    let mut net = Mlp::init(spec.network_spec()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut velocity = vec![0.0; net.params().len()];
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        let lr = match cfg.lr_halving_every {
            Some(every) if every > 0 => cfg.lr * 0.5f64.powi((epoch / every) as i32),
            _ => cfg.lr,
        };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_anchors = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let caches: Vec<Cache> = chunk
                .iter()
                .map(|&i| net.forward_cache(&features[i]))
                .collect::<Result<_>>()
                .map_err(|_| QueenError::Diverged { epoch })?;
            let batch: Vec<Feature2D> = caches
                .iter()
                .zip(chunk)
                .map(|(c, &i)| Feature2D::new([c.logits()[0], c.logits()[1]], labels[i]))
                .collect();
            let (loss, grads) = match supcon_loss_and_grad(&batch, spec.temperature) {
                Ok(v) => v,
                Err(QueenError::NoPositivePairs) => continue,
                Err(e) => return Err(e),
            };
            let anchors = loss.anchors(batch.len());
            if !loss.value.is_finite() {
                return Err(QueenError::Diverged { epoch });
            }
            epoch_loss += loss.value;
            epoch_anchors += anchors;
            let scale = 1.0 / anchors as f64;
            let mut grad = vec![0.0; net.params().len()];
            for (cache, g) in caches.iter().zip(&grads) {
                net.backward(cache, g, scale, &mut grad);
            }
            for ((p, v), g) in net.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - lr * g;
                *p += *v;
            }
        }
        let mean = if epoch_anchors > 0 {
            epoch_loss / epoch_anchors as f64
        } else {
            0.0
        };
        if !mean.is_finite() || net.params().iter().any(|p| !p.is_finite()) {
            return Err(QueenError::Diverged { epoch });
        }
        trace.epoch_losses.push(mean);
    }
    Ok((Mapper::from_network(net, spec.temperature)?, trace))
}

/// Cluster tightness of labeled 2D points.
#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    /// Mean distance of each class's points to their own center.
    pub intra: Vec<f64>,
    pub centers: Vec<[f64; 2]>,
    /// Smallest distance between two distinct class centers.
    pub min_center_distance: f64,
}

impl Separation {
    pub fn compute(points: &[Feature2D], n_classes: usize) -> Self {
        let mut sums = vec![[0.0f64; 2]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for p in points {
            sums[p.label][0] += p.z[0];
            sums[p.label][1] += p.z[1];
            counts[p.label] += 1;
        }
        let centers: Vec<[f64; 2]> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| {
                let c = c.max(1) as f64;
                [s[0] / c, s[1] / c]
            })
            .collect();
        let mut intra = vec![0.0; n_classes];
        for p in points {
            let c = centers[p.label];
            intra[p.label] += dist(p.z, c) / counts[p.label] as f64;
        }
        let mut min_center_distance = f64::INFINITY;
        for a in 0..n_classes {
            for b in a + 1..n_classes {
                if counts[a] > 0 && counts[b] > 0 {
                    min_center_distance = min_center_distance.min(dist(centers[a], centers[b]));
                }
            }
        }
        Separation {
            intra,
            centers,
            min_center_distance,
        }
    }

    /// Every class's mean radius is below `ratio` times the closest pair of
    /// distinct centers.
    pub fn is_separated(&self, ratio: f64) -> bool {
        self.intra
            .iter()
            .all(|&d| d < ratio * self.min_center_distance)
    }

    pub fn mean_intra(&self) -> f64 {
        self.intra.iter().sum::<f64>() / self.intra.len() as f64
    }

    /// Mean pairwise distance between distinct class centers.
    pub fn mean_center_distance(&self) -> f64 {
        let k = self.centers.len();
        let mut total = 0.0;
        let mut pairs = 0;
        for a in 0..k {
            for b in a + 1..k {
                total += dist(self.centers[a], self.centers[b]);
                pairs += 1;
            }
        }
        total / pairs.max(1) as f64
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
