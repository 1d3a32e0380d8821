//! Falsified answers: piracy simulation with a shadow ensemble, gradient
//! reverse, feature perturbation, and the label-only / rounding baselines.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{QueenError, Result};
use crate::nn::{
    argmax, sgd_train, softmax, Activation, ConfidenceVector, Mlp, NetworkSpec, TrainConfig,
};
use crate::sensitivity::{ClassProfile, Condition, QueryView};
use crate::simplex::{optimize_valid_softmax, OptimizerConfig};
use crate::snapshot::{load_model, save_model, MODEL_MAGIC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShadowConfig {
    pub n_models: usize,
    /// Hidden-layer layouts, cycled over the members.
    pub hidden_layouts: Vec<Vec<usize>>,
    pub activation: Activation,
    pub train: TrainConfig,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig {
            n_models: 10,
            hidden_layouts: vec![vec![32], vec![64], vec![32, 32]],
            activation: Activation::Relu,
            train: TrainConfig {
                epochs: 5,
                lr: 0.01,
                batch_size: 32,
                momentum: 0.0,
                lr_halving_every: None,
                loss: crate::nn::LossKind::Ce,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowMember {
    pub model: Mlp,
    /// Indices into the training set this member was trained on.
    pub subset: Vec<usize>,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowEnsemble {
    pub members: Vec<ShadowMember>,
}

/// Splits every class's indices evenly (round-robin after shuffling) into
/// `n` disjoint parts.
pub fn stratified_split(train: &Dataset, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(QueenError::InvalidInput(
            "need at least one shadow model".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = vec![Vec::new(); n];
    for class in 0..train.n_classes() {
        let mut idx = train.class_indices(class);
        if idx.len() < n {
            return Err(QueenError::InvalidInput(format!(
                "class {class} has {} samples, fewer than {n} shadow subsets",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            parts[k % n].push(i);
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

pub fn train_shadows(train: &Dataset, cfg: &ShadowConfig, seed: u64) -> Result<ShadowEnsemble> {
    if cfg.hidden_layouts.is_empty() {
        return Err(QueenError::InvalidInput(
            "no shadow architectures given".into(),
        ));
    }
    let parts = stratified_split(train, cfg.n_models, seed)?;
    let mut members = Vec::with_capacity(parts.len());
    for (m, subset) in parts.into_iter().enumerate() {
        let member_seed = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(m as u64 + 1);
        let layout = &cfg.hidden_layouts[m % cfg.hidden_layouts.len()];
        let spec = NetworkSpec::classifier(
            train.dim(),
            layout,
            train.n_classes(),
            cfg.activation,
            member_seed,
        )?;
        let data = train.subset(&subset).to_batch();
        let tc = TrainConfig {
            seed: member_seed,
            ..cfg.train.clone()
        };
        let (model, _) = sgd_train(&spec, &data, &tc)?;
        members.push(ShadowMember {
            model,
            subset,
            train_seed: member_seed,
        });
    }
    Ok(ShadowEnsemble { members })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnsembleManifest {
    members: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    train_seed: u64,
    subset: Vec<usize>,
}

impl ShadowEnsemble {
    /// An ensemble of given models (no training split information).
    pub fn from_models(models: Vec<Mlp>) -> Self {
        ShadowEnsemble {
            members: models
                .into_iter()
                .map(|model| ShadowMember {
                    model,
                    subset: Vec::new(),
                    train_seed: 0,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Indices of the `k` members averaged for this draw.
    pub fn draw(&self, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if k == 0 || k > self.members.len() {
            return Err(QueenError::InvalidInput(format!(
                "draw size {k} outside 1..={}",
                self.members.len()
            )));
        }
        if k == self.members.len() {
            return Ok((0..k).collect());
        }
        Ok(index::sample(rng, self.members.len(), k).into_vec())
    }

    /// Mean softmax of the selected members.
    pub fn mean_softmax(&self, x: &[f64], members: &[usize]) -> Result<ConfidenceVector> {
        let mut acc: Option<Vec<f64>> = None;
        for &m in members {
            let p = self.members[m].model.predict_proba(x)?;
            match &mut acc {
                None => acc = Some(p.into_vec()),
                Some(a) => {
                    for (s, v) in a.iter_mut().zip(p.as_slice()) {
                        *s += v;
                    }
                }
            }
        }
        let mut a = acc.ok_or_else(|| QueenError::InvalidInput("empty member draw".into()))?;
        let n = members.len() as f64;
        for v in &mut a {
            *v /= n;
        }
        Ok(ConfidenceVector::new_unchecked(a))
    }

    /// Simulated piracy softmax: mean over a uniformly drawn size-`k` subset.
    pub fn estimate_piracy_softmax(
        &self,
        x: &[f64],
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConfidenceVector> {
        let draw = self.draw(k, rng)?;
        self.mean_softmax(x, &draw)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            let file = format!("shadow_{i:03}.qnn");
            save_model(&m.model, MODEL_MAGIC, &dir.join(&file))?;
            entries.push(ManifestEntry {
                file,
                train_seed: m.train_seed,
                subset: m.subset.clone(),
            });
        }
        let manifest = EnsembleManifest { members: entries };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: EnsembleManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let members = manifest
            .members
            .into_iter()
            .map(|e| {
                Ok(ShadowMember {
                    model: load_model(&dir.join(&e.file), MODEL_MAGIC)?,
                    subset: e.subset,
                    train_seed: e.train_seed,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ShadowEnsemble { members })
    }
}

/// `2 * simulated - honest`; sums to one but may leave the simplex.
pub fn reverse_target(honest: &ConfidenceVector, simulated: &ConfidenceVector) -> Result<Vec<f64>> {
    if honest.len() != simulated.len() {
        return Err(QueenError::DimensionMismatch {
            expected: honest.len(),
            actual: simulated.len(),
        });
    }
    Ok(honest
        .as_slice()
        .iter()
        .zip(simulated.as_slice())
        .map(|(y, s)| 2.0 * s - y)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum FpStep {
    /// Fixed step length in feature space.
    Absolute(f64),
    /// Fraction of the initial distance to the target center.
    Relative(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub fp_step: FpStep,
    pub fp_max_iters: usize,
    pub optimizer: OptimizerConfig,
    /// Shadow members averaged per reversed query.
    pub draw_size: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            fp_step: FpStep::Relative(0.01),
            fp_max_iters: 1000,
            optimizer: OptimizerConfig::default(),
            draw_size: 3,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let step_ok = match self.fp_step {
            FpStep::Absolute(e) | FpStep::Relative(e) => e > 0.0 && e.is_finite(),
        };
        if !step_ok || self.fp_max_iters == 0 || self.draw_size == 0 {
            return Err(QueenError::InvalidInput(
                "perturbation step, iteration cap and draw size must be positive".into(),
            ));
        }
        if self.optimizer.iters == 0 || !(self.optimizer.lr > 0.0) || !(self.optimizer.tol > 0.0) {
            return Err(QueenError::InvalidInput(
                "optimizer settings must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePerturbation {
    pub probs: ConfidenceVector,
    pub target_class: usize,
    pub accepted_steps: usize,
    /// The iteration cap was reached before the label would have flipped.
    pub capped: bool,
    pub final_feature: Vec<f64>,
}

/// Walks the feature toward the most distant class center in steps, keeping
/// the last position whose head prediction is still the original label.
pub fn feature_perturb(
    feature: &[f64],
    protectee: &Mlp,
    profiles: &[ClassProfile],
    cfg: &PerturbationConfig,
) -> Result<FeaturePerturbation> {
    let label = argmax(&protectee.head_logits(feature)?);
    let distance = |c: &ClassProfile| -> f64 {
        c.center_feature
            .iter()
            .zip(feature)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (target_class, far) = profiles.iter().map(|p| (p.class, distance(p))).fold(
        (usize::MAX, f64::NEG_INFINITY),
        |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        },
    );
    if target_class == usize::MAX {
        return Err(QueenError::InvalidInput("no class profiles".into()));
    }
    let mut u = feature.to_vec();
    let mut accepted_steps = 0;
    let mut capped = false;
    if far > 0.0 {
        let center = &profiles[target_class].center_feature;
        let dir: Vec<f64> = center
            .iter()
            .zip(feature)
            .map(|(c, x)| (c - x) / far)
            .collect();
        let eps = match cfg.fp_step {
            FpStep::Absolute(e) => e,
            FpStep::Relative(f) => f * far,
        };
        capped = true;
        for _ in 0..cfg.fp_max_iters {
            let next: Vec<f64> = u.iter().zip(&dir).map(|(a, d)| a + eps * d).collect();
            if argmax(&protectee.head_logits(&next)?) == label {
                u = next;
                accepted_steps += 1;
            } else {
                capped = false;
                break;
            }
        }
    }
    let probs = softmax(&protectee.head_logits(&u)?)?;
    Ok(FeaturePerturbation {
        probs,
        target_class,
        accepted_steps,
        capped,
        final_feature: u,
    })
}

/// Builds a valid confidence vector pointing along `2 * simulated - honest`.
pub fn gradient_reverse(
    honest: &ConfidenceVector,
    simulated: &ConfidenceVector,
    cfg: &OptimizerConfig,
) -> Result<ConfidenceVector> {
    let raw = reverse_target(honest, simulated)?;
    Ok(optimize_valid_softmax(&raw, cfg).probs)
}

/// Answer for a query given its condition. Recording for condition C is the
/// registry's job; the answer itself is the honest softmax.
#[allow(clippy::too_many_arguments)]
pub fn perturb_output(
    x: &[f64],
    view: &QueryView,
    condition: Condition,
    protectee: &Mlp,
    ensemble: &ShadowEnsemble,
    profiles: &[ClassProfile],
    cfg: &PerturbationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ConfidenceVector> {
    match condition {
        Condition::A => Ok(feature_perturb(&view.feature, protectee, profiles, cfg)?.probs),
        Condition::B => {
            let simulated = ensemble.estimate_piracy_softmax(x, cfg.draw_size, rng)?;
            gradient_reverse(&view.probs, &simulated, &cfg.optimizer)
        }
        Condition::C | Condition::D => Ok(view.probs.clone()),
    }
}

/// One-hot at the argmax (lowest index on ties).
pub fn baseline_label_only(probs: &ConfidenceVector) -> ConfidenceVector {
    ConfidenceVector::one_hot(probs.len(), probs.argmax())
}

/// Rounds every entry to one decimal and moves the rounding residual onto the
/// largest entry. If that would go negative the rounded vector is rescaled
/// instead.
pub fn baseline_rounding(probs: &ConfidenceVector) -> ConfidenceVector {
    let rounded: Vec<f64> = probs
        .as_slice()
        .iter()
        .map(|p| (p * 10.0).round() / 10.0)
        .collect();
    let sum: f64 = rounded.iter().sum();
    let residual = 1.0 - sum;
    if residual.abs() < 1e-12 {
        return ConfidenceVector::new_unchecked(rounded);
    }
    let top = argmax(&rounded);
    if rounded[top] + residual >= 0.0 {
        let mut out = rounded;
        out[top] += residual;
        return ConfidenceVector::new_unchecked(out);
    }
    ConfidenceVector::new_unchecked(rounded.iter().map(|v| v / sum).collect())
}
