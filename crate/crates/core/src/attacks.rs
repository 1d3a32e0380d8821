//! Model-extraction harness: budgeted querying of an oracle, piracy-model
//! training on the collected answers, and scoring.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{QueenError, Result};
use crate::nn::{sgd_train, Activation, Batch, ConfidenceVector, Mlp, NetworkSpec, TrainConfig};
use crate::perturbation::{baseline_label_only, baseline_rounding};
use crate::sensitivity::Condition;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleAnswer {
    pub probs: ConfidenceVector,
    /// Exposed only by instrumented defended oracles.
    pub condition: Option<Condition>,
}

/// Anything that answers a query vector with a confidence vector.
pub trait Oracle {
    fn answer(&mut self, x: &[f64]) -> Result<OracleAnswer>;
}

impl<O: Oracle + ?Sized> Oracle for &mut O {
    fn answer(&mut self, x: &[f64]) -> Result<OracleAnswer> {
        (**self).answer(x)
    }
}

/// The undefended protectee.
impl Oracle for Mlp {
    fn answer(&mut self, x: &[f64]) -> Result<OracleAnswer> {
        Ok(OracleAnswer {
            probs: self.predict_proba(x)?,
            condition: None,
        })
    }
}

/// Baseline defense: return only the one-hot predicted label.
pub struct LabelOnlyDefense<O>(pub O);

impl<O: Oracle> Oracle for LabelOnlyDefense<O> {
    fn answer(&mut self, x: &[f64]) -> Result<OracleAnswer> {
        let a = self.0.answer(x)?;
        Ok(OracleAnswer {
            probs: baseline_label_only(&a.probs),
            condition: a.condition,
        })
    }
}

/// Baseline defense: round confidences to one decimal.
pub struct RoundingDefense<O>(pub O);

impl<O: Oracle> Oracle for RoundingDefense<O> {
    fn answer(&mut self, x: &[f64]) -> Result<OracleAnswer> {
        let a = self.0.answer(x)?;
        Ok(OracleAnswer {
            probs: baseline_rounding(&a.probs),
            condition: a.condition,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Direct,
    LabelOnly,
    S4l,
    Smoothing,
    JbdaTr,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Direct,
        AttackKind::LabelOnly,
        AttackKind::S4l,
        AttackKind::Smoothing,
        AttackKind::JbdaTr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Direct => "direct",
            AttackKind::LabelOnly => "label_only",
            AttackKind::S4l => "s4l",
            AttackKind::Smoothing => "smoothing",
            AttackKind::JbdaTr => "jbda_tr",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = QueenError;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| QueenError::InvalidInput(format!("unknown attack kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub budget: usize,
    /// Perturbed copies averaged per sample (s4l, smoothing).
    pub n_augments: usize,
    pub fgsm_eta: f64,
    pub seed_size: usize,
    pub jbda_rounds: usize,
    pub augment: AugmentParams,
    pub piracy_hidden: Vec<usize>,
    pub piracy_activation: Activation,
    /// Piracy training; `train.loss` selects CE or KL divergence.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Direct,
            budget: 12_000,
            n_augments: 4,
            fgsm_eta: 0.1,
            seed_size: 1_500,
            jbda_rounds: 3,
            augment: AugmentParams::default(),
            piracy_hidden: vec![64, 32],
            piracy_activation: Activation::Relu,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn with_kind(&self, kind: AttackKind) -> Self {
        AttackConfig {
            kind,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(QueenError::InvalidInput(
                "attack budget must be >= 1".into(),
            ));
        }
        match self.kind {
            AttackKind::S4l | AttackKind::Smoothing if self.n_augments < 2 => {
                return Err(QueenError::InvalidInput(
                    "averaging attacks need n_augments >= 2".into(),
                ));
            }
            AttackKind::JbdaTr if self.seed_size == 0 => {
                return Err(QueenError::InvalidInput(
                    "jbda_tr needs seed_size >= 1".into(),
                ));
            }
            AttackKind::JbdaTr if !(self.fgsm_eta > 0.0 && self.fgsm_eta.is_finite()) => {
                return Err(QueenError::InvalidInput("fgsm_eta must be > 0".into()));
            }
            _ => {}
        }
        self.augment.validate()?;
        self.train.validate()
    }

    fn piracy_spec(&self, dim: usize, n_classes: usize) -> Result<NetworkSpec> {
        NetworkSpec::classifier(
            dim,
            &self.piracy_hidden,
            n_classes,
            self.piracy_activation,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// Additive Gaussian noise scaled per coordinate.
    Noise,
    /// Random per-coordinate scaling followed by additive noise.
    Affine1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Noise standard deviation as a fraction of each coordinate's std.
    pub noise: f64,
    /// Scaling factors are drawn from `[1 - scale, 1 + scale]`.
    pub scale: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            noise: 0.05,
            scale: 0.1,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite() && (0.0..1.0).contains(&self.scale)) {
            return Err(QueenError::InvalidInput(
                "augment noise must be >= 0 and scale in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Perturbed copy of `x`. Coordinate `i` receives noise with standard
/// deviation `params.noise * feature_std[i]`; `Affine1d` first scales it by a
/// factor uniform in `[1 - params.scale, 1 + params.scale]`.
pub fn augment(
    x: &[f64],
    kind: AugmentKind,
    feature_std: &[f64],
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), feature_std.len());
    x.iter()
        .zip(feature_std)
        .map(|(&v, &s)| {
            let scaled = match kind {
                AugmentKind::Noise => v,
                AugmentKind::Affine1d if params.scale > 0.0 => {
                    v * rng.random_range(1.0 - params.scale..=1.0 + params.scale)
                }
                AugmentKind::Affine1d => v,
            };
            let z: f64 = StandardNormal.sample(rng);
            scaled + params.noise * s * z
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub x: Vec<f64>,
    pub probs: ConfidenceVector,
    pub condition: Option<Condition>,
}

/// Every oracle call made by an attack, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryLog {
    pub dim: usize,
    pub n_classes: usize,
    pub records: Vec<QueryRecord>,
}

const LOG_ROWS: &str = "rows.bin";
const LOG_MANIFEST: &str = "manifest.txt";
const LOG_FORMAT: &str = "QLG1";

fn condition_code(c: Option<Condition>) -> u8 {
    match c {
        None => 0,
        Some(Condition::A) => 1,
        Some(Condition::B) => 2,
        Some(Condition::C) => 3,
        Some(Condition::D) => 4,
    }
}

fn condition_from_code(code: u8) -> Result<Option<Condition>> {
    Ok(match code {
        0 => None,
        1 => Some(Condition::A),
        2 => Some(Condition::B),
        3 => Some(Condition::C),
        4 => Some(Condition::D),
        other => return Err(QueenError::Corrupt(format!("condition code {other}"))),
    })
}

impl QueryLog {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        QueryLog {
            dim,
            n_classes,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn condition_counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for r in &self.records {
            c[condition_code(r.condition) as usize] += 1;
        }
        c
    }

    /// (query, answer) pairs for offline piracy training.
    pub fn to_batch(&self) -> Result<Batch> {
        let mut b = Batch::new(self.dim, self.n_classes);
        for r in &self.records {
            b.push(&r.x, r.probs.as_slice())?;
        }
        Ok(b)
    }

    fn row_bytes(&self) -> usize {
        8 * (self.dim + self.n_classes) + 1
    }

    /// Writes `rows.bin` (per row: query f64s, answer f64s, condition byte,
    /// little-endian) and a `manifest.txt` describing the layout.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(self.len() * self.row_bytes());
        for r in &self.records {
            for v in r.x.iter().chain(r.probs.as_slice()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.push(condition_code(r.condition));
        }
        std::fs::write(dir.join(LOG_ROWS), bytes)?;
        let mut m = String::new();
        let _ = writeln!(m, "format={LOG_FORMAT}");
        let _ = writeln!(m, "dim={}", self.dim);
        let _ = writeln!(m, "classes={}", self.n_classes);
        let _ = writeln!(m, "rows={}", self.len());
        let _ = writeln!(m, "row_bytes={}", self.row_bytes());
        let _ = writeln!(m, "condition_codes=0:none,1:A,2:B,3:C,4:D");
        std::fs::write(dir.join(LOG_MANIFEST), m)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join(LOG_MANIFEST))?;
        let field = |key: &str| -> Result<&str> {
            manifest
                .lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| QueenError::Corrupt(format!("manifest lacks {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            field(key)?
                .trim()
                .parse()
                .map_err(|_| QueenError::Corrupt(format!("manifest {key} is not a count")))
        };
        if field("format")?.trim() != LOG_FORMAT {
            return Err(QueenError::Corrupt("unknown query log format".into()));
        }
        let mut log = QueryLog::new(num("dim")?, num("classes")?);
        let rows = num("rows")?;
        let bytes = std::fs::read(dir.join(LOG_ROWS))?;
        let rb = log.row_bytes();
        if num("row_bytes")? != rb || bytes.len() != rows * rb {
            return Err(QueenError::Corrupt(format!(
                "query log holds {} bytes, expected {} rows of {rb}",
                bytes.len(),
                rows
            )));
        }
        for row in bytes.chunks_exact(rb) {
            let vals: Vec<f64> = row[..rb - 1]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let (x, p) = vals.split_at(log.dim);
            log.records.push(QueryRecord {
                x: x.to_vec(),
                probs: ConfidenceVector::new(p.to_vec())?,
                condition: condition_from_code(row[rb - 1])?,
            });
        }
        Ok(log)
    }
}

/// Enforces the budget: every oracle call goes through here.
struct Session<'a, O: Oracle> {
    oracle: &'a mut O,
    log: QueryLog,
    budget: usize,
}

impl<O: Oracle> Session<'_, O> {
    fn remaining(&self) -> usize {
        self.budget - self.log.len()
    }

    fn ask(&mut self, x: &[f64]) -> Result<ConfidenceVector> {
        if self.remaining() == 0 {
            return Err(QueenError::InvalidInput("query budget exhausted".into()));
        }
        let index = self.log.len();
        let a = self
            .oracle
            .answer(x)
            .map_err(|e| QueenError::at_query(index, e))?;
        if a.probs.len() != self.log.n_classes {
            return Err(QueenError::DimensionMismatch {
                expected: self.log.n_classes,
                actual: a.probs.len(),
            });
        }
        self.log.records.push(QueryRecord {
            x: x.to_vec(),
            probs: a.probs.clone(),
            condition: a.condition,
        });
        Ok(a.probs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub piracy: Mlp,
    pub log: QueryLog,
    /// Synthetic points dropped because the budget ran out mid-round.
    pub truncated: usize,
}

fn train_piracy(cfg: &AttackConfig, data: &Batch, n_classes: usize) -> Result<Mlp> {
    let spec = cfg.piracy_spec(data.input_dim(), n_classes)?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    Ok(sgd_train(&spec, data, &tc)?.0)
}

/// Queries `oracle` with samples from `aux` (and, for `jbda_tr`, synthetic
/// points) under `cfg.budget`, then trains a piracy model on the answers.
pub fn run_attack<O: Oracle>(
    oracle: &mut O,
    aux: &Dataset,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if aux.is_empty() {
        return Err(QueenError::InvalidInput("auxiliary data is empty".into()));
    }
    let n_classes = aux.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..aux.len()).collect();
    order.shuffle(&mut rng);
    let mut session = Session {
        oracle,
        log: QueryLog::new(aux.dim(), n_classes),
        budget: cfg.budget,
    };
    let mut data = Batch::new(aux.dim(), n_classes);
    let mut truncated = 0;

    let piracy = match cfg.kind {
        AttackKind::Direct | AttackKind::LabelOnly => {
            for &i in order.iter().take(cfg.budget) {
                let x = aux.x(i);
                let p = session.ask(x)?;
                let target = if cfg.kind == AttackKind::LabelOnly {
                    baseline_label_only(&p)
                } else {
                    p
                };
                data.push(x, target.as_slice())?;
            }
            train_piracy(cfg, &data, n_classes)?
        }
        AttackKind::S4l | AttackKind::Smoothing => {
            let base = (cfg.budget / cfg.n_augments).min(aux.len());
            if base == 0 {
                return Err(QueenError::InvalidInput(format!(
                    "budget {} is below n_augments {}",
                    cfg.budget, cfg.n_augments
                )));
            }
            let kind = if cfg.kind == AttackKind::S4l {
                AugmentKind::Noise
            } else {
                AugmentKind::Affine1d
            };
            let std = aux.feature_std();
            for &i in order.iter().take(base) {
                let x = aux.x(i);
                let mut mean = vec![0.0; n_classes];
                for _ in 0..cfg.n_augments {
                    let xa = augment(x, kind, &std, &cfg.augment, &mut rng);
                    let p = session.ask(&xa)?;
                    for (m, v) in mean.iter_mut().zip(p.as_slice()) {
                        *m += v;
                    }
                }
                let inv = 1.0 / cfg.n_augments as f64;
                mean.iter_mut().for_each(|m| *m *= inv);
                data.push(x, &mean)?;
            }
            train_piracy(cfg, &data, n_classes)?
        }
        AttackKind::JbdaTr => {
            let mut points: Vec<Vec<f64>> = Vec::new();
            for &i in order.iter().take(cfg.seed_size.min(cfg.budget)) {
                let x = aux.x(i);
                let p = session.ask(x)?;
                data.push(x, p.as_slice())?;
                points.push(x.to_vec());
            }
            let mut piracy = train_piracy(cfg, &data, n_classes)?;
            for _ in 0..cfg.jbda_rounds {
                if session.remaining() == 0 {
                    break;
                }
                let mut synthetic = Vec::with_capacity(points.len());
                for x in &points {
                    let label = piracy.predict(x)?;
                    let mut target = rng.random_range(0..n_classes - 1);
                    if target >= label {
                        target += 1;
                    }
                    let onehot = ConfidenceVector::one_hot(n_classes, target);
                    let g = piracy.input_grad(x, onehot.as_slice())?;
                    synthetic.push(
                        x.iter()
                            .zip(&g)
                            .map(|(v, gi)| v - cfg.fgsm_eta * sign(*gi))
                            .collect::<Vec<f64>>(),
                    );
                }
                let keep = session.remaining();
                if synthetic.len() > keep {
                    truncated += synthetic.len() - keep;
                    synthetic = reservoir_sample(synthetic, keep, &mut rng);
                }
                for x in synthetic {
                    let p = session.ask(&x)?;
                    data.push(&x, p.as_slice())?;
                    points.push(x);
                }
                piracy = train_piracy(cfg, &data, n_classes)?;
            }
            piracy
        }
    };
    Ok(AttackOutcome {
        piracy,
        log: session.log,
        truncated,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uniform size-`k` subset in original order (Algorithm R).
fn reservoir_sample<T>(items: Vec<T>, k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut chosen: Vec<usize> = (0..k.min(items.len())).collect();
    for i in k..items.len() {
        let j = rng.random_range(0..=i);
        if j < k {
            chosen[j] = i;
        }
    }
    chosen.sort_unstable();
    let mut keep = vec![false; items.len()];
    for i in chosen {
        keep[i] = true;
    }
    items
        .into_iter()
        .zip(keep)
        .filter_map(|(v, k)| k.then_some(v))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiracyScore {
    pub accuracy: f64,
    pub agreement: f64,
}

pub fn evaluate_piracy(piracy: &Mlp, protectee: &Mlp, test: &Dataset) -> Result<PiracyScore> {
    if test.is_empty() {
        return Err(QueenError::InvalidInput("empty test set".into()));
    }
    if piracy.input_dim() != protectee.input_dim() || piracy.input_dim() != test.dim() {
        return Err(QueenError::DimensionMismatch {
            expected: protectee.input_dim(),
            actual: piracy.input_dim(),
        });
    }
    let (mut hit, mut agree) = (0usize, 0usize);
    for (x, y) in test.iter() {
        let p = piracy.predict(x)?;
        hit += usize::from(p == y);
        agree += usize::from(p == protectee.predict(x)?);
    }
    let n = test.len() as f64;
    Ok(PiracyScore {
        accuracy: hit as f64 / n,
        agreement: agree as f64 / n,
    })
}

pub fn predicted_labels(model: &Mlp, data: &Dataset) -> Result<Vec<usize>> {
    data.iter().map(|(x, _)| model.predict(x)).collect()
}
