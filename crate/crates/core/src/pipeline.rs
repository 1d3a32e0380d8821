//! End-to-end orchestration: configuration, component training, the stateful
//! defended serve path, experiment reports, sweeps and state persistence.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    evaluate_piracy, predicted_labels, run_attack, AttackConfig, AttackKind, Oracle, OracleAnswer,
    PiracyScore,
};
use crate::certification::min_radius;
use crate::data::{generate_dataset, Dataset, DatasetSpec, Splits};
use crate::error::{QueenError, Result};
use crate::ks::{ks_forget_quality, KsResult};
use crate::mapper::{train_mapper, Mapper, MapperSpec, MapperTrainConfig};
use crate::nn::{sgd_train, Activation, ConfidenceVector, Mlp, NetworkSpec, TrainConfig};
use crate::perturbation::{
    perturb_output, train_shadows, PerturbationConfig, ShadowConfig, ShadowEnsemble, ShadowMember,
};
use crate::sensitivity::{
    build_profiles, inspect, ClassProfile, Condition, Counters, QueryRegistry,
};
use crate::snapshot::{decode_model, encode_model, MAPPER_MAGIC, MODEL_MAGIC};

pub const SEED_ENV: &str = "QUEEN_SEED";

/// Independent seed for one pipeline stage (splitmix64 finalizer).
pub fn derive_seed(master: u64, stage: u64) -> u64 {
    let mut z = master.wrapping_add(stage.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STAGE_DATA: u64 = 1;
const STAGE_PROTECTEE: u64 = 2;
const STAGE_MAPPER: u64 = 3;
const STAGE_SHADOWS: u64 = 4;
const STAGE_ATTACK: u64 = 5;
const STAGE_SERVE: u64 = 6;
const STAGE_QUARTILE: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub protectee_hidden: Vec<usize>,
    pub activation: Activation,
    pub protectee_train: TrainConfig,
    pub mapper_hidden: [usize; 3],
    pub mapper_temperature: f64,
    pub mapper_train: MapperTrainConfig,
    pub shadow: ShadowConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            protectee_hidden: vec![64, 32],
            activation: Activation::Relu,
            protectee_train: TrainConfig::default(),
            mapper_hidden: [64, 32, 16],
            mapper_temperature: 0.1,
            mapper_train: MapperTrainConfig::default(),
            shadow: ShadowConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    /// CQS threshold `t`.
    pub t: f64,
    /// Query radius; `None` takes the planner's minimum radius.
    pub r: Option<f64>,
    pub eps: f64,
    pub delta: f64,
    pub perturbation: PerturbationConfig,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            t: 0.2,
            r: None,
            eps: 0.05,
            delta: 0.05,
            perturbation: PerturbationConfig::default(),
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t >= 0.0) {
            return Err(QueenError::InvalidInput(format!(
                "threshold t={} must be >= 0",
                self.t
            )));
        }
        if let Some(r) = self.r {
            if !(r > 0.0 && r.is_finite()) {
                return Err(QueenError::InvalidInput(format!(
                    "radius r={r} must be > 0"
                )));
            }
        }
        self.perturbation.validate()
    }

    /// Query radius for profiles with mean radius `mean_radius`.
    pub fn radius(&self, mean_radius: f64) -> Result<f64> {
        match self.r {
            Some(r) => Ok(r),
            None => min_radius(self.t, self.eps, self.delta, mean_radius),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub models: ModelConfig,
    pub defense: DefenseConfig,
    pub attack: AttackConfig,
    pub attacks: Vec<AttackKind>,
    /// Also attack the undefended protectee for comparison and the KS test.
    pub evaluate_undefended: bool,
    /// Piracy models copy the protectee architecture.
    pub piracy_mirrors_protectee: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetSpec::default(),
            models: ModelConfig::default(),
            defense: DefenseConfig::default(),
            attack: AttackConfig::default(),
            attacks: vec![AttackKind::Direct, AttackKind::LabelOnly],
            evaluate_undefended: true,
            piracy_mirrors_protectee: true,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| QueenError::InvalidInput(e.to_string()))
    }

    /// Replaces the master seed with `QUEEN_SEED` when set.
    pub fn apply_env(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| QueenError::InvalidInput(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(self)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.models.protectee_train.validate()?;
        self.defense.validate()?;
        let mut probe = self.attack.clone();
        for &kind in &self.attacks {
            probe.kind = kind;
            probe.validate()?;
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: derive_seed(self.seed, STAGE_DATA),
            ..self.dataset.clone()
        }
    }

    pub fn protectee_spec(&self, seed_stage: u64) -> Result<NetworkSpec> {
        NetworkSpec::classifier(
            self.dataset.dim,
            &self.models.protectee_hidden,
            self.dataset.n_classes,
            self.models.activation,
            derive_seed(self.seed, seed_stage),
        )
    }

    fn protectee_train(&self, seed_stage: u64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, seed_stage),
            ..self.models.protectee_train.clone()
        }
    }

    pub fn attack_config(&self, kind: AttackKind) -> AttackConfig {
        let mut a = self.attack.with_kind(kind);
        a.seed = derive_seed(self.seed, STAGE_ATTACK);
        if self.piracy_mirrors_protectee {
            a.piracy_hidden = self.models.protectee_hidden.clone();
            a.piracy_activation = self.models.activation;
        }
        a
    }

    pub fn serve_seed(&self) -> u64 {
        derive_seed(self.seed, STAGE_SERVE)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything trained before serving starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub splits: Splits,
    pub protectee: Mlp,
    pub mapper: Mapper,
    pub profiles: Vec<ClassProfile>,
    pub ensemble: ShadowEnsemble,
}

impl Trained {
    /// `d-bar`: mean of the class radii.
    pub fn mean_radius(&self) -> f64 {
        mean_radius(&self.profiles)
    }
}

pub fn mean_radius(profiles: &[ClassProfile]) -> f64 {
    profiles.iter().map(|p| p.radius).sum::<f64>() / profiles.len() as f64
}

pub fn train_protectee(cfg: &ExperimentConfig, train: &Dataset) -> Result<Mlp> {
    let spec = cfg.protectee_spec(STAGE_PROTECTEE)?;
    Ok(sgd_train(
        &spec,
        &train.to_batch(),
        &cfg.protectee_train(STAGE_PROTECTEE),
    )?
    .0)
}

pub fn train_defense_mapper(
    cfg: &ExperimentConfig,
    protectee: &Mlp,
    train: &Dataset,
) -> Result<Mapper> {
    let seed = derive_seed(cfg.seed, STAGE_MAPPER);
    let spec = MapperSpec {
        hidden: cfg.models.mapper_hidden,
        temperature: cfg.models.mapper_temperature,
        ..MapperSpec::new(protectee.feature_dim(), seed)
    };
    let tc = MapperTrainConfig {
        seed,
        ..cfg.models.mapper_train.clone()
    };
    Ok(train_mapper(protectee, train, &spec, &tc)?.0)
}

/// Trains protectee, mapper and shadows on given splits.
pub fn train_components_on(cfg: &ExperimentConfig, splits: Splits) -> Result<Trained> {
    let protectee = train_protectee(cfg, &splits.train)?;
    let mapper = train_defense_mapper(cfg, &protectee, &splits.train)?;
    let profiles = build_profiles(&mapper, &protectee, &splits.train)?;
    let ensemble = train_shadows(
        &splits.train,
        &cfg.models.shadow,
        derive_seed(cfg.seed, STAGE_SHADOWS),
    )?;
    Ok(Trained {
        splits,
        protectee,
        mapper,
        profiles,
        ensemble,
    })
}

pub fn train_components(cfg: &ExperimentConfig) -> Result<Trained> {
    cfg.validate()?;
    train_components_on(cfg, generate_dataset(&cfg.dataset_spec())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServedAnswer {
    pub probs: ConfidenceVector,
    pub label: usize,
    pub condition: Condition,
}

/// One serving session: trained components plus the query registry it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct Defender {
    pub protectee: Mlp,
    pub mapper: Mapper,
    pub profiles: Vec<ClassProfile>,
    pub ensemble: ShadowEnsemble,
    pub registry: QueryRegistry,
    pub threshold: f64,
    pub perturbation: PerturbationConfig,
    pub seed: u64,
    /// Queries answered so far; selects the per-query random stream.
    pub served: u64,
}

impl Defender {
    pub fn new(
        trained: &Trained,
        threshold: f64,
        radius: f64,
        perturbation: PerturbationConfig,
        seed: u64,
    ) -> Result<Self> {
        perturbation.validate()?;
        if !(threshold >= 0.0) {
            return Err(QueenError::InvalidInput(format!(
                "threshold {threshold} must be >= 0"
            )));
        }
        if perturbation.draw_size > trained.ensemble.len() {
            return Err(QueenError::InvalidInput(format!(
                "draw size {} exceeds ensemble size {}",
                perturbation.draw_size,
                trained.ensemble.len()
            )));
        }
        Ok(Defender {
            protectee: trained.protectee.clone(),
            mapper: trained.mapper.clone(),
            profiles: trained.profiles.clone(),
            ensemble: trained.ensemble.clone(),
            registry: QueryRegistry::new(&trained.profiles, radius)?,
            threshold,
            perturbation,
            seed,
            served: 0,
        })
    }

    pub fn from_config(trained: &Trained, cfg: &ExperimentConfig) -> Result<Self> {
        let r = cfg.defense.radius(trained.mean_radius())?;
        Defender::new(
            trained,
            cfg.defense.t,
            r,
            cfg.defense.perturbation.clone(),
            cfg.serve_seed(),
        )
    }

    /// Same components and settings, empty registry.
    pub fn fresh_session(&self) -> Result<Self> {
        Ok(Defender {
            registry: QueryRegistry::new(&self.profiles, self.registry.query_radius)?,
            served: 0,
            ..self.clone()
        })
    }

    pub fn serve_one(&mut self, x: &[f64]) -> Result<ServedAnswer> {
        let view = inspect(&self.protectee, &self.mapper, x)?;
        let obs = self.registry.observe(view.z, view.label, self.threshold)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.served);
        let probs = perturb_output(
            x,
            &view,
            obs.condition,
            &self.protectee,
            &self.ensemble,
            &self.profiles,
            &self.perturbation,
            &mut rng,
        )?;
        self.served += 1;
        Ok(ServedAnswer {
            probs,
            label: view.label,
            condition: obs.condition,
        })
    }

    pub fn serve<'a>(
        &mut self,
        queries: impl IntoIterator<Item = &'a [f64]>,
    ) -> Result<Vec<ServedAnswer>> {
        queries
            .into_iter()
            .enumerate()
            .map(|(i, x)| self.serve_one(x).map_err(|e| QueenError::at_query(i, e)))
            .collect()
    }

    pub fn to_state(&self, config_hash: &str) -> PersistedState {
        PersistedState {
            config_hash: config_hash.to_string(),
            defender: self.clone(),
        }
    }
}

impl Oracle for Defender {
    fn answer(&mut self, x: &[f64]) -> Result<OracleAnswer> {
        let a = self.serve_one(x)?;
        Ok(OracleAnswer {
            probs: a.probs,
            condition: Some(a.condition),
        })
    }
}

/// Accuracy of the defended answers' argmax on a benign labelled stream.
pub fn defended_accuracy(defender: &mut Defender, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(QueenError::InvalidInput("empty evaluation set".into()));
    }
    let mut hit = 0usize;
    for (i, (x, y)) in data.iter().enumerate() {
        let a = defender
            .serve_one(x)
            .map_err(|e| QueenError::at_query(i, e))?;
        hit += usize::from(a.probs.argmax() == y);
    }
    Ok(hit as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub recorded: f64,
    pub reversed: f64,
    pub honest: f64,
    pub perturbed: f64,
}

impl Ratios {
    pub fn of(c: &Counters) -> Self {
        if c.seen == 0 {
            return Ratios::default();
        }
        let n = c.seen as f64;
        Ratios {
            recorded: c.recorded as f64 / n,
            reversed: c.reversed as f64 / n,
            honest: c.honest as f64 / n,
            perturbed: c.perturbed as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub queries: usize,
    pub truncated: usize,
    pub defended: PiracyScore,
    pub undefended: Option<PiracyScore>,
    /// Registry counters of the defended attack session.
    pub counters: Counters,
    pub ratios: Ratios,
    /// Final per-class CQS of the defended attack session.
    pub cqs: Vec<f64>,
    /// KS test between defended and undefended piracy predictions on the
    /// test set.
    pub ks: Option<KsResult>,
}

/// Deterministic summary of one run; timings are kept in [`RunTimings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub t: f64,
    pub r: f64,
    pub mean_radius: f64,
    pub protectee_accuracy: f64,
    /// Benign test queries answered through a fresh defended session.
    pub defense_accuracy: f64,
    pub attacks: Vec<AttackReport>,
}

impl RunReport {
    pub fn attack(&self, kind: AttackKind) -> Option<&AttackReport> {
        self.attacks.iter().find(|a| a.kind == kind)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Line-oriented table for terminals and text reports.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "seed {}  t {}  r {:.6}  d_bar {:.6}\nprotectee accuracy {:.4}\ndefense accuracy   {:.4}\n",
            self.seed, self.t, self.r, self.mean_radius, self.protectee_accuracy, self.defense_accuracy
        );
        s.push_str("attack       queries  def_acc  def_agr  undef_acc  recorded  reversed  perturbed  ks_p\n");
        for a in &self.attacks {
            let undef = a
                .undefended
                .map_or_else(|| "-".to_string(), |u| format!("{:.4}", u.accuracy));
            let ks =
                a.ks.map_or_else(|| "-".to_string(), |k| format!("{:.3e}", k.p_value));
            s.push_str(&format!(
                "{:<12} {:>7}  {:.4}   {:.4}   {:>9}  {:.4}    {:.4}    {:.4}     {}\n",
                a.kind.name(),
                a.queries,
                a.defended.accuracy,
                a.defended.agreement,
                undef,
                a.ratios.recorded,
                a.ratios.reversed,
                a.ratios.perturbed,
                ks
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub train_secs: f64,
    pub evaluate_secs: f64,
    pub attack_secs: Vec<(AttackKind, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: RunReport,
    pub timings: RunTimings,
    pub trained: Trained,
}

/// Runs every configured attack against fresh defended sessions (and the
/// undefended protectee if enabled) with the given `t` and `r`.
pub fn evaluate_trained(
    cfg: &ExperimentConfig,
    trained: &Trained,
    t: f64,
    r: f64,
) -> Result<(RunReport, RunTimings)> {
    let start = Instant::now();
    let mut timings = RunTimings::default();
    let base = Defender::new(
        trained,
        t,
        r,
        cfg.defense.perturbation.clone(),
        cfg.serve_seed(),
    )?;
    let test = &trained.splits.test;
    let protectee_accuracy = trained
        .protectee
        .accuracy(test.iter().map(|(x, y)| (x.to_vec(), y)))?;
    let defense_accuracy = defended_accuracy(&mut base.fresh_session()?, test)?;

    let mut attacks = Vec::with_capacity(cfg.attacks.len());
    for &kind in &cfg.attacks {
        let t0 = Instant::now();
        let acfg = cfg.attack_config(kind);
        let mut session = base.fresh_session()?;
        let out = run_attack(&mut session, &trained.splits.aux, &acfg)?;
        let defended = evaluate_piracy(&out.piracy, &trained.protectee, test)?;
        let (undefended, ks) = if cfg.evaluate_undefended {
            let mut plain = trained.protectee.clone();
            let u = run_attack(&mut plain, &trained.splits.aux, &acfg)?;
            let ks = ks_forget_quality(
                &predicted_labels(&out.piracy, test)?,
                &predicted_labels(&u.piracy, test)?,
            )?;
            (
                Some(evaluate_piracy(&u.piracy, &trained.protectee, test)?),
                Some(ks),
            )
        } else {
            (None, None)
        };
        let counters = session.registry.total_counters();
        attacks.push(AttackReport {
            kind,
            queries: out.log.len(),
            truncated: out.truncated,
            defended,
            undefended,
            counters,
            ratios: Ratios::of(&counters),
            cqs: session.registry.all_cqs(),
            ks,
        });
        timings.attack_secs.push((kind, t0.elapsed().as_secs_f64()));
    }
    timings.evaluate_secs = start.elapsed().as_secs_f64();
    Ok((
        RunReport {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            t,
            r,
            mean_radius: trained.mean_radius(),
            protectee_accuracy,
            defense_accuracy,
            attacks,
        },
        timings,
    ))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    let trained = train_components(cfg)?;
    let train_secs = start.elapsed().as_secs_f64();
    let r = cfg.defense.radius(trained.mean_radius())?;
    let (report, mut timings) = evaluate_trained(cfg, &trained, cfg.defense.t, r)?;
    timings.train_secs = train_secs;
    Ok(RunOutcome {
        report,
        timings,
        trained,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    T,
    R,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepMeans {
    pub recorded: f64,
    pub reversed: f64,
    pub attack_accuracy: f64,
    pub defense_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub reports: Vec<RunReport>,
    /// Means over seeds for the first configured attack.
    pub means: SweepMeans,
}

/// One run per (value, seed). Components are trained once per seed since
/// neither `t` nor `r` affects training. Sweeping `t` holds `r` at the base
/// configuration's radius; sweeping `r` holds `t` fixed.
pub fn ablation_sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(QueenError::InvalidInput(
            "sweep needs values and seeds".into(),
        ));
    }
    let first = *cfg
        .attacks
        .first()
        .ok_or_else(|| QueenError::InvalidInput("sweep needs at least one attack".into()))?;
    let mut points: Vec<SweepPoint> = values
        .iter()
        .map(|&value| SweepPoint {
            value,
            reports: Vec::new(),
            means: SweepMeans::default(),
        })
        .collect();
    for &seed in seeds {
        let c = cfg.with_seed(seed);
        let trained = train_components(&c)?;
        let base_r = c.defense.radius(trained.mean_radius())?;
        for p in &mut points {
            let (t, r) = match param {
                SweepParam::T => (p.value, base_r),
                SweepParam::R => (c.defense.t, p.value),
            };
            p.reports.push(evaluate_trained(&c, &trained, t, r)?.0);
        }
    }
    for p in &mut points {
        let n = p.reports.len() as f64;
        for rep in &p.reports {
            let a = rep.attack(first).expect("attack present");
            p.means.recorded += a.ratios.recorded / n;
            p.means.reversed += a.ratios.reversed / n;
            p.means.attack_accuracy += a.defended.accuracy / n;
            p.means.defense_accuracy += rep.defense_accuracy / n;
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quartile {
    /// Closest quarter to the class center.
    Central,
    Second,
    Third,
    /// Farthest quarter from the class center.
    Peripheral,
    Full,
}

impl std::str::FromStr for Quartile {
    type Err = QueenError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "central" | "q1" => Quartile::Central,
            "second" | "q2" => Quartile::Second,
            "third" | "q3" => Quartile::Third,
            "peripheral" | "q4" => Quartile::Peripheral,
            "full" => Quartile::Full,
            _ => return Err(QueenError::InvalidInput(format!("unknown quartile {s:?}"))),
        })
    }
}

/// Trains a fresh classifier on `per_class` samples per class drawn from the
/// requested distance quartile (2D distance to the class center) and returns
/// its test accuracy.
pub fn quartile_experiment(
    cfg: &ExperimentConfig,
    trained: &Trained,
    quartile: Quartile,
    per_class: usize,
    seed: u64,
) -> Result<f64> {
    if per_class == 0 {
        return Err(QueenError::InvalidInput("per_class must be >= 1".into()));
    }
    let train = &trained.splits.train;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STAGE_QUARTILE));
    let mut chosen = Vec::new();
    for class in 0..train.n_classes() {
        let profile = &trained.profiles[class];
        let mut ranked: Vec<(f64, usize)> = train
            .class_indices(class)
            .into_iter()
            .map(|i| {
                let z = trained
                    .mapper
                    .map(&trained.protectee.features(train.x(i))?)?;
                let d = ((z[0] - profile.center2d[0]).powi(2)
                    + (z[1] - profile.center2d[1]).powi(2))
                .sqrt();
                Ok((d, i))
            })
            .collect::<Result<_>>()?;
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = ranked.len();
        let (lo, hi) = match quartile {
            Quartile::Central => (0, n / 4),
            Quartile::Second => (n / 4, n / 2),
            Quartile::Third => (n / 2, 3 * n / 4),
            Quartile::Peripheral => (3 * n / 4, n),
            Quartile::Full => (0, n),
        };
        let mut slice: Vec<usize> = ranked[lo..hi].iter().map(|&(_, i)| i).collect();
        if slice.len() < per_class.min(n) || slice.is_empty() {
            return Err(QueenError::InvalidInput(format!(
                "class {class}: quartile holds {} samples, {per_class} requested",
                slice.len()
            )));
        }
        if per_class < slice.len() {
            slice.shuffle(&mut rng);
            slice.truncate(per_class);
        }
        chosen.extend(slice);
    }
    chosen.sort_unstable();
    let spec = cfg
        .protectee_spec(STAGE_QUARTILE)?
        .with_seed(derive_seed(seed, STAGE_PROTECTEE));
    let tc = TrainConfig {
        seed: derive_seed(seed, STAGE_PROTECTEE),
        ..cfg.models.protectee_train.clone()
    };
    let (model, _) = sgd_train(&spec, &train.subset(&chosen).to_batch(), &tc)?;
    let test = &trained.splits.test;
    model.accuracy(test.iter().map(|(x, y)| (x.to_vec(), y)))
}

pub const SCHEMA_VERSION: u32 = 1;
const STATE_MAGIC: [u8; 4] = *b"QST1";
const CHECKSUM_LEN: usize = 32;

/// A serving session frozen to disk: models, profiles, registry and the
/// position in the per-query random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistedState {
    pub config_hash: String,
    pub defender: Defender,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    config_hash: String,
    /// Raw bits so that an infinite threshold survives JSON.
    threshold_bits: u64,
    seed: u64,
    served: u64,
    mapper_temperature: f64,
    perturbation: PerturbationConfig,
    profiles: Vec<ClassProfile>,
    registry: QueryRegistry,
    shadows: Vec<(u64, Vec<usize>)>,
}

fn put_section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn take_section<'a>(bytes: &mut &'a [u8]) -> Result<&'a [u8]> {
    if bytes.len() < 8 {
        return Err(QueenError::Corrupt("state section header truncated".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[8..];
    if rest.len() < len {
        return Err(QueenError::Corrupt("state section truncated".into()));
    }
    let (section, tail) = rest.split_at(len);
    *bytes = tail;
    Ok(section)
}

impl PersistedState {
    /// Layout: magic, u32 schema version, SHA-256 of the body, body. The body
    /// is length-prefixed sections: JSON header, protectee, mapper, then one
    /// section per shadow model.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let d = &self.defender;
        let header = StateHeader {
            config_hash: self.config_hash.clone(),
            threshold_bits: d.threshold.to_bits(),
            seed: d.seed,
            served: d.served,
            mapper_temperature: d.mapper.temperature(),
            perturbation: d.perturbation.clone(),
            profiles: d.profiles.clone(),
            registry: d.registry.clone(),
            shadows: d
                .ensemble
                .members
                .iter()
                .map(|m| (m.train_seed, m.subset.clone()))
                .collect(),
        };
        let mut body = Vec::new();
        put_section(&mut body, &serde_json::to_vec(&header)?);
        put_section(&mut body, &encode_model(&d.protectee, MODEL_MAGIC));
        put_section(&mut body, &encode_model(d.mapper.network(), MAPPER_MAGIC));
        for m in &d.ensemble.members {
            put_section(&mut body, &encode_model(&m.model, MODEL_MAGIC));
        }
        let mut out = Vec::with_capacity(body.len() + 40);
        out.extend_from_slice(&STATE_MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&body));
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + CHECKSUM_LEN || bytes[..4] != STATE_MAGIC {
            return Err(QueenError::Corrupt("not a state file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != SCHEMA_VERSION {
            return Err(QueenError::VersionMismatch {
                expected: SCHEMA_VERSION,
                found: version,
            });
        }
        let checksum = &bytes[8..8 + CHECKSUM_LEN];
        let mut body = &bytes[8 + CHECKSUM_LEN..];
        if Sha256::digest(body).as_slice() != checksum {
            return Err(QueenError::Corrupt("state checksum mismatch".into()));
        }
        let header: StateHeader = serde_json::from_slice(take_section(&mut body)?)?;
        let protectee = decode_model(take_section(&mut body)?, MODEL_MAGIC)?;
        let mapper = Mapper::from_network(
            decode_model(take_section(&mut body)?, MAPPER_MAGIC)?,
            header.mapper_temperature,
        )?;
        let mut members = Vec::with_capacity(header.shadows.len());
        for (train_seed, subset) in header.shadows {
            members.push(ShadowMember {
                model: decode_model(take_section(&mut body)?, MODEL_MAGIC)?,
                subset,
                train_seed,
            });
        }
        if !body.is_empty() {
            return Err(QueenError::Corrupt("trailing bytes in state file".into()));
        }
        Ok(PersistedState {
            config_hash: header.config_hash,
            defender: Defender {
                protectee,
                mapper,
                profiles: header.profiles,
                ensemble: ShadowEnsemble { members },
                registry: header.registry,
                threshold: f64::from_bits(header.threshold_bits),
                perturbation: header.perturbation,
                seed: header.seed,
                served: header.served,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
