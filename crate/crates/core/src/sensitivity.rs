//! Per-class sensitivity profiles and query-stream accounting.
//!
//! A class's sensitive region is the open disc of radius `d` (the mean
//! distance of its training points to their 2D center) around its 2D center.
//! Each recorded query contributes `(r/d)^2 * sqs^2` to the class's cumulative
//! sensitivity, where `sqs = erfc((dist - d)/d) / 2`.
//!
//! Dispatch for a query whose predicted class is `y`:
//!
//! | condition | test                                      | answer             |
//! |-----------|-------------------------------------------|--------------------|
//! | A         | `dist(z, c_y) >= d_y`                     | feature perturbation |
//! | B         | inside, `cqs_y > t`                       | gradient reverse   |
//! | C         | inside, `cqs_y <= t`, no record within `r` | honest, recorded   |
//! | D         | inside, `cqs_y <= t`, a record within `r`  | honest             |
//!
//! Once a class passes the threshold every in-region query is reversed and
//! nothing more is recorded for it.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{QueenError, Result};
use crate::mapper::{dist, Mapper};
use crate::nn::{argmax, softmax, ConfidenceVector, Mlp};
use crate::special::erfc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class: usize,
    pub center2d: [f64; 2],
    /// Mean distance of the class's 2D training features to `center2d`.
    pub radius: f64,
    /// Mean of the class's training features in the protectee's feature space.
    pub center_feature: Vec<f64>,
}

impl ClassProfile {
    pub fn contains(&self, z: [f64; 2]) -> bool {
        dist(z, self.center2d) < self.radius
    }
}

/// Builds one profile per class from matching lists of 2D points, feature
/// vectors and labels.
pub fn profiles_from_points(
    points: &[[f64; 2]],
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<ClassProfile>> {
    if points.len() != labels.len() || features.len() != labels.len() {
        return Err(QueenError::DimensionMismatch {
            expected: labels.len(),
            actual: points.len().min(features.len()),
        });
    }
    let feat_dim = features.first().map_or(0, Vec::len);
    let mut profiles = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(QueenError::EmptyClass { class });
        }
        let n = members.len() as f64;
        let mut c = [0.0; 2];
        let mut cf = vec![0.0; feat_dim];
        for &i in &members {
            c[0] += points[i][0];
            c[1] += points[i][1];
            for (acc, v) in cf.iter_mut().zip(&features[i]) {
                *acc += v;
            }
        }
        c = [c[0] / n, c[1] / n];
        for v in &mut cf {
            *v /= n;
        }
        let radius = members.iter().map(|&i| dist(points[i], c)).sum::<f64>() / n;
        if !(radius > 0.0) {
            return Err(QueenError::DegenerateClass { class });
        }
        profiles.push(ClassProfile {
            class,
            center2d: c,
            radius,
            center_feature: cf,
        });
    }
    Ok(profiles)
}

/// Profiles of the training set as seen through the protectee's extractor
/// and the mapper, grouped by true label.
pub fn build_profiles(
    mapper: &Mapper,
    extractor: &Mlp,
    train: &Dataset,
) -> Result<Vec<ClassProfile>> {
    let mut points = Vec::with_capacity(train.len());
    let mut features = Vec::with_capacity(train.len());
    for (x, _) in train.iter() {
        let u = extractor.features(x)?;
        points.push(mapper.map(&u)?);
        features.push(u);
    }
    profiles_from_points(&points, &features, train.labels(), train.n_classes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sqs {
    pub value: f64,
    pub class: usize,
    pub distance: f64,
}

pub fn sqs_at_distance(distance: f64, radius: f64) -> f64 {
    0.5 * erfc((distance - radius) / radius)
}

pub fn sqs(z: [f64; 2], profile: &ClassProfile) -> Result<Sqs> {
    if !(profile.radius > 0.0) {
        return Err(QueenError::DegenerateClass {
            class: profile.class,
        });
    }
    let distance = dist(z, profile.center2d);
    Ok(Sqs {
        value: sqs_at_distance(distance, profile.radius),
        class: profile.class,
        distance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Outside the sensitive region.
    A,
    /// Inside, class threshold exceeded.
    B,
    /// Inside, under threshold, no overlapping record: recorded.
    C,
    /// Inside, under threshold, overlapping a record.
    D,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub seen: u64,
    pub recorded: u64,
    pub reversed: u64,
    pub honest: u64,
    pub perturbed: u64,
}

impl Counters {
    pub fn add(&mut self, other: &Counters) {
        self.seen += other.seen;
        self.recorded += other.recorded;
        self.reversed += other.reversed;
        self.honest += other.honest;
        self.perturbed += other.perturbed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub center2d: [f64; 2],
    pub radius: f64,
    pub points: Vec<[f64; 2]>,
    pub cqs: f64,
    pub counters: Counters,
}

/// Recorded 2D features and running cumulative sensitivity per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRegistry {
    pub client_id: Option<String>,
    /// Query-disc radius `r`.
    pub query_radius: f64,
    pub classes: Vec<ClassRecord>,
}

impl QueryRegistry {
    pub fn new(profiles: &[ClassProfile], query_radius: f64) -> Result<Self> {
        if !(query_radius > 0.0) || !query_radius.is_finite() {
            return Err(QueenError::InvalidInput("query radius must be > 0".into()));
        }
        Ok(QueryRegistry {
            client_id: None,
            query_radius,
            classes: profiles
                .iter()
                .map(|p| ClassRecord {
                    center2d: p.center2d,
                    radius: p.radius,
                    points: Vec::new(),
                    cqs: 0.0,
                    counters: Counters::default(),
                })
                .collect(),
        })
    }

    pub fn with_client(mut self, client_id: impl Into<String>) -> Self {
        self.client_id = Some(client_id.into());
        self
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn record(&self, class: usize) -> Result<&ClassRecord> {
        self.classes.get(class).ok_or(QueenError::UnknownClass {
            class,
            n_classes: self.classes.len(),
        })
    }

    pub fn cqs(&self, class: usize) -> Result<f64> {
        Ok(self.record(class)?.cqs)
    }

    pub fn all_cqs(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.cqs).collect()
    }

    pub fn points(&self, class: usize) -> Result<&[[f64; 2]]> {
        Ok(&self.record(class)?.points)
    }

    pub fn counters(&self, class: usize) -> Result<Counters> {
        Ok(self.record(class)?.counters)
    }

    pub fn total_counters(&self) -> Counters {
        let mut total = Counters::default();
        for c in &self.classes {
            total.add(&c.counters);
        }
        total
    }

    /// True iff some recorded point of `class` lies strictly closer than `r`.
    pub fn overlaps(&self, z: [f64; 2], class: usize) -> Result<bool> {
        let r = self.query_radius;
        Ok(self.record(class)?.points.iter().any(|&p| dist(p, z) < r))
    }

    /// Records `z` with its sensitivity value and returns the new class CQS.
    pub fn cqs_update(&mut self, class: usize, z: [f64; 2], sqs_value: f64) -> Result<f64> {
        let r = self.query_radius;
        self.record(class)?;
        let rec = &mut self.classes[class];
        rec.points.push(z);
        rec.cqs += (r * r) / (rec.radius * rec.radius) * sqs_value * sqs_value;
        rec.counters.recorded += 1;
        Ok(rec.cqs)
    }

    /// Cumulative sensitivity recomputed from the recorded points alone.
    pub fn recompute_cqs(&self, class: usize) -> Result<f64> {
        let rec = self.record(class)?;
        let r = self.query_radius;
        let sum_sq: f64 = rec
            .points
            .iter()
            .map(|&p| sqs_at_distance(dist(p, rec.center2d), rec.radius).powi(2))
            .sum();
        Ok(r * r / (rec.radius * rec.radius) * sum_sq)
    }

    pub fn classify(&self, z: [f64; 2], class: usize, threshold: f64) -> Result<Condition> {
        let rec = self.record(class)?;
        if dist(z, rec.center2d) >= rec.radius {
            return Ok(Condition::A);
        }
        if rec.cqs > threshold {
            return Ok(Condition::B);
        }
        if self.overlaps(z, class)? {
            Ok(Condition::D)
        } else {
            Ok(Condition::C)
        }
    }

    /// Classifies the query, records it on condition C and updates the
    /// treatment counters.
    pub fn observe(&mut self, z: [f64; 2], class: usize, threshold: f64) -> Result<Observation> {
        let condition = self.classify(z, class, threshold)?;
        let mut sqs_value = None;
        if condition == Condition::C {
            let rec = &self.classes[class];
            let distance = dist(z, rec.center2d);
            let s = sqs_at_distance(distance, rec.radius);
            self.cqs_update(class, z, s)?;
            sqs_value = Some(Sqs {
                value: s,
                class,
                distance,
            });
        }
        let counters = &mut self.classes[class].counters;
        counters.seen += 1;
        match condition {
            Condition::A => counters.perturbed += 1,
            Condition::B => counters.reversed += 1,
            Condition::C | Condition::D => counters.honest += 1,
        }
        Ok(Observation {
            condition,
            sqs: sqs_value,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn overlap_check(z: [f64; 2], registry: &QueryRegistry, class: usize) -> Result<bool> {
    registry.overlaps(z, class)
}

pub fn classify_condition(
    z: [f64; 2],
    class: usize,
    registry: &QueryRegistry,
    threshold: f64,
) -> Result<Condition> {
    registry.classify(z, class, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub condition: Condition,
    /// Present when the query was recorded.
    pub sqs: Option<Sqs>,
}

/// Everything the defender derives from one query before answering it.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryView {
    pub probs: ConfidenceVector,
    pub label: usize,
    pub feature: Vec<f64>,
    pub z: [f64; 2],
}

pub fn inspect(protectee: &Mlp, mapper: &Mapper, x: &[f64]) -> Result<QueryView> {
    let fwd = protectee.forward(x)?;
    let probs = softmax(&fwd.logits)?;
    let label = argmax(probs.as_slice());
    let z = mapper.map(&fwd.hidden)?;
    Ok(QueryView {
        probs,
        label,
        feature: fwd.hidden,
        z,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamMeasurement {
    pub observations: Vec<Observation>,
    pub cqs: Vec<f64>,
}

/// Routes each query by its predicted label and updates the registry.
pub fn measure_stream<'a>(
    queries: impl IntoIterator<Item = &'a [f64]>,
    protectee: &Mlp,
    mapper: &Mapper,
    registry: &mut QueryRegistry,
    threshold: f64,
) -> Result<StreamMeasurement> {
    let mut observations = Vec::new();
    for (i, x) in queries.into_iter().enumerate() {
        let obs = inspect(protectee, mapper, x)
            .and_then(|v| registry.observe(v.z, v.label, threshold))
            .map_err(|e| QueenError::at_query(i, e))?;
        observations.push(obs);
    }
    Ok(StreamMeasurement {
        observations,
        cqs: registry.all_cqs(),
    })
}
