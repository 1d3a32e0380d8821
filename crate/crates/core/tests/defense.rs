use std::sync::OnceLock;

use queen_core::certification::{gradient_reverse_report, verify_gradient_reverse};
use queen_core::perturbation::{feature_perturb, FpStep, PerturbationConfig};
use queen_core::pipeline::{train_components, Defender, ExperimentConfig, PersistedState, Trained};
use queen_core::sensitivity::{inspect, measure_stream, ClassProfile};
use queen_core::special::erfc;
use queen_core::{Activation, Condition, ConfidenceVector, Mlp, NetworkSpec, QueryRegistry};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained() -> &'static (ExperimentConfig, Trained) {
    static CELL: OnceLock<(ExperimentConfig, Trained)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let t = train_components(&cfg).unwrap();
        (cfg, t)
    })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[test]
fn overlap_matches_pairwise_scan() {
    let profile = ClassProfile {
        class: 0,
        center2d: [0.0, 0.0],
        radius: 1.0,
        center_feature: vec![0.0],
    };
    let r = 0.15;
    let mut reg = QueryRegistry::new(&[profile], r).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let z = [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
        reg.observe(z, 0, f64::INFINITY).unwrap();
    }
    let recorded = reg.points(0).unwrap().to_vec();
    for _ in 0..100 {
        let q = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
        let naive = recorded.iter().any(|&p| dist(p, q) < r);
        assert_eq!(reg.overlaps(q, 0).unwrap(), naive);
    }
}

#[test]
fn stream_matches_straight_line_replay() {
    let (cfg, t) = trained();
    let r = cfg.defense.radius(t.mean_radius()).unwrap() * 4.0;
    let threshold = 0.05;
    let queries: Vec<&[f64]> = t.splits.aux.iter().map(|(x, _)| x).take(1000).collect();
    let mut reg = QueryRegistry::new(&t.profiles, r).unwrap();
    let run = measure_stream(
        queries.iter().copied(),
        &t.protectee,
        &t.mapper,
        &mut reg,
        threshold,
    )
    .unwrap();

    let k = t.profiles.len();
    let mut cqs = vec![0.0; k];
    let mut points: Vec<Vec<[f64; 2]>> = vec![Vec::new(); k];
    let mut conds = Vec::new();
    for x in &queries {
        let v = inspect(&t.protectee, &t.mapper, x).unwrap();
        let p = &t.profiles[v.label];
        let d = dist(v.z, p.center2d);
        let c = if d >= p.radius {
            Condition::A
        } else if cqs[v.label] > threshold {
            Condition::B
        } else if points[v.label].iter().any(|&q| dist(q, v.z) < r) {
            Condition::D
        } else {
            let s = 0.5 * erfc((d - p.radius) / p.radius);
            cqs[v.label] += r * r / (p.radius * p.radius) * s * s;
            points[v.label].push(v.z);
            Condition::C
        };
        conds.push(c);
    }
    let got: Vec<Condition> = run.observations.iter().map(|o| o.condition).collect();
    assert_eq!(got, conds);
    for (a, b) in run.cqs.iter().zip(&cqs) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert!(
        conds.contains(&Condition::B),
        "stream never crossed the threshold"
    );
}

#[test]
fn shadow_draw_replays_by_hand() {
    let (_, t) = trained();
    let x = t.splits.test.x(0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let est = t.ensemble.estimate_piracy_softmax(x, 3, &mut rng).unwrap();
    let mut replay = ChaCha8Rng::seed_from_u64(11);
    let picked = index::sample(&mut replay, 10, 3).into_vec();
    let mut mean = vec![0.0; 10];
    for m in picked {
        for (acc, p) in mean.iter_mut().zip(
            t.ensemble.members[m]
                .model
                .predict_proba(x)
                .unwrap()
                .as_slice(),
        ) {
            *acc += p / 3.0;
        }
    }
    for (a, b) in est.as_slice().iter().zip(&mean) {
        assert!((a - b).abs() < 1e-15);
    }
}

fn out_of_region(t: &Trained, n: usize) -> Vec<(Vec<f64>, Vec<f64>, ConfidenceVector)> {
    t.splits
        .aux
        .iter()
        .filter_map(|(x, _)| {
            let v = inspect(&t.protectee, &t.mapper, x).unwrap();
            (!t.profiles[v.label].contains(v.z)).then(|| (x.to_vec(), v.feature, v.probs))
        })
        .take(n)
        .collect()
}

#[test]
fn feature_perturbation_keeps_labels_and_lowers_confidence() {
    let (cfg, t) = trained();
    let batch = out_of_region(t, 1000);
    assert_eq!(batch.len(), 1000);
    let mut lowered = 0;
    for (_, feature, probs) in &batch {
        let fp = feature_perturb(
            feature,
            &t.protectee,
            &t.profiles,
            &cfg.defense.perturbation,
        )
        .unwrap();
        assert_eq!(fp.probs.argmax(), probs.argmax());
        lowered += usize::from(fp.probs.max_prob() < probs.max_prob());
    }
    assert!(lowered >= 950, "confidence lowered on {lowered}/1000");
}

#[test]
fn feature_perturbation_stops_within_one_step_of_linear_boundary() {
    // Identity head: logits equal the feature, so the boundary is u0 == u1.
    let spec = NetworkSpec::new(vec![2, 2, 2], Activation::Relu, 0).unwrap();
    let mut params = vec![0.0; spec.param_count()];
    let head = params.len() - 6;
    params[head] = 1.0;
    params[head + 3] = 1.0;
    let net = Mlp::from_parameters(spec, params).unwrap();
    let profile = |class, c: Vec<f64>| ClassProfile {
        class,
        center2d: [0.0, 0.0],
        radius: 1.0,
        center_feature: c,
    };
    let profiles = [profile(0, vec![2.0, 0.0]), profile(1, vec![0.0, 2.0])];
    let eps = 0.01;
    let cfg = PerturbationConfig {
        fp_step: FpStep::Absolute(eps),
        ..PerturbationConfig::default()
    };
    let u = [3.0, 0.0];
    let fp = feature_perturb(&u, &net, &profiles, &cfg).unwrap();
    assert_eq!(fp.target_class, 1);
    // Along dir = (-3, 2)/|(-3, 2)| the boundary sits at s = 3 * |(-3, 2)| / 5.
    let norm = 13f64.sqrt();
    let s_star = 3.0 * norm / 5.0;
    let moved =
        ((fp.final_feature[0] - u[0]).powi(2) + (fp.final_feature[1] - u[1]).powi(2)).sqrt();
    assert!(
        moved <= s_star && s_star - moved < eps + 1e-12,
        "moved {moved}, boundary {s_star}"
    );
    assert_eq!(fp.probs.argmax(), 0);
}

fn random_two_layer(rng: &mut ChaCha8Rng, seed: u64) -> (Mlp, Vec<f64>) {
    let spec = NetworkSpec::classifier(6, &[12], 4, Activation::Tanh, seed).unwrap();
    let x = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    (Mlp::init(spec).unwrap(), x)
}

#[test]
fn exact_simulation_reverses_one_hot_answers() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..50 {
        let (h, x) = random_two_layer(&mut rng, seed);
        let y = ConfidenceVector::one_hot(4, rng.random_range(0..4));
        let rep = verify_gradient_reverse(&h, &x, &y).unwrap();
        assert!((rep.cosine + 1.0).abs() < 1e-6 && (rep.norm_ratio - 1.0).abs() < 1e-6);
    }
}

#[test]
fn disjoint_shadow_simulation_still_reverses() {
    let (_, t) = trained();
    // The piracy model is one member; the remaining members simulate it.
    let h = &t.ensemble.members[0].model;
    let others: Vec<usize> = (1..t.ensemble.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut negative = 0;
    for _ in 0..100 {
        let x = t.splits.test.x(rng.random_range(0..t.splits.test.len()));
        let honest = t.protectee.predict_proba(x).unwrap();
        let mut draw_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let pick: Vec<usize> = index::sample(&mut draw_rng, others.len(), 3)
            .into_iter()
            .map(|i| others[i])
            .collect();
        let simulated = t.ensemble.mean_softmax(x, &pick).unwrap();
        let rep = gradient_reverse_report(h, x, &honest, &simulated).unwrap();
        negative += usize::from(rep.cosine < 0.0);
    }
    assert!(negative >= 90, "cosine < 0 on {negative}/100");
}

#[test]
fn threshold_extremes() {
    let (cfg, t) = trained();
    let queries: Vec<&[f64]> = t.splits.aux.iter().map(|(x, _)| x).take(500).collect();

    let mut open = Defender::from_config(t, cfg).unwrap();
    open.threshold = f64::INFINITY;
    for a in open.serve(queries.iter().copied()).unwrap() {
        assert_ne!(a.condition, Condition::B);
    }

    let mut closed = Defender::from_config(t, cfg).unwrap();
    closed.threshold = 0.0;
    let answers = closed.serve(queries.iter().copied()).unwrap();
    let first_in_region: Vec<bool> = {
        let mut seen = vec![false; t.profiles.len()];
        answers
            .iter()
            .map(|a| {
                if a.condition == Condition::A {
                    return false;
                }
                std::mem::replace(&mut seen[a.label], true)
            })
            .collect()
    };
    // With t = 0, only a class's first in-region query is recorded; every
    // later one is reversed.
    for (a, later) in answers.iter().zip(first_in_region) {
        match a.condition {
            Condition::A => {}
            Condition::C => assert!(!later),
            Condition::B => assert!(later),
            Condition::D => panic!("overlap cannot occur with t = 0"),
        }
    }
    assert!(closed.registry.total_counters().reversed > 0);
}

#[test]
fn snapshot_replay_continues_identically() {
    let (cfg, t) = trained();
    let queries: Vec<&[f64]> = t.splits.aux.iter().map(|(x, _)| x).take(600).collect();
    let mut straight = Defender::from_config(t, cfg).unwrap();
    straight.threshold = 0.0;
    let all = straight.serve(queries.iter().copied()).unwrap();

    let mut first = Defender::from_config(t, cfg).unwrap();
    first.threshold = 0.0;
    first.serve(queries[..250].iter().copied()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    first.to_state(&cfg.hash()).save(&path).unwrap();
    let mut resumed = PersistedState::load(&path).unwrap().defender;
    let rest = resumed.serve(queries[250..].iter().copied()).unwrap();
    assert_eq!(&all[250..], &rest[..]);
    assert!(rest.iter().any(|a| a.condition == Condition::B));
}
