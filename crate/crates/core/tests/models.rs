use queen_core::data::{generate_dataset, Dataset, DatasetSpec};
use queen_core::mapper::Separation;
use queen_core::nn::{ce_loss, sgd_train};
use queen_core::perturbation::stratified_split;
use queen_core::pipeline::{train_defense_mapper, train_protectee, ExperimentConfig};
use queen_core::sensitivity::build_profiles;
use queen_core::{softmax, Activation, Mlp, NetworkSpec, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Forward pass written out layer by layer from the parameter layout:
/// per layer, row-major weights (out x in) followed by biases.
fn straight_line_logits(sizes: &[usize], act: Activation, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut off = 0;
    for l in 0..sizes.len() - 1 {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let mut next = vec![0.0; n_out];
        for o in 0..n_out {
            let mut s = params[off + n_in * n_out + o];
            for i in 0..n_in {
                s += params[off + o * n_in + i] * h[i];
            }
            next[o] = s;
        }
        off += n_in * n_out + n_out;
        if l + 2 < sizes.len() {
            for v in &mut next {
                *v = match act {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        h = next;
    }
    h
}

#[test]
fn forward_matches_straight_line_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (seed, act) in [(3, Activation::Relu), (4, Activation::Tanh)] {
        let sizes = vec![5, 9, 7, 4];
        let net = Mlp::init(NetworkSpec::new(sizes.clone(), act, seed).unwrap()).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let want = straight_line_logits(&sizes, act, net.params(), &x);
            for (a, b) in net.logits(&x).unwrap().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_survives_large_logits() {
    let p = softmax(&[1000.0, 0.0]).unwrap();
    assert!((p.as_slice()[0] - 1.0).abs() < 1e-15);
    assert!(p.as_slice()[1] >= 0.0 && p.as_slice()[1] < 1e-300);
}

#[test]
fn cross_entropy_matches_direct_sum() {
    let want = -(0.3 * 0.2f64.ln() + 0.7 * 0.8f64.ln());
    assert!((ce_loss(&[0.2, 0.8], &[0.3, 0.7]).unwrap() - want).abs() < 1e-15);
}

#[test]
fn separable_blobs_are_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut data = Dataset::new(2, 2);
    for i in 0..400 {
        let class = i % 2;
        let cx = if class == 0 { -3.0 } else { 3.0 };
        data.push(
            &[
                cx + rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            class,
        )
        .unwrap();
    }
    let spec = NetworkSpec::classifier(2, &[16], 2, Activation::Relu, 2).unwrap();
    let (net, _) = sgd_train(&spec, &data.to_batch(), &TrainConfig::default()).unwrap();
    let acc = net
        .accuracy(data.iter().map(|(x, y)| (x.to_vec(), y)))
        .unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn stratified_split_partitions_six_thousand_samples() {
    let splits = generate_dataset(&DatasetSpec {
        train_per_class: 600,
        ..DatasetSpec::default()
    })
    .unwrap();
    let parts = stratified_split(&splits.train, 10, 9).unwrap();
    let mut seen = vec![false; splits.train.len()];
    for p in &parts {
        assert_eq!(p.len(), 600);
        for &i in p {
            assert!(
                !std::mem::replace(&mut seen[i], true),
                "index {i} in two subsets"
            );
        }
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn mapper_separates_classes_on_most_seeds() {
    let mut separated = 0;
    let mut checked_profiles = false;
    for seed in 0..10 {
        let cfg = ExperimentConfig::default().with_seed(seed);
        let splits = generate_dataset(&cfg.dataset_spec()).unwrap();
        let protectee = train_protectee(&cfg, &splits.train).unwrap();
        let mapper = train_defense_mapper(&cfg, &protectee, &splits.train).unwrap();
        let features: Vec<Vec<f64>> = splits
            .train
            .iter()
            .map(|(x, _)| protectee.features(x).unwrap())
            .collect();
        let mapped = mapper.map_batch(&features, splits.train.labels()).unwrap();
        for (f, m) in features.iter().zip(&mapped) {
            assert_eq!(mapper.map(f).unwrap(), m.z);
        }
        let sep = Separation::compute(&mapped, 10);
        separated += usize::from(sep.mean_intra() < sep.mean_center_distance());

        if !checked_profiles {
            // Independent accumulation of centers and mean radii.
            let profiles = build_profiles(&mapper, &protectee, &splits.train).unwrap();
            for p in &profiles {
                let pts: Vec<[f64; 2]> = mapped
                    .iter()
                    .filter(|m| m.label == p.class)
                    .map(|m| m.z)
                    .collect();
                let n = pts.len() as f64;
                let cx = pts.iter().map(|z| z[0]).sum::<f64>() / n;
                let cy = pts.iter().map(|z| z[1]).sum::<f64>() / n;
                let r = pts
                    .iter()
                    .map(|z| ((z[0] - cx).powi(2) + (z[1] - cy).powi(2)).sqrt())
                    .sum::<f64>()
                    / n;
                assert!((p.center2d[0] - cx).abs() < 1e-9 && (p.center2d[1] - cy).abs() < 1e-9);
                assert!((p.radius - r).abs() < 1e-9);
            }
            checked_profiles = true;
        }
    }
    assert!(separated >= 9, "separated on {separated}/10 seeds");
}

#[test]
fn three_gaussian_classes_separate_tightly() {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec {
            n_classes: 3,
            ..DatasetSpec::default()
        },
        ..ExperimentConfig::default()
    };
    let splits = generate_dataset(&cfg.dataset_spec()).unwrap();
    let protectee = train_protectee(&cfg, &splits.train).unwrap();
    let mapper = train_defense_mapper(&cfg, &protectee, &splits.train).unwrap();
    let features: Vec<Vec<f64>> = splits
        .train
        .iter()
        .map(|(x, _)| protectee.features(x).unwrap())
        .collect();
    let sep = Separation::compute(
        &mapper.map_batch(&features, splits.train.labels()).unwrap(),
        3,
    );
    assert!(sep.is_separated(0.5), "{sep:?}");
}
