use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use queen_core::data::DatasetSpec;
use queen_core::mapper::{supcon_loss_and_grad, Feature2D};
use queen_core::pipeline::{train_components, Defender, ExperimentConfig};
use queen_core::simplex::{optimize_valid_softmax, OptimizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetSpec {
            train_per_class: 100,
            test_per_class: 20,
            aux_per_class: 100,
            ..DatasetSpec::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.models.mapper_train.epochs = 20;
    cfg
}

fn serve(c: &mut Criterion) {
    let cfg = small_config();
    let trained = train_components(&cfg).unwrap();
    let queries: Vec<Vec<f64>> = trained.splits.aux.iter().map(|(x, _)| x.to_vec()).collect();
    let base = Defender::from_config(&trained, &cfg).unwrap();

    for (name, t) in [
        ("serve_one/default_t", cfg.defense.t),
        ("serve_one/t0", 0.0),
    ] {
        c.bench_function(name, |b| {
            b.iter_batched_ref(
                || {
                    let mut d = base.fresh_session().unwrap();
                    d.threshold = t;
                    (d, 0usize)
                },
                |(d, i)| {
                    for _ in 0..100 {
                        black_box(d.serve_one(&queries[*i % queries.len()]).unwrap());
                        *i += 1;
                    }
                },
                BatchSize::SmallInput,
            )
        });
    }
}

fn supcon(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<Feature2D> = (0..128)
        .map(|i| {
            Feature2D::new(
                [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                i % 10,
            )
        })
        .collect();
    c.bench_function("supcon_loss_and_grad/128", |b| {
        b.iter(|| supcon_loss_and_grad(black_box(&batch), 0.1).unwrap())
    });
}

fn simplex(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let targets: Vec<Vec<f64>> = (0..64)
        .map(|_| (0..10).map(|_| rng.random_range(-0.5..1.0)).collect())
        .collect();
    let cfg = OptimizerConfig::default();
    c.bench_function("optimize_valid_softmax/10", |b| {
        b.iter(|| {
            for t in &targets {
                black_box(optimize_valid_softmax(t, &cfg));
            }
        })
    });
}

criterion_group!(benches, serve, supcon, simplex);
criterion_main!(benches);
