use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use radmark::dataset::select_marking_targets;
use radmark::dataset::toy::ToyTaskConfig;
use radmark::exec::{ComputeProfile, ExecPolicy};
use radmark::marker::{mark_dataset, EmbedParams};
use radmark::nn::{train, Architecture, Network, Normalization, TrainConfig};
use radmark::stats::{generate_carriers, mc_null_samples};

const POLICIES: [(&str, ExecPolicy); 2] = [
    ("sequential", ExecPolicy::Sequential),
    ("parallel", ExecPolicy::Parallel),
];

fn setup() -> (radmark::dataset::LabeledImageDataset, Network) {
    let cfg = ToyTaskConfig {
        train_per_class: 16,
        test_per_class: 1,
        ..ToyTaskConfig::default()
    };
    let (train, _) = cfg.generate().unwrap();
    let spec = Architecture::DeskCnn.spec(cfg.shape(), cfg.classes);
    let norm = Normalization::from_images(train.images.iter().map(|x| x.as_slice()), cfg.shape());
    (train, Network::new(spec, norm, 7).unwrap())
}

fn bench(c: &mut Criterion) {
    let (data, net) = setup();

    let mut g = c.benchmark_group("mark_16_images_20_steps");
    g.sample_size(10);
    let selection = select_marking_targets(&data, 0.125, 1).unwrap();
    let carriers = generate_carriers(data.class_count(), net.feature_dim(), 3).unwrap();
    let params = EmbedParams {
        steps: 20,
        ..EmbedParams::default()
    };
    for (name, policy) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mark_dataset(&data, &selection, &carriers, &net, &params, policy).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("train_one_epoch_128_images");
    g.sample_size(10);
    let targets = data.one_hot();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    for (name, policy) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut n = net.clone();
                train(
                    &mut n,
                    &data.images,
                    &targets,
                    &cfg,
                    policy,
                    ComputeProfile::Deterministic,
                )
                .unwrap()
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("null_cosines_100k_d64");
    g.sample_size(10);
    for (name, policy) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mc_null_samples(64, 100_000, 11, policy).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
