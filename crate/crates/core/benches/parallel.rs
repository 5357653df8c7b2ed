//! Sequential vs rayon throughput on the data-parallel inner loops:
//! per-device local training fan-out, evaluation, and a short full run.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use feelsim::config::{DataSource, RunConfig};
use feelsim::data::{synth_corpus, Sample};
use feelsim::exec::{self, ExecMode};
use feelsim::importance::ImportanceVariant;
use feelsim::learner::{evaluate_with_mode, local_train, Architecture, GlobalModel, SgdConfig};
use feelsim::rng::{RngFactory, StreamPurpose};
use feelsim::sim::{SchedulerKind, Simulation};

const MODES: &[(&str, ExecMode)] = &[
    ("sequential", ExecMode::Sequential),
    #[cfg(feature = "parallel")]
    ("rayon", ExecMode::Parallel),
];

fn bench_local_train_fanout(c: &mut Criterion) {
    let factory = RngFactory::new(1);
    let devices = 32usize;
    let per_device = 512usize;
    let arch = Architecture::SoftmaxLinear {
        feature_dim: 32,
        classes: 10,
    };
    let model = GlobalModel::random_init(arch, 0.01, &mut factory.stream(StreamPurpose::ModelInit, 0, 0));
    let data: Vec<Vec<Sample>> = (0..devices)
        .map(|d| {
            synth_corpus(
                10,
                per_device,
                32,
                3.0,
                &mut factory.stream(StreamPurpose::SynthCorpus, d as u64, 0),
            )
        })
        .collect();
    let sgd = SgdConfig {
        local_steps: 25,
        batch_size: 32,
        learning_rate: 0.05,
    };
    let ids: Vec<usize> = (0..devices).collect();

    let mut group = c.benchmark_group("local_train_fanout");
    for (name, mode) in MODES {
        group.bench_function(*name, |b| {
            b.iter(|| {
                let updates = exec::map_collect(*mode, &ids, |&d| {
                    let refs: Vec<&Sample> = data[d].iter().collect();
                    let mut rng = factory.stream(StreamPurpose::LocalTrain, d as u64, 1);
                    local_train(&model, &refs, &sgd, &mut rng).unwrap()
                });
                black_box(updates)
            });
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let factory = RngFactory::new(2);
    let arch = Architecture::Mlp {
        feature_dim: 32,
        hidden: 32,
        classes: 10,
    };
    let model = GlobalModel::random_init(arch, 0.05, &mut factory.stream(StreamPurpose::ModelInit, 0, 0));
    let eval = synth_corpus(10, 50_000, 32, 3.0, &mut factory.stream(StreamPurpose::SynthCorpus, 0, 0));
    let refs: Vec<&Sample> = eval.iter().collect();

    let mut group = c.benchmark_group("evaluate");
    for (name, mode) in MODES {
        group.bench_function(*name, |b| {
            b.iter(|| black_box(evaluate_with_mode(&model, &refs, *mode).unwrap()));
        });
    }
    group.finish();
}

fn bench_full_run(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.system.num_devices = 16;
    cfg.system.sched_cardinality = 8;
    cfg.system.total_rounds = 10;
    cfg.data = DataSource::Synth {
        classes: 10,
        samples: 8_000,
        feature_dim: 32,
        separation: 3.0,
        test_samples: 4_000,
    };
    cfg.sgd = SgdConfig {
        local_steps: 20,
        batch_size: 32,
        learning_rate: 0.05,
    };
    cfg.eval_every = 1;

    let mut group = c.benchmark_group("simulate_10_rounds");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(*name, |b| {
            b.iter(|| {
                let sim = Simulation::from_config(
                    &cfg,
                    SchedulerKind::Proposed(ImportanceVariant::Combined),
                )
                .unwrap()
                .with_exec_mode(*mode);
                black_box(sim.run().unwrap())
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_local_train_fanout, bench_evaluate, bench_full_run);
criterion_main!(benches);
