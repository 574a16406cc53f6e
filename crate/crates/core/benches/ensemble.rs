use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mgrelax::cycles::CycleKind;
use mgrelax::optimizer::{batch_loss, Batch, RateProtocol, TrainConfig};
use mgrelax::par::Execution;
use mgrelax::problem::EnsembleSpec;
use mgrelax::smoothers::SmootherSpec;
use mgrelax::spectral::RateWindow;
use mgrelax::transfer::ProlongationKind;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn rate_ensemble(c: &mut Criterion) {
    let mut group = c.benchmark_group("w_cycle_rates_m32");
    group.sample_size(10);
    for (name, execution) in MODES {
        let prepared = RateProtocol {
            ensemble: EnsembleSpec::lognormal(32),
            samples: 8,
            seed: 1,
            delta: 0.0,
            cycle: CycleKind::W,
            pre: 1,
            post: 0,
            prolongation: ProlongationKind::Blackbox,
            coarsest_m: 4,
            window: RateWindow::default(),
            execution,
        }
        .prepare()
        .expect("protocol");
        let smoother = SmootherSpec::four_color([0.75, 1.12, 1.12, 1.05]);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| prepared.evaluate(&smoother).expect("rates"))
        });
    }
    group.finish();
}

fn gelfand_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_loss_m16");
    group.sample_size(10);
    for (name, execution) in MODES {
        let mut config = TrainConfig::four_color(16, 8, 40, 1e-4, 1);
        config.execution = execution;
        let batch = Batch::generate(&config, 0, 8).expect("batch");
        let theta = [0.75, 1.1, 1.1, 1.05];
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_loss(&theta, &batch, &config).expect("loss"))
        });
    }
    group.finish();
}

criterion_group!(benches, rate_ensemble, gelfand_batch);
criterion_main!(benches);
