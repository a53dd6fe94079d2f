use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tsrisk::attention::frequency_enhanced_values;
use tsrisk::data::{compute_features, make_windows, synth_generate, Split, SplitRatios, SynthConfig, WindowSpec};
use tsrisk::model::{ForecastModel, ModelConfig};
use tsrisk::numeric::{fft, ModeSet, RngState, Tensor};
use tsrisk::risk::RiskConfig;
use tsrisk::training::{window_loss, Labelled};

fn bench_fft(c: &mut Criterion) {
    let mut group = c.benchmark_group("fft");
    let mut rng = RngState::new(1);
    // powers of two take the radix-2 path, the others Bluestein
    for n in [256usize, 1000, 1024, 4096] {
        let x = rng.normals(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| fft(black_box(x)).unwrap())
        });
    }
    group.finish();
}

fn bench_feb(c: &mut Criterion) {
    let mut group = c.benchmark_group("frequency_enhanced_block");
    let (d, m) = (16usize, 16usize);
    let mut rng = RngState::new(2);
    for t in [1024usize, 4096] {
        let x = Tensor::matrix(t, d, rng.normals(t * d));
        let modes = ModeSet::lowest(t, m).unwrap();
        let wr = Tensor::matrix(modes.count(), d, rng.normals(modes.count() * d));
        let wi = Tensor::matrix(modes.count(), d, rng.normals(modes.count() * d));
        group.bench_function(BenchmarkId::from_parameter(t), |b| {
            b.iter(|| frequency_enhanced_values(black_box(&x), &wr, &wi, &modes).unwrap())
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let s = synth_generate(&SynthConfig {
        n: 600,
        ..SynthConfig::default()
    })
    .unwrap();
    let f = compute_features(&s.frame, Default::default()).unwrap();
    let spec = WindowSpec {
        seq_len: 256,
        horizon: 24,
        stride: 64,
    };
    let set = make_windows(&f, spec, SplitRatios::train_only()).unwrap();
    let batch = set.get(Split::Train).unwrap();
    let labels = vec![0.0; batch.len()];
    let data = Labelled::new(batch, &labels).unwrap();
    let model = ForecastModel::new(ModelConfig::default(), RiskConfig::default(), 1).unwrap();
    let plan = model.plan().unwrap();

    let mut group = c.benchmark_group("model_window");
    group.sample_size(20);
    group.bench_function("forward", |b| {
        b.iter(|| window_loss(&model, &plan, data, 0, false, &mut RngState::new(0), false).unwrap())
    });
    group.bench_function("forward_backward", |b| {
        b.iter(|| window_loss(&model, &plan, data, 0, true, &mut RngState::new(0), true).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_fft, bench_feb, bench_model);
criterion_main!(benches);
