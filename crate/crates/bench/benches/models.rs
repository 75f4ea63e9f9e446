use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gridcast_bench::{dataset, tree_matrix};
use gridcast_core::arima::{self, SubsetArimaSpec};
use gridcast_core::narx::{self, Batch, LossKind, Mlp, NarxConfig};
use gridcast_core::trees::{fit_bagged, fit_lsboost, fit_tree, BoostParams, TreeParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn trees(c: &mut Criterion) {
    let m = tree_matrix(30);
    let s = m.samples();
    c.bench_function("fit_tree/30d", |b| b.iter(|| fit_tree(black_box(&s), &TreeParams::default())));
    c.bench_function("fit_bagged/30d/8", |b| b.iter(|| fit_bagged(black_box(&s), 8, 1).unwrap()));
    let p = BoostParams { iterations: 32, ..Default::default() };
    c.bench_function("lsboost/30d/32", |b| b.iter(|| fit_lsboost(black_box(&s), &p).unwrap()));
}

fn arima_fit(c: &mut Criterion) {
    let ds = dataset(60);
    let series = ds.rt_price.values();
    let spec = SubsetArimaSpec::default();
    c.bench_function("arima_fit/60d", |b| b.iter(|| arima::fit(black_box(series), &spec).unwrap()));
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let width = NarxConfig::default().input_len();
    let net = Mlp::random(vec![width, 10, 1], &mut rng);
    let x: Vec<f64> = (0..64 * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = Batch { x: &x, y: &y, width };
    c.bench_function("mlp_forward/64", |b| {
        b.iter(|| (0..64).map(|r| net.forward(batch.row(r))).sum::<f64>())
    });
    c.bench_function("mlp_gradient/64", |b| {
        b.iter_batched(|| batch, |bt| narx::gradient(&net, bt, LossKind::Mae), BatchSize::SmallInput)
    });
}

criterion_group!(benches, trees, arima_fit, network);
criterion_main!(benches);
