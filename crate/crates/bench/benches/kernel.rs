use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use wedgeheat::heat_kernel;
use wedgeheat_bench::{kernel_points, reflex_config};

fn kernel(c: &mut Criterion) {
    let cfg = reflex_config();
    let series = cfg.clone().series_only();
    let mut g = c.benchmark_group("heat_kernel");
    for (label, t, x, y) in kernel_points(&cfg) {
        g.bench_function(label, |b| b.iter(|| heat_kernel(&cfg, black_box(t), x, y).unwrap()));
        g.bench_function(format!("{label}_series_only"), |b| b.iter(|| heat_kernel(&series, black_box(t), x, y).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, kernel);
criterion_main!(benches);
