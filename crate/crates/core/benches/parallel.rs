use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use isochron::config::bundled;
use isochron::flow::flow_trace_sums;
use isochron::par::Exec;

fn bench(c: &mut Criterion) {
    let cfg = bundled("nagumo_wave").unwrap();
    let model = cfg.build_model().unwrap();
    let fam = Arc::new(cfg.find_wave(model).unwrap());
    let pm = cfg.phase_map(fam.clone()).unwrap();
    let noise = cfg.noise_model(fam.model()).unwrap();
    let spde = isochron::stochastic::Spde::new(&fam, &noise, cfg.delta(&fam)).unwrap();
    let x0 = fam.profile().clone();
    let k = fam.model().dim();

    let mut g = c.benchmark_group("exec");
    g.sample_size(10);
    for (name, exec) in [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)] {
        g.bench_with_input(BenchmarkId::new("flow_trace_sums", name), &exec, |b, &e| {
            b.iter(|| flow_trace_sums(pm.propagator(), &x0, 0.5, k, e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("ensemble", name), &exec, |b, &e| {
            b.iter(|| spde.ensemble(&x0.coeffs, 0.2, 0.01, 1, 8, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
