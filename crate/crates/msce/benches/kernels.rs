use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use msce::model::{
    msce_logposterior, MSCEParams, PiecewiseLinearFn, QuantityProfiles,
};
use msce::synth::{generate_conditioned, SynthSpec};

fn fixture_params() -> MSCEParams {
    let nodes = vec![100.0, 250.0, 400.0];
    let pwl = |vals: [f64; 3]| PiecewiseLinearFn::new(nodes.clone(), vals.to_vec()).unwrap();
    let profile = |a: [f64; 3]| QuantityProfiles {
        alpha: pwl(a),
        beta: pwl([0.25, 0.15, 0.05]),
        mu: pwl([0.3, 0.15, 0.0]),
        sigma: pwl([0.8, 1.1, 1.3]),
        delta: pwl([1.9, 1.5, 1.1]),
    };
    MSCEParams {
        profiles: vec![profile([0.85, 0.55, 0.25]), profile([0.75, 0.45, 0.2])],
        lambda: vec![0.85],
        rho: vec![0.7, 0.6, 0.65],
        kappa: vec![0.25, 0.2, 0.22],
        rho_unit_km: 100.0,
        kappa_unit: 5.0,
    }
}

fn fixture_spec(n_events: usize) -> SynthSpec {
    SynthSpec {
        quantities: vec!["hs".into(), "ws".into()],
        n_events,
        u_quantile: 0.75,
        seed: 99,
        true_params: fixture_params(),
        distances_km: vec![100.0, 200.0, 300.0, 400.0],
        physical: None,
    }
}

fn bench_logposterior(c: &mut Criterion) {
    let spec = fixture_spec(400);
    let params = fixture_params();
    let data = generate_conditioned(&spec).unwrap();

    let mut group = c.benchmark_group("logposterior_n400");
    group.bench_function("default_pool", |b| {
        b.iter(|| msce_logposterior(black_box(&params), black_box(&data)).unwrap())
    });
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function("single_thread", |b| {
            b.iter(|| {
                pool.install(|| msce_logposterior(black_box(&params), black_box(&data)).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_generation(c: &mut Criterion) {
    let spec = fixture_spec(500);
    let mut group = c.benchmark_group("generate_n500");
    group.bench_function("default_pool", |b| {
        b.iter(|| generate_conditioned(black_box(&spec)).unwrap())
    });
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function("single_thread", |b| {
            b.iter(|| pool.install(|| generate_conditioned(black_box(&spec)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_logposterior, bench_generation);
criterion_main!(benches);
