use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use phaseuq::grid::{fft2_unitary, ComplexRaster, RealRaster};
use phaseuq::learner::{backward, forward, init_params, DropoutMode, IN_CHANNELS};
use phaseuq::optics::{make_pupil, ForwardModel, LedArrayGeometry};
use phaseuq::phantom::{gaussian_bumps, BumpSpec};
use phaseuq::preprocess::unwrap_phase;
use phaseuq::uqstats::{credibility_map, credible_bound, EnsembleSource, PredictiveEnsemble};
use std::hint::black_box;

fn phantom(n: usize) -> RealRaster {
    let spec = BumpSpec { count: 8, amplitude: (0.3, 1.0), sigma: (4.0, 10.0), peak: Some(1.0) };
    gaussian_bumps((n, n), 0.5, &spec, 1)
}

fn fft(c: &mut Criterion) {
    let mut g = c.benchmark_group("fft2_unitary");
    for n in [64, 256] {
        let x = ComplexRaster::from_phase(&phantom(n));
        g.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| b.iter(|| fft2_unitary(black_box(x)).unwrap()));
    }
    g.finish();
}

fn forward_model(c: &mut Criterion) {
    let geom = LedArrayGeometry::new(11, 11, 3.0, 80.0, 0.5).unwrap();
    let obj = ComplexRaster::from_phase(&phantom(256));
    let pupil = make_pupil(0.1, 0.5, (64, 64), 2.0).unwrap();
    let fm = ForwardModel::new(&obj, &pupil, (64, 64)).unwrap();
    let leds: Vec<usize> = (0..geom.led_count()).collect();
    c.bench_function("forward_stack_121_leds_256_to_64", |b| b.iter(|| fm.stack(&geom, black_box(&leds)).unwrap()));
}

fn unwrap(c: &mut Criterion) {
    let x = phantom(256);
    c.bench_function("unwrap_phase_256", |b| b.iter(|| unwrap_phase(black_box(&x))));
}

fn network(c: &mut Criterion) {
    let p = init_params(1);
    let input: Vec<RealRaster> = (0..IN_CHANNELS).map(|_| phantom(32)).collect();
    let target = phantom(32).map(|v| v.clamp(0.0, 1.0));
    c.bench_function("regressor_forward_32", |b| b.iter(|| forward(&p, black_box(&input), DropoutMode::Off).unwrap()));
    c.bench_function("regressor_backward_32", |b| {
        b.iter(|| backward(&p, black_box(&input), &target, DropoutMode::Sampled { rate: 0.1, seed: 3 }).unwrap())
    });
}

fn uq(c: &mut Criterion) {
    let pairs: Vec<(RealRaster, RealRaster)> = (0..8)
        .map(|k| (phantom(64).map(|v| v + 0.01 * k as f64), phantom(64).map(|v| 0.02 + 0.1 * v)))
        .collect();
    let ens = PredictiveEnsemble::from_mu_sigma(pairs, EnsembleSource::DeepEnsemble).unwrap();
    c.bench_function("credibility_map_64_p8", |b| b.iter(|| credibility_map(black_box(&ens), 0.05).unwrap()));
    c.bench_function("credible_bound_64_p8", |b| b.iter(|| credible_bound(black_box(&ens), 0.95, 1e-6).unwrap()));
}

criterion_group!(benches, fft, forward_model, unwrap, network, uq);
criterion_main!(benches);
