use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use homoscale::correlation::{global_correlation, local_correlation, FeatureMap};
use homoscale::estimator::{estimate, EstimatorConfig};
use homoscale::flow::{flow_from_homography, homography_from_flow};
use homoscale::objective::{loss_gradient, ChainContext, ChainParams, LossConfig};
use homoscale::synthesis::{build_chain, procedural_texture, ChainConfig};
use homoscale::{Homography, MeshGrid};

fn sample_h() -> Homography {
    Homography::from_row_slice(&[1.02, 0.03, 12.0, -0.02, 0.98, -7.0, 4e-5, -3e-5, 1.0]).unwrap()
}

fn algebra(c: &mut Criterion) {
    let g = MeshGrid::new(480, 320).unwrap();
    let h = sample_h();
    let f = flow_from_homography(&h, g).unwrap();
    c.bench_function("flow_from_homography 480x320", |b| b.iter(|| flow_from_homography(black_box(&h), g)));
    c.bench_function("homography_from_flow 480x320", |b| b.iter(|| homography_from_flow(black_box(&f), g)));
}

fn correlation(c: &mut Criterion) {
    let (w, h, d) = (32, 32, 16);
    let data = |s: u64| -> Vec<f64> { (0..w * h * d).map(|i| ((i as u64 * 2654435761 + s) % 1000) as f64 / 500.0 - 1.0).collect() };
    let a = FeatureMap::new(w, h, d, 1, data(1)).unwrap();
    let b = FeatureMap::new(w, h, d, 1, data(7)).unwrap();
    c.bench_function("global_correlation 32x32x16", |bn| bn.iter(|| global_correlation(black_box(&a), &b)));
    c.bench_function("local_correlation 32x32x16 r4", |bn| bn.iter(|| local_correlation(black_box(&a), &b, 4)));
}

fn objective(c: &mut Criterion) {
    let cfg = ChainConfig {
        crop_width: 240,
        crop_height: 160,
        resize_width: 128,
        resize_height: 128,
        max_perturbation: 16.0,
        ..ChainConfig::default()
    };
    let img = procedural_texture(320, 240, 1).unwrap();
    let chain = build_chain(&img, None, &cfg, 1).unwrap();
    let grid = MeshGrid::new(240, 160).unwrap();
    let ctx = ChainContext::new(&chain.hops, grid, MeshGrid::new(128, 128).unwrap()).unwrap();
    let bridges = chain.bridge_truths().unwrap().unwrap();
    let p = ChainParams::from_homographies(&chain.hops, &bridges, &chain.h_st.unwrap(), grid).unwrap();
    let x: Vec<f64> = p.to_vec().iter().enumerate().map(|(i, v)| v + (i % 5) as f64 - 2.0).collect();
    let p = ChainParams::from_slice(&x, chain.n()).unwrap();
    let loss = LossConfig::default();
    c.bench_function("loss_gradient n=2 240x160", |b| b.iter(|| loss_gradient(black_box(&p), &ctx, &loss)));
}

fn estimator(c: &mut Criterion) {
    let img = procedural_texture(640, 480, 2).unwrap();
    let chain = build_chain(&img, None, &ChainConfig { n: 0, ..ChainConfig::default() }, 2).unwrap();
    let cfg = EstimatorConfig::default();
    let mut g = c.benchmark_group("estimator");
    g.sample_size(10);
    g.bench_function("estimate 480x320", |b| b.iter(|| estimate(black_box(chain.source()), &chain.target, &cfg)));
    g.finish();
}

criterion_group!(benches, algebra, correlation, objective, estimator);
criterion_main!(benches);
