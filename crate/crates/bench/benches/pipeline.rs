use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use rstab_core::data::synth_scene;
use rstab_core::density::{DensityHead, DensityModel, HIDDEN};
use rstab_core::features::FEATURE_CHANNELS;
use rstab_core::rayrange::{forward_warp_depth, splat, SplatMode};
use rstab_core::renderer::{render_frame, RenderConfig, SourceFrames};
use rstab_core::trajectory::smooth_trajectory;
use rstab_core::{Preset, SceneSpec};

fn bench_pipeline(c: &mut Criterion) {
    let dataset = synth_scene(&SceneSpec::preset(Preset::Dynamic, 7)).unwrap();
    let k = dataset.intrinsics;
    let poses = smooth_trajectory(&dataset.poses().unwrap(), 21, 4.0).unwrap();
    let target = poses.poses()[15];
    let src = SourceFrames::new(&dataset);
    let cfg = RenderConfig::default();
    let analytic = DensityModel::default();
    let mlp = DensityModel::Mlp(DensityHead::init(FEATURE_CHANNELS, HIDDEN, 0));

    c.bench_function("render_frame/analytic", |b| {
        b.iter(|| render_frame(&src, &analytic, &cfg, 15, black_box(&target)).unwrap())
    });
    c.bench_function("render_frame/mlp", |b| {
        b.iter(|| render_frame(&src, &mlp, &cfg, 15, black_box(&target)).unwrap())
    });

    let f = &dataset.frames[10];
    c.bench_function("warp_and_splat", |b| {
        b.iter(|| {
            let s = forward_warp_depth(&f.depth, &f.pose, black_box(&target), &k);
            splat(&s, k.width, k.height, SplatMode::Average)
        })
    });

    let head = DensityHead::init(FEATURE_CHANNELS, HIDDEN, 0);
    let input: Vec<f64> = (0..head.input_len()).map(|i| (i as f64 * 0.37).sin()).collect();
    c.bench_function("density_head/forward", |b| b.iter(|| head.forward(black_box(&input))));
    c.bench_function("density_head/backward", |b| b.iter(|| head.backward(black_box(&input), 1.0)));
}

criterion_group!(benches, bench_pipeline);
criterion_main!(benches);
