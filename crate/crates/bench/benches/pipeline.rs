use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use patchmap::dino::{dino_loss, preprocess};
use patchmap::*;
use patchmap_bench::{bench_features, bench_image};

fn tiling(c: &mut Criterion) {
    let img = bench_image();
    let spec = TileSpec::default();
    c.bench_function("tile 1000x1000 (256 patches)", |b| b.iter(|| tile(black_box(&img), &spec).unwrap()));
    c.bench_function("mirror_pad 1000x1000 by 128", |b| b.iter(|| mirror_pad(black_box(&img), 128).unwrap()));
}

fn clustering(c: &mut Criterion) {
    let x = bench_features(2000);
    let mut g = c.benchmark_group("clustering");
    g.sample_size(10);
    g.bench_function("kmeans k=8 n=2000 d=64", |b| {
        b.iter(|| kmeans_fit(black_box(&x), &KMeansConfig::new(8, 0)).unwrap())
    });
    let (_, a) = kmeans_fit(&x, &KMeansConfig::new(8, 0)).unwrap();
    g.bench_function("silhouette n=2000 d=64", |b| b.iter(|| silhouette_mean(black_box(&x), &a).unwrap()));
    g.finish();
}

fn encoder(c: &mut Criterion) {
    let vit = ViTConfig::toy();
    let params = ViTParams::<f32>::init(&vit, 0).unwrap();
    let img = bench_image().crop(0, 0, vit.input_size, vit.input_size).unwrap();
    let input: Vec<f32> = preprocess(&img, vit.input_size).unwrap().into_iter().map(|v| v as f32).collect();
    c.bench_function("vit_forward toy 64px", |b| b.iter(|| vit_forward(&params, &vit, black_box(&input)).unwrap()));

    let state = DinoState::<f32>::new(&vit, 0).unwrap();
    let cfg = DinoConfig::default();
    let views = |n: usize| vec![input.clone(); n];
    let (globals, locals) = (views(cfg.global_crops), views(cfg.local_crops));
    let mut g = c.benchmark_group("dino");
    g.sample_size(10);
    g.bench_function("loss + gradients, 2 global + 4 local views", |b| {
        b.iter(|| dino_loss(&state, &vit, black_box(&globals), &locals, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, tiling, clustering, encoder);
criterion_main!(benches);
