//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use patchmap::synth::{gen_texture, TextureSpec};
use patchmap::{tile, DinoConfig, FeatureMatrix, GrayImage, Patch, TileSpec, ViTConfig};

/// Small model used by the end-to-end runs: 32-px inputs, 16 tokens, 32-wide embeddings.
pub fn toy_vit() -> ViTConfig {
    ViTConfig {
        input_size: 32,
        token_patch: 8,
        embed_dim: 32,
        depth: 2,
        heads: 4,
        mlp_ratio: 2,
        proto_dim: 64,
    }
}

/// Model small enough for exhaustive finite differences.
pub fn gradcheck_vit() -> ViTConfig {
    ViTConfig {
        input_size: 8,
        token_patch: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        proto_dim: 6,
    }
}

pub fn corpus_tiles() -> TileSpec {
    TileSpec::new(64, 32, 0).unwrap()
}

/// Four texture classes, `per_class` single-texture 192×192 images each, cut into
/// 64-px patches. Returns the images, the patches and the class of every patch.
pub fn texture_corpus(seed: u64, per_class: u64) -> (Vec<GrayImage>, Vec<Patch>, Vec<usize>) {
    let mut images = Vec::new();
    let mut patches = Vec::new();
    let mut truth = Vec::new();
    for (class, base) in TextureSpec::default_classes(seed).iter().enumerate() {
        for i in 0..per_class {
            let mut spec = *base;
            spec.seed = spec.seed * 100 + i;
            let img = gen_texture(192, 192, &spec).unwrap();
            let (_, p) = tile(&img, &corpus_tiles()).unwrap();
            truth.extend(std::iter::repeat_n(class, p.len()));
            patches.extend(p);
            images.push(img);
        }
    }
    (images, patches, truth)
}

/// 16-bin intensity histogram of every patch: the texture-blind baseline.
pub fn histogram_features(patches: &[Patch]) -> FeatureMatrix {
    let rows: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| {
            let mut h = vec![0.0; 16];
            let w = 1.0 / p.pixels.len() as f64;
            p.pixels.iter().for_each(|&v| h[v as usize / 16] += w);
            h
        })
        .collect();
    FeatureMatrix::from_f64_rows(&rows).unwrap()
}

pub fn toy_dino(seed: u64, epochs: usize) -> DinoConfig {
    DinoConfig {
        epochs,
        seed,
        batch_size: 16,
        ..DinoConfig::default()
    }
}
