//! Shared inputs for the criterion benchmarks.

use patchmap::synth::{gaussian_blobs, gen_texture, TextureSpec};
use patchmap::{FeatureMatrix, GrayImage};

/// A 1000×1000 checkerboard-plus-noise texture.
pub fn bench_image() -> GrayImage {
    let spec = TextureSpec::default_classes(7)[1];
    gen_texture(1000, 1000, &spec).expect("valid texture")
}

/// `n` points in 64 dimensions drawn around eight well-separated centers.
pub fn bench_features(n: usize) -> FeatureMatrix {
    gaussian_blobs(8, n.div_ceil(8), 64, 6.0, 1.0, 11).expect("valid blobs").0
}
