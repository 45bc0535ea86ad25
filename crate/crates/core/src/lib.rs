//! Texture segmentation of large grayscale images.
//!
//! The pipeline tiles an image into overlapping mirror-padded patches
//! ([`imaging`]), embeds each patch with a small vision transformer trained by
//! self-distillation ([`vit`], [`dino`]), clusters the embeddings with k-means
//! and silhouette-guided choice of k ([`clustering`]), and paints the resulting
//! cluster map over the source image with annotator-chosen colors ([`overlay`]).

pub mod autodiff;
pub mod checkpoint;
pub mod clustering;
pub mod dino;
pub mod error;
pub mod features;
pub mod fsutil;
pub mod imaging;
pub mod kv;
pub mod manifest;
pub mod overlay;
pub mod synth;
pub mod vit;

pub use checkpoint::Checkpoint;
pub use clustering::{
    adjusted_rand_index, assign, kmeans_fit, pick_k, silhouette_mean, sweep_k, Assignment, ClusterModel,
    KMeansConfig, KSweepResult, PickRule, SweepConfig,
};
pub use dino::{DinoConfig, DinoState, FeatureSource};
pub use error::{Error, Result};
pub use features::{load_features, save_features, FeatureMatrix};
pub use imaging::{mirror_pad, tile, GrayImage, Patch, PatchGrid, TileSpec};
pub use manifest::{ImageEntry, ProjectManifest};
pub use overlay::{
    pixel_labels, render_overlay, severity_histogram, Annotation, AnnotationSet, ClusterMap, Color, PixelLabelMap,
    RenderOptions, ResolveMode, Severity,
};
pub use synth::{gen_image, TextureKind, TextureSpec};
pub use vit::{vit_forward, ViTConfig, ViTParams};
