use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use patchmap::{FeatureSource, ResolveMode, TextureKind};

#[derive(Debug, Parser)]
#[command(name = "patchmap", version, about = "Texture segmentation of large grayscale images")]
pub struct Cli {
    /// Project directory holding manifest.json [default: current directory]
    #[arg(long, global = true, env = "PATCHMAP_DATA_DIR", value_name = "DIR")]
    pub project: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register an image and cut it into overlapping patches
    Tile(TileArgs),
    /// Train the patch encoder on every tiled image
    Train(TrainArgs),
    /// Embed every patch with the trained encoder
    Extract(ExtractArgs),
    /// Cluster the patch features and write per-image cluster maps
    Cluster(ClusterArgs),
    /// Score a range of cluster counts by silhouette
    Sweep(SweepArgs),
    /// Render annotated cluster maps over the source images
    Overlay(OverlayArgs),
    /// Generate synthetic textures or feature blobs
    Synth(SynthArgs),
    /// Serve the annotation API
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Image to add (PNG or PGM); without it, already registered images are re-tiled
    #[arg(long = "in", value_name = "IMAGE")]
    pub input: Option<PathBuf>,
    /// Image id [default: file stem of --in]
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub pad: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// 64-px inputs, 64-wide embeddings
    Toy,
    /// 256-px inputs, 768-wide embeddings
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "toy")]
    pub preset: Preset,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub token_patch: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    pub proto_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Teacher EMA momentum
    #[arg(long)]
    pub ema: Option<f64>,
    #[arg(long)]
    pub student_temp: Option<f64>,
    #[arg(long)]
    pub teacher_temp: Option<f64>,
    #[arg(long)]
    pub local_crops: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path [default: <project>/model.ckpt]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Source {
    Teacher,
    Student,
}

impl From<Source> for FeatureSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Teacher => FeatureSource::Teacher,
            Source::Student => FeatureSource::Student,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Network whose embeddings are used [default: as recorded in the checkpoint]
    #[arg(long, value_enum)]
    pub source: Option<Source>,
    /// Feature file [default: <project>/features.bin]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Number of clusters; without it k is picked from a silhouette sweep
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub kmin: usize,
    #[arg(long, default_value_t = 16)]
    pub kmax: usize,
    /// Relative silhouette tolerance when picking k
    #[arg(long, default_value_t = patchmap::clustering::DEFAULT_PICK_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value_t = 2)]
    pub kmin: usize,
    #[arg(long, default_value_t = 16)]
    pub kmax: usize,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Feature file [default: the project's]
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// CSV output [default: <project>/sweep.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    /// Image id [default: every image]
    #[arg(long)]
    pub image: Option<String>,
    /// Output PNG (only with --image) [default: <project>/overlays/<id>.png]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    /// Draw patch grid lines
    #[arg(long)]
    pub grid: bool,
    /// Print the cluster number in every grid cell
    #[arg(long)]
    pub numbers: bool,
    /// Pixel label resolution [default: as recorded in the manifest]
    #[arg(long)]
    pub resolve: Option<ResolveMode>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(subcommand)]
    pub what: SynthKind,
}

#[derive(Debug, Subcommand)]
pub enum SynthKind {
    /// Textured image; one texture fills it, four fill its quadrants
    Image {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        width: usize,
        #[arg(long, default_value_t = 1000)]
        height: usize,
        /// Texture, e.g. stripes:30:8, checker:8, blobs:0.02, noise:40 [default: the four reference classes]
        #[arg(long = "texture")]
        textures: Vec<TextureKind>,
        /// Region-index label map to write alongside
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Add the image to the project manifest under this id
        #[arg(long)]
        register: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gaussian blobs in feature space, installed as the project's features
    Blobs {
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        per_cluster: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Feature file [default: <project>/features.bin]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ground-truth labels, one per line
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// 0 picks a free port; the bound address is printed on stdout
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}
