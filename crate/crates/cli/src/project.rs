//! A project directory: the manifest plus the files it points to.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patchmap::{tile, ClusterMap, GrayImage, ImageEntry, Patch, ProjectManifest};

pub const FEATURES_FILE: &str = "features.bin";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MODEL_FILE: &str = "clusters.txt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const MAPS_DIR: &str = "maps";
pub const OVERLAYS_DIR: &str = "overlays";

pub struct Project {
    pub dir: PathBuf,
    pub manifest: ProjectManifest,
}

impl Project {
    /// Opens `dir`, creating it and starting an empty manifest if needed.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating project directory {}", dir.display()))?;
        let manifest = ProjectManifest::load_or_default(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Opens an existing project; a directory without a manifest is an error.
    pub fn open_existing(dir: &Path) -> Result<Self> {
        if !ProjectManifest::path_in(dir).exists() {
            bail!("{} has no {}", dir.display(), patchmap::manifest::MANIFEST_FILE);
        }
        Self::open(dir)
    }

    pub fn save(&self) -> Result<()> {
        self.manifest.save(&self.dir)?;
        Ok(())
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        ProjectManifest::resolve(&self.dir, p)
    }

    /// Path to record in the manifest: relative when inside the project, absolute otherwise.
    pub fn record_path(&self, p: &Path) -> Result<PathBuf> {
        let abs = std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))?;
        let root = std::path::absolute(&self.dir)?;
        Ok(abs.strip_prefix(&root).map(Path::to_path_buf).unwrap_or(abs))
    }

    pub fn image_entry(&self, id: &str) -> Result<&ImageEntry> {
        self.manifest
            .image(id)
            .with_context(|| format!("no image {id:?} in the manifest"))
    }

    pub fn load_image(&self, entry: &ImageEntry) -> Result<GrayImage> {
        let img = GrayImage::load(self.path(&entry.path)).with_context(|| format!("loading image {:?}", entry.id))?;
        if (img.width(), img.height()) != (entry.width, entry.height) {
            bail!(
                "image {:?} is {}x{} on disk but {}x{} in the manifest",
                entry.id,
                img.width(),
                img.height(),
                entry.width,
                entry.height
            );
        }
        Ok(img)
    }

    /// The image's patches under the manifest tile spec. The image must have been tiled.
    pub fn patches(&self, entry: &ImageEntry) -> Result<Vec<Patch>> {
        let Some(grid) = entry.grid else {
            bail!("image {:?} has not been tiled; run `patchmap tile --id {}`", entry.id, entry.id);
        };
        let (g, patches) = tile(&self.load_image(entry)?, &self.manifest.tile)?;
        if g != grid {
            bail!("image {:?} grid is stale; re-run `patchmap tile`", entry.id);
        }
        Ok(patches)
    }

    /// Every tiled image with its patches, in manifest order.
    pub fn all_patches(&self) -> Result<Vec<Patch>> {
        if self.manifest.images.is_empty() {
            bail!("the project has no images; run `patchmap tile --in <image>` first");
        }
        let mut out = Vec::with_capacity(self.manifest.total_patches());
        for entry in &self.manifest.images {
            out.extend(self.patches(entry)?);
        }
        Ok(out)
    }

    pub fn cluster_map(&self, entry: &ImageEntry) -> Result<ClusterMap> {
        let Some(p) = &entry.cluster_map else {
            bail!("image {:?} has no cluster map; run `patchmap cluster`", entry.id);
        };
        Ok(ClusterMap::load(self.path(p))?)
    }

    /// Drops every artifact derived from the patch set.
    pub fn invalidate_features(&mut self) {
        self.manifest.features = None;
        self.invalidate_clusters();
    }

    pub fn invalidate_clusters(&mut self) {
        self.manifest.model = None;
        for img in &mut self.manifest.images {
            img.cluster_map = None;
        }
    }
}

pub fn file_stem_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .filter(|s| !s.is_empty())
        .with_context(|| format!("cannot derive an image id from {}", path.display()))
}
