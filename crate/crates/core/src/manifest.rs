//! Project manifest: the JSON index tying images, patches, features, models and
//! annotations of one project directory together.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{PatchGrid, TileSpec};
use crate::overlay::ResolveMode;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    /// Relative to the project directory unless absolute.
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    /// Set once the image has been tiled.
    #[serde(default)]
    pub grid: Option<PatchGrid>,
    /// Row of this image's first patch in the project feature matrix.
    #[serde(default)]
    pub first_patch: usize,
    #[serde(default)]
    pub cluster_map: Option<PathBuf>,
}

impl ImageEntry {
    pub fn patch_count(&self) -> usize {
        self.grid.map_or(0, |g| g.len())
    }
}

/// `None` paths are pending: the stage producing them has not run yet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub version: u32,
    pub tile: TileSpec,
    #[serde(default)]
    pub images: Vec<ImageEntry>,
    #[serde(default)]
    pub features: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    pub annotations: PathBuf,
    #[serde(default)]
    pub resolve: ResolveMode,
}

impl Default for ProjectManifest {
    fn default() -> Self {
        Self {
            version: 1,
            tile: TileSpec::default(),
            images: Vec::new(),
            features: None,
            checkpoint: None,
            model: None,
            annotations: PathBuf::from("annotations.toml"),
            resolve: ResolveMode::default(),
        }
    }
}

impl ProjectManifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path_in(dir);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        m.check_ids()?;
        Ok(m)
    }

    /// Loads the manifest, or starts an empty one if the directory has none.
    pub fn load_or_default(dir: &Path) -> Result<Self> {
        if Self::path_in(dir).exists() {
            Self::load(dir)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.check_ids()?;
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        text.push('\n');
        crate::fsutil::write_atomic(&Self::path_in(dir), text.as_bytes())
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for img in &self.images {
            if !seen.insert(img.id.as_str()) {
                return Err(Error::Config(format!("duplicate image id {:?}", img.id)));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Adds or replaces the entry with the same id, keeping list order.
    pub fn upsert_image(&mut self, entry: ImageEntry) {
        match self.images.iter_mut().find(|i| i.id == entry.id) {
            Some(slot) => *slot = entry,
            None => self.images.push(entry),
        }
    }

    /// Recomputes every image's `first_patch` from the list order.
    pub fn reindex_patches(&mut self) {
        let mut next = 0;
        for img in &mut self.images {
            img.first_patch = next;
            next += img.patch_count();
        }
    }

    pub fn total_patches(&self) -> usize {
        self.images.iter().map(ImageEntry::patch_count).sum()
    }

    /// Maps a global patch row back to `(image index, patch index within the image)`.
    pub fn locate_patch(&self, row: usize) -> Option<(usize, usize)> {
        self.images
            .iter()
            .enumerate()
            .find(|(_, img)| (img.first_patch..img.first_patch + img.patch_count()).contains(&row))
            .map(|(i, img)| (i, row - img.first_patch))
    }

    pub fn resolve(dir: &Path, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            dir.join(path)
        }
    }

    /// Every non-pending path must exist.
    pub fn check_files(&self, dir: &Path) -> Result<()> {
        let mut paths: Vec<&Path> = self.images.iter().map(|i| i.path.as_path()).collect();
        paths.extend(self.images.iter().filter_map(|i| i.cluster_map.as_deref()));
        paths.extend([&self.features, &self.checkpoint, &self.model].into_iter().filter_map(|p| p.as_deref()));
        for p in paths {
            if !Self::resolve(dir, p).exists() {
                return Err(Error::Config(format!("manifest references missing file {}", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, side: usize) -> ImageEntry {
        ImageEntry {
            id: id.into(),
            path: PathBuf::from(format!("{id}.png")),
            width: side,
            height: side,
            grid: Some(TileSpec::default().grid(side, side).unwrap()),
            first_patch: 0,
            cluster_map: None,
        }
    }

    #[test]
    fn round_trip_and_indexing() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ProjectManifest::default();
        m.upsert_image(entry("a", 1000));
        m.upsert_image(entry("b", 1024));
        m.reindex_patches();
        assert_eq!(m.total_patches(), 256 + 289);
        assert_eq!(m.locate_patch(255), Some((0, 255)));
        assert_eq!(m.locate_patch(256), Some((1, 0)));
        assert_eq!(m.locate_patch(545), None);
        m.save(dir.path()).unwrap();
        assert_eq!(ProjectManifest::load(dir.path()).unwrap(), m);
        assert!(m.check_files(dir.path()).is_err());
        std::fs::write(dir.path().join("a.png"), b"").unwrap();
        std::fs::write(dir.path().join("b.png"), b"").unwrap();
        m.check_files(dir.path()).unwrap();
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = ProjectManifest::default();
        m.images.push(entry("a", 300));
        m.images.push(entry("a", 300));
        let dir = tempfile::tempdir().unwrap();
        assert!(m.save(dir.path()).is_err());
        assert!(!ProjectManifest::path_in(dir.path()).exists());
    }
}
