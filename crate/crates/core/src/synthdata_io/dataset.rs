//! Dataset directories:
//!
//! ```text
//! DIR/manifest.json      {"items": [{"id", "image", "mask"}, ...], "meta": {...}}
//! DIR/images/<id>.pgm    8-bit intensities
//! DIR/masks/<id>.pgm     0 = background, 255 = foreground
//! ```
//!
//! Paths in the manifest are relative to `DIR`. `meta` holds the generator
//! configuration for generated sets and may be `null` otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::{generate, GenConfig};
use super::pgm;
use crate::error::{CksError, Result};
use crate::types::{DatasetItem, DatasetPhase, PhaseId};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub items: Vec<ManifestItem>,
    #[serde(default)]
    pub meta: Option<GenConfig>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CksError::io(path, e))
}

/// Writes `ds` (crop records are not persisted) under `dir`.
pub fn save_dataset(dir: &Path, ds: &DatasetPhase, meta: Option<&GenConfig>) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let mut items = Vec::with_capacity(ds.len());
    for it in ds.items() {
        let entry = ManifestItem {
            id: it.id.clone(),
            image: format!("images/{}.pgm", it.id),
            mask: format!("masks/{}.pgm", it.id),
        };
        pgm::write_image(&dir.join(&entry.image), &it.image)?;
        pgm::write_mask(&dir.join(&entry.mask), &it.mask)?;
        items.push(entry);
    }
    let manifest = Manifest {
        items,
        meta: meta.cloned(),
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| CksError::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CksError::MissingFile(path.clone()),
        _ => CksError::io(&path, e),
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CksError::CorruptManifest(format!("{}: {e}", path.display())))?;
    let mut ids: Vec<&str> = manifest.items.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(CksError::CorruptManifest(format!("duplicate item id `{}`", w[0])));
    }
    Ok(manifest)
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Loads a raw (D3) dataset in manifest order.
pub fn load_dataset(dir: &Path) -> Result<DatasetPhase> {
    let manifest = read_manifest(dir)?;
    let items = manifest
        .items
        .iter()
        .map(|entry| {
            let image = pgm::read_image(&resolve(dir, &entry.image))?;
            let mask = pgm::read_mask(&resolve(dir, &entry.mask))?;
            DatasetItem::new(entry.id.clone(), image, mask, None)
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetPhase::new(PhaseId::D3, items)
}

/// Generates a dataset and writes it under `dir`.
pub fn generate_to(dir: &Path, cfg: &GenConfig) -> Result<DatasetPhase> {
    let ds = generate(cfg)?;
    save_dataset(dir, &ds, Some(cfg))?;
    Ok(ds)
}
