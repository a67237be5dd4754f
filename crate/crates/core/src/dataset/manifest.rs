//! On-disk manifest: `manifest.jsonl`, `meta.json` and one tiled PNG per episode.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Counts, Manifest, SmfConfig, SmfExample, Split};
use crate::error::{Error, Result};
use crate::worldgen::io::{load_png, save_png};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "meta.json";

/// One JSON line of the manifest. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub id: String,
    pub image_path: String,
    pub instruction: String,
    pub label: u8,
    pub category: String,
    pub source_task_id: String,
    pub negative_source_task_id: Option<String>,
    pub split: String,
    pub n_pov: usize,
    pub n_timesteps: usize,
    pub h: usize,
    pub w: usize,
}

impl ManifestLine {
    pub fn from_example(e: &SmfExample, image_path: &str) -> Self {
        ManifestLine {
            id: e.id.clone(),
            image_path: image_path.to_string(),
            instruction: e.instruction.clone(),
            label: e.label,
            category: e.category.clone(),
            source_task_id: e.source_task_id.clone(),
            negative_source_task_id: e.negative_source_task_id.clone(),
            split: e.split.name().to_string(),
            n_pov: e.n_pov,
            n_timesteps: e.n_timesteps,
            h: e.h,
            w: e.w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMeta {
    pub seed: u64,
    pub config: SmfConfig,
    pub counts: Counts,
    pub checksum: String,
    /// Free-form snapshot of the generator settings.
    #[serde(default)]
    pub snapshot: serde_json::Value,
}

pub(crate) fn image_name(episode_id: &str) -> String {
    format!("images/{episode_id}.png")
}

/// The episode an example id belongs to: ids are `<episode>/pos` or
/// `<episode>/neg`; anything else is its own episode.
pub(crate) fn episode_of(id: &str) -> &str {
    id.strip_suffix("/pos")
        .or_else(|| id.strip_suffix("/neg"))
        .unwrap_or(id)
}

fn safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Writes the manifest under `dir`; tiled images are shared by the two
/// examples of an episode.
pub fn write_manifest(manifest: &Manifest, dir: &Path, snapshot: serde_json::Value) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut out = Vec::new();
    let mut written = std::collections::HashSet::new();
    for e in &manifest.examples {
        if !safe_id(&e.episode_id) {
            return Err(Error::Config(format!(
                "episode id `{}` is not usable as a file name",
                e.episode_id
            )));
        }
        let name = image_name(&e.episode_id);
        if written.insert(e.episode_id.clone()) {
            save_png(&e.image, &dir.join(&name))?;
        }
        serde_json::to_writer(&mut out, &ManifestLine::from_example(e, &name))?;
        out.push(b'\n');
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, &out).map_err(|e| Error::io(&path, e))?;
    let meta = ManifestMeta {
        seed: manifest.seed,
        config: manifest.config.clone(),
        counts: manifest.counts.clone(),
        checksum: manifest.checksum(),
        snapshot,
    };
    let path = dir.join(META_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads a manifest directory written by [`write_manifest`].
pub fn read_manifest(dir: &Path) -> Result<(Manifest, ManifestMeta)> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: ManifestMeta = serde_json::from_str(&text)?;

    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut images: HashMap<String, Arc<crate::worldgen::Frame>> = HashMap::new();
    let mut examples = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema { line: lineno, message };
        let rec: ManifestLine = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if rec.label > 1 {
            return Err(schema(format!("label must be 0 or 1, got {}", rec.label)));
        }
        let split: Split = rec.split.parse().map_err(|e: Error| schema(e.to_string()))?;
        let image = match images.get(&rec.image_path) {
            Some(img) => img.clone(),
            None => {
                let img = Arc::new(load_png(&dir.join(&rec.image_path))?);
                images.insert(rec.image_path.clone(), img.clone());
                img
            }
        };
        if image.height != rec.h * rec.n_pov || image.width != rec.w * rec.n_timesteps {
            return Err(schema(format!(
                "image is {}x{}, expected {}x{}",
                image.height,
                image.width,
                rec.h * rec.n_pov,
                rec.w * rec.n_timesteps
            )));
        }
        examples.push(SmfExample {
            episode_id: episode_of(&rec.id).to_string(),
            id: rec.id,
            image,
            instruction: rec.instruction,
            label: rec.label,
            category: rec.category,
            source_task_id: rec.source_task_id,
            negative_source_task_id: rec.negative_source_task_id,
            split,
            n_pov: rec.n_pov,
            n_timesteps: rec.n_timesteps,
            h: rec.h,
            w: rec.w,
        });
    }
    let manifest = Manifest::new(examples, meta.seed, meta.config.clone());
    Ok((manifest, meta))
}
