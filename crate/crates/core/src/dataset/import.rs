//! Import adapter for externally supplied expert demonstrations.
//!
//! One JSON object per line:
//!
//! ```json
//! {"id": "demo0", "instruction": "lift the red cube", "task_id": "lift_red",
//!  "category": "lifting", "frames": [["a/0.png", "a/1.png", "a/2.png"]]}
//! ```
//!
//! `frames[pov][t]` are image paths relative to the manifest file. `id` is
//! optional and defaults to `line<N>`. Categories outside the built-in six are
//! kept verbatim.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::tiling::sample_grid;
use super::{DemoRecord, Source};
use crate::error::{Error, Result};
use crate::worldgen::io::load_png;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportLine {
    id: Option<String>,
    instruction: String,
    task_id: String,
    category: String,
    frames: Vec<Vec<String>>,
}

/// Reads and validates a demo manifest, sampling `timesteps` frames per
/// viewpoint from each record.
pub fn import_demos(manifest_path: &Path, timesteps: usize) -> Result<Vec<DemoRecord>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut demos = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema { line: lineno, message };
        let rec: ImportLine = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        if rec.instruction.trim().is_empty() {
            return Err(schema("empty instruction".into()));
        }
        if rec.task_id.is_empty() || rec.category.is_empty() {
            return Err(schema("empty task_id or category".into()));
        }
        if rec.frames.is_empty() || rec.frames[0].is_empty() {
            return Err(schema("frames grid is empty".into()));
        }
        let t = rec.frames[0].len();
        let mut grid = Vec::with_capacity(rec.frames.len());
        for (p, row) in rec.frames.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Ragged(format!(
                    "line {lineno}: viewpoint {p} has {} frames, expected {t}",
                    row.len()
                )));
            }
            let mut frames = Vec::with_capacity(t);
            for rel in row {
                let path = base.join(rel);
                if !path.is_file() {
                    return Err(schema(format!("missing frame `{rel}`")));
                }
                frames.push(load_png(&path)?);
            }
            grid.push(frames);
        }
        let (h, w) = (grid[0][0].height, grid[0][0].width);
        if grid.iter().flatten().any(|f| f.height != h || f.width != w) {
            return Err(Error::Ragged(format!("line {lineno}: frames of mixed sizes")));
        }
        demos.push(DemoRecord {
            id: rec.id.unwrap_or_else(|| format!("line{lineno}")),
            frames: sample_grid(&grid, timesteps)?,
            instruction: rec.instruction,
            task_id: rec.task_id,
            category: rec.category,
            source: Source::Imported,
        });
    }
    Ok(demos)
}
