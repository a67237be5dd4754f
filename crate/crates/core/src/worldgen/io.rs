//! Episode persistence: one PNG per frame plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Episode, FailureMode, Frame, Pov};
use crate::error::{Error, Result};

/// Sidecar written next to an episode's frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSidecar {
    pub task_id: String,
    pub seed: u64,
    pub succeeded: bool,
    pub failure_mode: FailureMode,
    pub povs: Vec<Pov>,
    pub height: usize,
    pub width: usize,
    /// `frames[pov][t]`, paths relative to the sidecar's directory.
    pub frames: Vec<Vec<String>>,
}

pub fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = (frame.height, frame.width);
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            buf.extend_from_slice(&frame.rgb(i, j));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn load_png(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut frame = Frame::zeros(h, w);
    for (j, i, px) in img.enumerate_pixels() {
        frame.set_rgb(i as usize, j as usize, px.0);
    }
    Ok(frame)
}

/// Writes `episode` under `dir` and returns the sidecar path.
pub fn write_episode(episode: &Episode, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = &episode.frames[0][0];
    let mut grid = Vec::with_capacity(episode.frames.len());
    for (p, row) in episode.frames.iter().enumerate() {
        let mut names = Vec::with_capacity(row.len());
        for (t, frame) in row.iter().enumerate() {
            let name = format!("pov{p}_t{t:03}.png");
            save_png(frame, &dir.join(&name))?;
            names.push(name);
        }
        grid.push(names);
    }
    let sidecar = EpisodeSidecar {
        task_id: episode.task_id.clone(),
        seed: episode.seed,
        succeeded: episode.succeeded,
        failure_mode: episode.failure_mode,
        povs: episode.povs.clone(),
        height: first.height,
        width: first.width,
        frames: grid,
    };
    let path = dir.join("episode.json");
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_sidecar(path: &Path) -> Result<EpisodeSidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{Catalog, SceneSpec, World};

    #[test]
    fn episode_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let world = World::default();
        let cat = Catalog::full(3).unwrap();
        let ep = world
            .generate_expert(
                cat.get("open_slider").unwrap(),
                5,
                &SceneSpec::default(),
                &[Pov::Exocentric, Pov::Egocentric],
                16,
                24,
            )
            .unwrap();
        let path = write_episode(&ep, dir.path()).unwrap();
        let side = read_sidecar(&path).unwrap();
        assert_eq!(side.task_id, "open_slider");
        assert_eq!(side.frames.len(), 2);
        assert_eq!(side.frames[1].len(), ep.len());
        let f = load_png(&dir.path().join(&side.frames[1][3])).unwrap();
        assert_eq!(f, ep.frames[1][3]);
    }

    #[test]
    fn failure_mode_text_form() {
        for m in [
            FailureMode::None,
            FailureMode::Control(crate::worldgen::ControlFailure::IncompleteMotion),
        ] {
            let s = m.to_string();
            assert_eq!(s.parse::<FailureMode>().unwrap(), m);
        }
        assert_eq!(
            FailureMode::Control(crate::worldgen::ControlFailure::Drop).to_string(),
            "control:drop"
        );
    }
}
