//! FS heads in the shared tensor container: one section per head, tagged
//! with its layer index and configuration.

use std::path::Path;

use serde_json::json;

use super::{FsBlock, FsConfig, FsHeads};
use crate::backbone::checkpoint::{assign_tensors, collect_tensors, Container, Tensor};
use crate::error::{Error, Result};
use crate::nn::Params;

pub const FS_KIND: &str = "fs_heads";

#[derive(Debug, Clone, PartialEq)]
pub struct FsCheckpoint {
    pub heads: FsHeads<f32>,
    /// SHA-256 of the backbone checkpoint the heads were trained against.
    pub backbone_hash: String,
}

impl FsCheckpoint {
    pub fn to_container(&self) -> Container {
        let mut tensors = Vec::new();
        let mut sections = Vec::new();
        for (k, (head, &layer)) in self.heads.heads.iter().zip(&self.heads.layers).enumerate() {
            tensors.extend(collect_tensors(head as &dyn Params<f32>, &format!("head{k}")));
            for (name, values) in head.buffers() {
                tensors.push(Tensor {
                    name: format!("stats.head{k}.{name}"),
                    shape: vec![values.len()],
                    data: values.clone(),
                });
            }
            sections.push(json!({"index": k, "layer": layer, "config": head.config}));
        }
        Container {
            meta: json!({
                "kind": FS_KIND,
                "backbone_hash": self.backbone_hash,
                "heads": sections,
            }),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta["kind"] != FS_KIND {
            return Err(Error::Checkpoint(format!("expected an `{FS_KIND}` checkpoint, found {}", c.meta["kind"])));
        }
        let backbone_hash = c.meta["backbone_hash"]
            .as_str()
            .ok_or_else(|| Error::Checkpoint("missing backbone_hash".into()))?
            .to_string();
        let sections = c.meta["heads"]
            .as_array()
            .ok_or_else(|| Error::Checkpoint("missing head sections".into()))?;
        let mut layers = Vec::new();
        let mut heads = Vec::new();
        for (k, s) in sections.iter().enumerate() {
            if s["index"].as_u64() != Some(k as u64) {
                return Err(Error::Checkpoint(format!("head section {k} is out of order")));
            }
            let layer = s["layer"]
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("head {k} has no layer index")))? as usize;
            let config: FsConfig = serde_json::from_value(s["config"].clone())?;
            // Weights are overwritten below; the seed only fixes shapes.
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            let mut head: FsBlock<f32> = FsBlock::new(config, &mut rng)?;
            let scoped: Vec<Tensor> = c
                .tensors
                .iter()
                .filter(|t| t.name.starts_with(&format!("head{k}.")))
                .cloned()
                .collect();
            assign_tensors(&mut head, &format!("head{k}"), &scoped)?;
            for (name, values) in head.buffers_mut() {
                let full = format!("stats.head{k}.{name}");
                let t = c
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{full}` missing")))?;
                if t.data.len() != values.len() {
                    return Err(Error::Checkpoint(format!("tensor `{full}` has the wrong length")));
                }
                values.copy_from_slice(&t.data);
            }
            layers.push(layer);
            heads.push(head);
        }
        Ok(FsCheckpoint {
            heads: FsHeads { layers, heads },
            backbone_hash,
        })
    }

    /// Writes the checkpoint and returns the SHA-256 of the file.
    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (c, hash) = Container::load(path)?;
        Ok((FsCheckpoint::from_container(&c)?, hash))
    }
}
