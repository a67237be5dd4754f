//! Semantic-misalignment dataset construction.
//!
//! Every expert demonstration yields a positive example (trajectory paired
//! with its own instruction). Negatives reuse the same trajectory with an
//! instruction drawn from a *different task of the same category*, so the
//! behaviour is coherent but answers the wrong goal.

mod import;
mod manifest;
pub mod synth;
mod tiling;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use import::import_demos;
pub use manifest::{read_manifest, write_manifest, ManifestLine, ManifestMeta};
pub use tiling::{sample_frames, sample_indices, tile, untile};

use crate::error::{Error, Result};
use crate::worldgen::{Episode, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Imported,
}

/// An expert demonstration `{trajectory, g*}`, already reduced to the sampled
/// frames `frames[pov][t]`.
#[derive(Debug, Clone)]
pub struct DemoRecord {
    pub id: String,
    pub frames: Vec<Vec<Frame>>,
    pub instruction: String,
    pub task_id: String,
    /// Category name; imported sources may use names outside the built-in six.
    pub category: String,
    pub source: Source,
}

impl DemoRecord {
    pub fn from_episode(
        id: impl Into<String>,
        episode: &Episode,
        instruction: impl Into<String>,
        category: impl Into<String>,
        timesteps: usize,
    ) -> Result<Self> {
        let demo = DemoRecord {
            id: id.into(),
            frames: sample_frames(episode, timesteps)?,
            instruction: instruction.into(),
            task_id: episode.task_id.clone(),
            category: category.into(),
            source: Source::Synthetic,
        };
        demo.validate()?;
        Ok(demo)
    }

    pub fn pov_count(&self) -> usize {
        self.frames.len()
    }

    pub fn timesteps(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Config(format!("demo `{}` has no viewpoints", self.id)));
        }
        if self.instruction.trim().is_empty() {
            return Err(Error::Config(format!("demo `{}` has an empty instruction", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Unassigned,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Unassigned => "unassigned",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unassigned" => Ok(Split::Unassigned),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// One classification record `(tiled trajectory, instruction, label)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmfExample {
    /// `<episode_id>/pos` or `<episode_id>/neg`.
    pub id: String,
    pub episode_id: String,
    pub image: Arc<Frame>,
    pub instruction: String,
    /// 1 = the trajectory achieves the instruction.
    pub label: u8,
    pub category: String,
    pub source_task_id: String,
    pub negative_source_task_id: Option<String>,
    pub split: Split,
    pub n_pov: usize,
    pub n_timesteps: usize,
    /// Height of a single frame.
    pub h: usize,
    /// Width of a single frame.
    pub w: usize,
}

/// Label and category tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub positives: usize,
    pub negatives: usize,
    /// category -> [negatives, positives]
    pub per_category: BTreeMap<String, [usize; 2]>,
}

impl Counts {
    pub fn of(examples: &[SmfExample]) -> Self {
        let mut c = Counts::default();
        for e in examples {
            if e.label == 1 {
                c.positives += 1;
            } else {
                c.negatives += 1;
            }
            c.per_category.entry(e.category.clone()).or_default()[e.label as usize] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmfConfig {
    /// Fraction of examples that are negatives.
    pub negative_fraction: f64,
}

impl Default for SmfConfig {
    fn default() -> Self {
        SmfConfig {
            negative_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub examples: Vec<SmfExample>,
    pub seed: u64,
    pub config: SmfConfig,
    pub counts: Counts,
}

impl Manifest {
    pub fn new(examples: Vec<SmfExample>, seed: u64, config: SmfConfig) -> Self {
        let counts = Counts::of(&examples);
        Manifest {
            examples,
            seed,
            config,
            counts,
        }
    }

    pub fn split(&self, split: Split) -> Vec<&SmfExample> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    /// SHA-256 over the canonical JSON lines and raw tiled pixels.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for e in &self.examples {
            let line = ManifestLine::from_example(e, &manifest::image_name(&e.episode_id));
            hasher.update(serde_json::to_vec(&line).expect("manifest line serializes"));
            hasher.update(b"\n");
            hasher.update(&e.image.data);
        }
        hex::encode(hasher.finalize())
    }
}

/// How many positives and negatives to draw from `demos` demonstrations so the
/// negative share matches `fraction` while using each demo at most once per
/// label.
fn label_budget(demos: usize, fraction: f64) -> (usize, usize) {
    if fraction <= 0.0 {
        (demos, 0)
    } else if fraction >= 1.0 {
        (0, demos)
    } else if fraction <= 0.5 {
        let neg = (demos as f64 * fraction / (1.0 - fraction)).round() as usize;
        (demos, neg.min(demos))
    } else {
        let pos = (demos as f64 * (1.0 - fraction) / fraction).round() as usize;
        (pos.min(demos), demos)
    }
}

/// Builds the labelled example set from expert demonstrations.
pub fn build_smf(demos: &[DemoRecord], seed: u64, config: &SmfConfig) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&config.negative_fraction) {
        return Err(Error::Config(format!(
            "negative_fraction must be in [0, 1], got {}",
            config.negative_fraction
        )));
    }
    let mut ids = BTreeSet::new();
    for d in demos {
        d.validate()?;
        if !ids.insert(d.id.as_str()) {
            return Err(Error::Config(format!("duplicate demo id `{}`", d.id)));
        }
    }

    // Instruction pool: category -> task -> distinct instructions, ordered.
    let mut pool: BTreeMap<&str, BTreeMap<&str, BTreeSet<&str>>> = BTreeMap::new();
    for d in demos {
        pool.entry(d.category.as_str())
            .or_default()
            .entry(d.task_id.as_str())
            .or_default()
            .insert(d.instruction.as_str());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_pos, n_neg) = label_budget(demos.len(), config.negative_fraction);
    if n_neg > 0 {
        if let Some((cat, _)) = pool.iter().find(|(_, tasks)| tasks.len() < 2) {
            return Err(Error::SingleTaskCategory(cat.to_string()));
        }
    }

    let mut order: Vec<usize> = (0..demos.len()).collect();
    order.shuffle(&mut rng);
    let positives: BTreeSet<usize> = order[..n_pos].iter().copied().collect();
    order.shuffle(&mut rng);
    let negatives: BTreeSet<usize> = order[..n_neg].iter().copied().collect();

    let mut examples = Vec::with_capacity(n_pos + n_neg);
    for (i, d) in demos.iter().enumerate() {
        let (want_pos, want_neg) = (positives.contains(&i), negatives.contains(&i));
        if !want_pos && !want_neg {
            continue;
        }
        let image = Arc::new(tile(&d.frames)?);
        let base = SmfExample {
            id: String::new(),
            episode_id: d.id.clone(),
            image,
            instruction: d.instruction.clone(),
            label: 1,
            category: d.category.clone(),
            source_task_id: d.task_id.clone(),
            negative_source_task_id: None,
            split: Split::Unassigned,
            n_pov: d.pov_count(),
            n_timesteps: d.timesteps(),
            h: d.frames[0][0].height,
            w: d.frames[0][0].width,
        };
        if want_pos {
            examples.push(SmfExample {
                id: format!("{}/pos", d.id),
                ..base.clone()
            });
        }
        if want_neg {
            let tasks = &pool[d.category.as_str()];
            let others: Vec<&str> = tasks
                .keys()
                .copied()
                .filter(|t| *t != d.task_id)
                .collect();
            let other = others[rng.random_range(0..others.len())];
            let phrases: Vec<&str> = tasks[other].iter().copied().collect();
            let phrase = phrases[rng.random_range(0..phrases.len())];
            examples.push(SmfExample {
                id: format!("{}/neg", d.id),
                instruction: phrase.to_string(),
                label: 0,
                negative_source_task_id: Some(other.to_string()),
                ..base
            });
        }
    }
    examples.shuffle(&mut rng);
    Ok(Manifest::new(examples, seed, config.clone()))
}

/// Fractions of episodes assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Assigns split tags at the episode level: both examples derived from one
/// episode always share a split.
pub fn split(manifest: &Manifest, fractions: SplitFractions, seed: u64) -> Result<Manifest> {
    let f = [fractions.train, fractions.val, fractions.test];
    if f.iter().any(|x| *x < 0.0 || !x.is_finite()) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {f:?}"
        )));
    }
    let episodes: BTreeSet<&str> = manifest.examples.iter().map(|e| e.episode_id.as_str()).collect();
    let mut episodes: Vec<&str> = episodes.into_iter().collect();
    episodes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = episodes.len();
    let n_train = (fractions.train * n as f64).round() as usize;
    let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train.min(n));
    let mut tag: BTreeMap<&str, Split> = BTreeMap::new();
    for (k, ep) in episodes.iter().enumerate() {
        let s = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        tag.insert(ep, s);
    }
    let examples = manifest
        .examples
        .iter()
        .map(|e| SmfExample {
            split: tag[e.episode_id.as_str()],
            ..e.clone()
        })
        .collect();
    Ok(Manifest::new(examples, manifest.seed, manifest.config.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(id: &str, task: &str, category: &str, instruction: &str) -> DemoRecord {
        DemoRecord {
            id: id.into(),
            frames: vec![vec![Frame::zeros(2, 2); 2]],
            instruction: instruction.into(),
            task_id: task.into(),
            category: category.into(),
            source: Source::Synthetic,
        }
    }

    fn lifting_demos(n: usize) -> Vec<DemoRecord> {
        (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    demo(&format!("d{i:04}"), "lift_red", "lifting", "lift the red cube")
                } else {
                    demo(&format!("d{i:04}"), "lift_blue", "lifting", "lift the blue cube")
                }
            })
            .collect()
    }

    #[test]
    fn negatives_swap_same_category_tasks() {
        let m = build_smf(&lifting_demos(10), 3, &SmfConfig::default()).unwrap();
        for e in m.examples.iter().filter(|e| e.label == 0) {
            let other = e.negative_source_task_id.as_deref().unwrap();
            assert_ne!(other, e.source_task_id);
            if e.source_task_id == "lift_red" {
                assert_eq!(e.instruction, "lift the blue cube");
            } else {
                assert_eq!(e.instruction, "lift the red cube");
            }
        }
        assert_eq!(m.counts.positives, 10);
        assert_eq!(m.counts.negatives, 10);
    }

    #[test]
    fn zero_negative_fraction_keeps_originals() {
        let demos = lifting_demos(6);
        let m = build_smf(&demos, 1, &SmfConfig { negative_fraction: 0.0 }).unwrap();
        assert_eq!(m.examples.len(), 6);
        for e in &m.examples {
            assert_eq!(e.label, 1);
            let d = demos.iter().find(|d| d.id == e.episode_id).unwrap();
            assert_eq!(e.instruction, d.instruction);
        }
    }

    #[test]
    fn single_task_category_is_an_error() {
        let mut demos = lifting_demos(4);
        demos.push(demo("x", "turn_on_light", "lighting", "turn on the light"));
        match build_smf(&demos, 0, &SmfConfig::default()) {
            Err(Error::SingleTaskCategory(c)) => assert_eq!(c, "lighting"),
            other => panic!("unexpected {other:?}"),
        }
        // Without negatives, a lone task is fine.
        assert!(build_smf(&demos, 0, &SmfConfig { negative_fraction: 0.0 }).is_ok());
    }

    #[test]
    fn checksum_is_reproducible() {
        let demos = lifting_demos(1000);
        let a = build_smf(&demos, 42, &SmfConfig::default()).unwrap();
        let b = build_smf(&demos, 42, &SmfConfig::default()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = build_smf(&demos, 43, &SmfConfig::default()).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn budget_balances_labels() {
        for n in 1..50 {
            let (p, q) = label_budget(n, 0.5);
            assert!(p.abs_diff(q) <= 1);
        }
        assert_eq!(label_budget(10, 0.25), (10, 3));
        assert_eq!(label_budget(10, 0.75), (3, 10));
    }

    #[test]
    fn split_counts_and_disjointness() {
        let m = build_smf(&lifting_demos(100), 5, &SmfConfig::default()).unwrap();
        let s = split(&m, SplitFractions { train: 0.8, val: 0.1, test: 0.1 }, 9).unwrap();
        let mut by_split: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
        for e in &s.examples {
            by_split.entry(e.split).or_default().insert(&e.episode_id);
        }
        assert_eq!(by_split[&Split::Train].len(), 80);
        assert_eq!(by_split[&Split::Val].len(), 10);
        assert_eq!(by_split[&Split::Test].len(), 10);
        let all: Vec<_> = by_split.values().collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert!(all[i].is_disjoint(all[j]));
            }
        }
        for sp in [Split::Train, Split::Val, Split::Test] {
            let ex = s.split(sp);
            let pos = ex.iter().filter(|e| e.label == 1).count() as f64;
            assert!((pos / ex.len() as f64 - 0.5).abs() <= 0.05);
        }
    }

    #[test]
    fn split_all_train_and_bad_fractions() {
        let m = build_smf(&lifting_demos(10), 5, &SmfConfig::default()).unwrap();
        let s = split(&m, SplitFractions { train: 1.0, val: 0.0, test: 0.0 }, 1).unwrap();
        assert!(s.examples.iter().all(|e| e.split == Split::Train));
        assert!(split(&m, SplitFractions { train: 0.9, val: 0.2, test: -0.1 }, 1).is_err());
        assert!(split(&m, SplitFractions { train: 0.5, val: 0.1, test: 0.1 }, 1).is_err());
    }
}
