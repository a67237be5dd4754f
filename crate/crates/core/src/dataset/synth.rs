//! Synthetic demonstrations and control-failure sets from the built-in world.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_smf, split, DemoRecord, Manifest, SmfConfig, SmfExample, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::worldgen::{Catalog, ControlFailure, Episode, Pov, SceneSpec, World, WorldConfig};

/// Settings for `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    /// Task ids to draw demos from; empty means the whole catalog.
    pub tasks: Vec<String>,
    /// Number of expert demonstrations (tasks are cycled).
    pub demos: usize,
    pub paraphrases: usize,
    pub height: usize,
    pub width: usize,
    pub povs: usize,
    pub timesteps: usize,
    pub negative_fraction: f64,
    pub split: SplitFractions,
    /// Size of the all-negative control-failure set; 0 disables it.
    pub control_failures: usize,
    pub world: WorldConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            tasks: Vec::new(),
            demos: 1250,
            paraphrases: 3,
            height: 32,
            width: 32,
            povs: 1,
            timesteps: 4,
            negative_fraction: 0.5,
            split: SplitFractions {
                train: 0.8,
                val: 0.04,
                test: 0.16,
            },
            control_failures: 200,
            world: WorldConfig::default(),
        }
    }
}

impl GenConfig {
    /// Two categories (lifting, lighting), four tasks. 1250 demos give
    /// 2000 train / 100 val / 400 test examples.
    pub fn smf_easy(seed: u64) -> Self {
        GenConfig {
            seed,
            tasks: ["lift_red", "lift_blue", "turn_on_light", "turn_off_light"]
                .map(String::from)
                .to_vec(),
            ..GenConfig::default()
        }
    }

    /// All six categories and every task, including the left/right and
    /// colour-swapped pairs that differ in a few pixels only.
    pub fn smf_hard(seed: u64) -> Self {
        GenConfig {
            seed,
            tasks: Vec::new(),
            ..GenConfig::default()
        }
    }

    pub fn catalog(&self) -> Result<Catalog> {
        if self.tasks.is_empty() {
            Catalog::full(self.paraphrases)
        } else {
            Catalog::subset(self.paraphrases, &self.tasks)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.povs == 0 || self.povs > 2 {
            return Err(Error::Config(format!("povs must be 1 or 2, got {}", self.povs)));
        }
        if self.demos == 0 {
            return Err(Error::Config("demos must be positive".into()));
        }
        Ok(())
    }
}

/// Seed of the `index`-th item of a stream (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const DEMO_STREAM: u64 = 1;
const FAILURE_STREAM: u64 = 2;

/// Expert demonstrations cycling through the configured tasks.
pub fn generate_demos(cfg: &GenConfig) -> Result<Vec<DemoRecord>> {
    generate_demos_with(cfg, &mut |_, _| Ok(()))
}

/// As [`generate_demos`], handing every full episode to `sink` together with
/// its demo id before frames are sampled.
pub fn generate_demos_with(
    cfg: &GenConfig,
    sink: &mut dyn FnMut(&str, &Episode) -> Result<()>,
) -> Result<Vec<DemoRecord>> {
    cfg.validate()?;
    let world = World::new(cfg.world.clone());
    let catalog = cfg.catalog()?;
    let povs = Pov::for_count(cfg.povs);
    let scene = SceneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DEMO_STREAM, u64::MAX));
    let tasks = catalog.tasks();
    (0..cfg.demos)
        .map(|i| {
            let task = &tasks[i % tasks.len()];
            let phrase = task.instruction_for(rng.random_range(0..task.paraphrase_count()))?;
            let seed = derive_seed(cfg.seed, DEMO_STREAM, i as u64);
            let ep = world.generate_expert(task, seed, &scene, &povs, cfg.height, cfg.width)?;
            let id = format!("ep{i:05}");
            sink(&id, &ep)?;
            DemoRecord::from_episode(
                id,
                &ep,
                phrase,
                task.category.name(),
                cfg.timesteps,
            )
        })
        .collect()
}

/// Demos, labelled examples and split tags in one go.
pub fn generate_smf(cfg: &GenConfig) -> Result<Manifest> {
    generate_smf_with(cfg, &mut |_, _| Ok(()))
}

pub fn generate_smf_with(cfg: &GenConfig, sink: &mut dyn FnMut(&str, &Episode) -> Result<()>) -> Result<Manifest> {
    let demos = generate_demos_with(cfg, sink)?;
    let smf = SmfConfig {
        negative_fraction: cfg.negative_fraction,
    };
    let manifest = build_smf(&demos, cfg.seed, &smf)?;
    split(&manifest, cfg.split, derive_seed(cfg.seed, 3, 0))
}

/// All-negative evaluation set: each trajectory is paired with its own task's
/// instruction but fails through a scripted control error. Tasks are cycled
/// and each task cycles through its compatible failure modes. Every example
/// is tagged `test`.
pub fn generate_control_failures(cfg: &GenConfig, count: usize) -> Result<Manifest> {
    cfg.validate()?;
    let world = World::new(cfg.world.clone());
    let catalog = cfg.catalog()?;
    let povs = Pov::for_count(cfg.povs);
    let scene = SceneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, FAILURE_STREAM, u64::MAX));
    let tasks = catalog.tasks();
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let task = &tasks[i % tasks.len()];
        let modes: Vec<ControlFailure> = ControlFailure::ALL
            .into_iter()
            .filter(|m| m.compatible_with(task.category))
            .collect();
        let mode = modes[(i / tasks.len()) % modes.len()];
        let phrase = task.instruction_for(rng.random_range(0..task.paraphrase_count()))?;
        let seed = derive_seed(cfg.seed, FAILURE_STREAM, i as u64);
        let ep = world.inject_control_failure(task, mode, seed, &scene, &povs, cfg.height, cfg.width)?;
        let demo = DemoRecord::from_episode(
            format!("cf{i:05}"),
            &ep,
            phrase,
            task.category.name(),
            cfg.timesteps,
        )?;
        let image = std::sync::Arc::new(super::tile(&demo.frames)?);
        examples.push(SmfExample {
            id: format!("{}/neg", demo.id),
            episode_id: demo.id,
            image,
            instruction: demo.instruction,
            label: 0,
            category: demo.category,
            source_task_id: demo.task_id,
            negative_source_task_id: None,
            split: Split::Test,
            n_pov: cfg.povs,
            n_timesteps: cfg.timesteps,
            h: cfg.height,
            w: cfg.width,
        });
    }
    Ok(Manifest::new(
        examples,
        cfg.seed,
        SmfConfig {
            negative_fraction: 1.0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            demos: 24,
            height: 16,
            width: 16,
            ..GenConfig::smf_easy(seed)
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_smf(&small(1)).unwrap();
        let b = generate_smf(&small(1)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = generate_smf(&small(2)).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn examples_have_tiled_shape_and_balance() {
        let cfg = GenConfig {
            povs: 2,
            ..small(3)
        };
        let m = generate_smf(&cfg).unwrap();
        assert_eq!(m.examples.len(), 48);
        assert_eq!(m.counts.positives, m.counts.negatives);
        for e in &m.examples {
            assert_eq!((e.image.height, e.image.width), (32, 64));
        }
    }

    #[test]
    fn negatives_reference_catalog_tasks_of_the_same_category() {
        let cfg = small(4);
        let cat = cfg.catalog().unwrap();
        let m = generate_smf(&cfg).unwrap();
        for e in m.examples.iter().filter(|e| e.label == 0) {
            let other = cat.get(e.negative_source_task_id.as_deref().unwrap()).unwrap();
            let own = cat.get(&e.source_task_id).unwrap();
            assert_eq!(other.category, own.category);
            assert_ne!(other.task_id, own.task_id);
            assert!(other.instructions().contains(&e.instruction));
        }
    }

    #[test]
    fn control_failure_set_is_all_negative() {
        let m = generate_control_failures(&small(5), 10).unwrap();
        assert_eq!(m.examples.len(), 10);
        assert!(m.examples.iter().all(|e| e.label == 0 && e.split == Split::Test));
        let cat = small(5).catalog().unwrap();
        for e in &m.examples {
            assert!(cat.get(&e.source_task_id).unwrap().instructions().contains(&e.instruction));
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> =
            (0..1000).map(|i| derive_seed(7, DEMO_STREAM, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
