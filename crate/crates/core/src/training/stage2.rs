//! Stage 2: FS heads trained with binary cross-entropy on the hidden states
//! of a frozen stage-1 backbone.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stage1::PatchCache;
use super::{finite_or_none, EpochLog};
use crate::backbone::{select_fs_layers, Backbone, Prompt};
use crate::dataset::SmfExample;
use crate::error::{Error, Result};
use crate::fs_blocks::{FsConfig, FsHeads, Mode};
use crate::nn::{Adam, AdamConfig, Mat, Params, Real};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Number of heads `K`.
    pub k: usize,
    pub fs: FsConfig,
    /// Precompute hidden states once instead of running the backbone per step.
    pub cache_features: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            k: 3,
            fs: FsConfig::default(),
            cache_features: true,
        }
    }
}

fn bce(p: f64, y: u8) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Numerical(format!("head probability {p} outside [0, 1]")));
    }
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    Ok(if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
}

/// `sum_k BCE(p_k, y)` for one example.
pub fn stage2_loss(probs: &[f64], y: u8) -> Result<f64> {
    if y > 1 {
        return Err(Error::Config(format!("label {y} is not binary")));
    }
    probs.iter().map(|&p| bce(p, y)).sum()
}

/// Hidden states of one batch at each head's layer, packed the same way for
/// every head.
pub struct HeadInputs<T> {
    pub features: Vec<Mat<T>>,
    pub seqs: Vec<(usize, usize)>,
}

/// Batch loss (mean over examples of the per-example head sum) with
/// gradients accumulated into `heads`. Running statistics are left alone;
/// the gradient w.r.t. each logit is `p - y`, taken before clamping.
pub fn stage2_loss_and_grad<T: Real>(
    heads: &mut FsHeads<T>,
    inputs: &HeadInputs<T>,
    labels: &[u8],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(T, Vec<crate::fs_blocks::FsOutput<T>>)> {
    if inputs.features.len() != heads.len() || labels.len() != inputs.seqs.len() {
        return Err(Error::Shape(format!(
            "{} feature sets for {} heads, {} labels for {} sequences",
            inputs.features.len(),
            heads.len(),
            labels.len(),
            inputs.seqs.len()
        )));
    }
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut outs = Vec::with_capacity(heads.len());
    for (head, f) in heads.heads.iter_mut().zip(&inputs.features) {
        let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
        let out = head.forward(f, &inputs.seqs, Mode::Train, r)?;
        let mut dlogits = Vec::with_capacity(labels.len());
        for (&p, &y) in out.probs.iter().zip(labels) {
            loss += bce(p.to_f64(), y)? / b;
            dlogits.push(T::from_f64((p.to_f64() - y as f64) / b));
        }
        head.backward(&out.cache, &dlogits);
        outs.push(out);
    }
    Ok((T::from_f64(loss), outs))
}

/// Hidden states at the head layers for every example, keyed by the hash of
/// the backbone checkpoint that produced them.
pub struct FeatureCache {
    pub backbone_hash: String,
    pub layers: Vec<usize>,
    features: HashMap<String, Vec<Mat<f32>>>,
}

impl FeatureCache {
    pub fn build(
        model: &Backbone<f32>,
        backbone_hash: &str,
        layers: &[usize],
        examples: &[&SmfExample],
        batch_size: usize,
    ) -> Result<Self> {
        let patches = PatchCache::build(model, examples)?;
        let mut features = HashMap::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let inputs = on_the_fly(model, &patches, layers, chunk)?;
            for (i, e) in chunk.iter().enumerate() {
                let (start, len) = inputs.seqs[i];
                let per_layer = inputs
                    .features
                    .iter()
                    .map(|f| Mat::from_fn(len, f.cols, |r, c| f.at(start + r, c)))
                    .collect();
                features.insert(e.id.clone(), per_layer);
            }
        }
        Ok(FeatureCache {
            backbone_hash: backbone_hash.to_string(),
            layers: layers.to_vec(),
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn check(&self, backbone_hash: &str, layers: &[usize]) -> Result<()> {
        if self.backbone_hash != backbone_hash {
            return Err(Error::CacheMismatch {
                cache: self.backbone_hash.clone(),
                model: backbone_hash.to_string(),
            });
        }
        if self.layers != layers {
            return Err(Error::Config(format!(
                "feature cache holds layers {:?}, heads read {:?}",
                self.layers, layers
            )));
        }
        Ok(())
    }

    fn gather(&self, examples: &[&SmfExample]) -> Result<HeadInputs<f32>> {
        let mut seqs = Vec::with_capacity(examples.len());
        let mut parts: Vec<Vec<&Mat<f32>>> = vec![Vec::new(); self.layers.len()];
        let mut start = 0;
        for e in examples {
            let per_layer = self
                .features
                .get(&e.id)
                .ok_or_else(|| Error::Config(format!("no cached features for `{}`", e.id)))?;
            seqs.push((start, per_layer[0].rows));
            start += per_layer[0].rows;
            for (p, m) in parts.iter_mut().zip(per_layer) {
                p.push(m);
            }
        }
        Ok(HeadInputs {
            features: parts.iter().map(|p| Mat::vstack(p)).collect(),
            seqs,
        })
    }
}

fn on_the_fly(
    model: &Backbone<f32>,
    patches: &PatchCache<f32>,
    layers: &[usize],
    examples: &[&SmfExample],
) -> Result<HeadInputs<f32>> {
    let prompts = examples
        .iter()
        .map(|e| patches.prompt(model, e))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Prompt<f32>> = prompts.iter().collect();
    let mut run = model.run_batch(&refs)?;
    let features = layers
        .iter()
        .map(|&l| std::mem::replace(&mut run.lm.hidden[l], Mat::zeros(0, 0)))
        .collect();
    Ok(HeadInputs {
        features,
        seqs: run.seqs,
    })
}

enum Source<'a> {
    Cached(&'a FeatureCache),
    Live(PatchCache<f32>),
}

impl Source<'_> {
    fn inputs(&self, model: &Backbone<f32>, layers: &[usize], examples: &[&SmfExample]) -> Result<HeadInputs<f32>> {
        match self {
            Source::Cached(c) => c.gather(examples),
            Source::Live(p) => on_the_fly(model, p, layers, examples),
        }
    }
}

/// Splits `order` into batches of `size`, folding a trailing singleton into
/// the previous batch so every batch has at least two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Mean loss and per-head accuracy of `heads` in eval mode.
fn evaluate_heads(
    model: &Backbone<f32>,
    heads: &FsHeads<f32>,
    source: &Source<'_>,
    examples: &[&SmfExample],
    batch_size: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut correct = vec![0usize; heads.len()];
    for chunk in examples.chunks(batch_size.max(1)) {
        let inputs = source.inputs(model, &heads.layers, chunk)?;
        let mut probs = vec![Vec::with_capacity(heads.len()); chunk.len()];
        for (k, (head, f)) in heads.heads.iter().zip(&inputs.features).enumerate() {
            for (i, p) in head.predict(f, &inputs.seqs)?.into_iter().enumerate() {
                if u8::from(p > 0.5) == chunk[i].label {
                    correct[k] += 1;
                }
                probs[i].push(p as f64);
            }
        }
        for (p, e) in probs.iter().zip(chunk) {
            loss += stage2_loss(p, e.label)?;
        }
    }
    let n = examples.len() as f64;
    Ok((loss / n, correct.iter().map(|&c| c as f64 / n).collect()))
}

/// Trains `K` heads on the frozen backbone. `backbone_hash` identifies the
/// checkpoint; a supplied feature cache must carry the same hash. Running
/// statistics are committed after every step, so the returned heads are
/// ready for eval mode.
pub fn train_stage2(
    model: &Backbone<f32>,
    backbone_hash: &str,
    train: &[&SmfExample],
    val: &[&SmfExample],
    cfg: &Stage2Config,
    seed: u64,
    cache: Option<&FeatureCache>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(FsHeads<f32>, Vec<EpochLog>)> {
    if train.len() < 2 {
        return Err(Error::EmptyDataset("stage-2 training needs at least two examples".into()));
    }
    if cfg.batch_size < 2 || !(cfg.adam.lr > 0.0) {
        return Err(Error::Config("stage 2 needs batch_size >= 2 and a positive learning rate".into()));
    }
    if model.stage < 1 {
        return Err(Error::Config("stage 2 requires a stage-1 backbone checkpoint".into()));
    }
    let layers = select_fs_layers(model.n_layers(), cfg.k)?;
    let fs = FsConfig {
        d_model: model.config.d_model,
        ..cfg.fs.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heads: FsHeads<f32> = FsHeads::new(&fs, layers.clone(), &mut rng)?;
    let source = match cache {
        Some(c) => {
            c.check(backbone_hash, &layers)?;
            Source::Cached(c)
        }
        None => {
            let mut all: Vec<&SmfExample> = train.to_vec();
            all.extend_from_slice(val);
            Source::Live(PatchCache::build(model, &all)?)
        }
    };
    let mut opt = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let examples: Vec<&SmfExample> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
            let inputs = source.inputs(model, &layers, &examples)?;
            let (loss, outs) = stage2_loss_and_grad(&mut heads, &inputs, &labels, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    loss: loss as f64,
                });
            }
            total += loss as f64 * chunk.len() as f64;
            for (head, out) in heads.heads.iter_mut().zip(&outs) {
                head.commit(&out.cache);
            }
            opt.step(&mut heads);
            heads.zero_grad();
        }
        let (val_loss, head_val_acc) = if val.is_empty() {
            (f64::NAN, Vec::new())
        } else {
            evaluate_heads(model, &heads, &source, val, cfg.batch_size)?
        };
        let mean_acc = if head_val_acc.is_empty() {
            f64::NAN
        } else {
            head_val_acc.iter().sum::<f64>() / head_val_acc.len() as f64
        };
        let log = EpochLog {
            stage: 2,
            epoch,
            train_loss: total / train.len() as f64,
            val_loss: finite_or_none(val_loss),
            val_acc: finite_or_none(mean_acc),
            head_val_acc,
            wall_ms: start.elapsed().as_millis() as u64,
            seed,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((heads, logs))
}
