//! Stage 1: verdict-token cross-entropy with only projector and adapters
//! trainable.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{finite_or_none, EpochLog};
use crate::backbone::{vocab, Backbone, BatchRun, Prompt};
use crate::dataset::SmfExample;
use crate::error::{Error, Result};
use crate::nn::{log_softmax, Adam, AdamConfig, Mat, Params, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 20,
            batch_size: 16,
            adam: AdamConfig::default(),
        }
    }
}

/// Target token sequence `t_1..t_M` for a label (here `M = 1`).
pub fn targets_for(model: &Backbone<impl Real>, label: u8) -> Vec<u32> {
    let tok = if label == 1 { vocab::SUCCESS } else { vocab::FAIL };
    vec![model.vocab.special(tok)]
}

fn check_targets<T: Real>(model: &Backbone<T>, targets: &[Vec<u32>]) -> Result<()> {
    let ok = [model.vocab.special(vocab::SUCCESS), model.vocab.special(vocab::FAIL)];
    for t in targets {
        if t.is_empty() {
            return Err(Error::Config("empty target sequence".into()));
        }
        if let Some(&bad) = t.iter().find(|x| !ok.contains(x)) {
            return Err(Error::InvalidTarget(bad));
        }
    }
    Ok(())
}

/// Teacher-forced sequences: each prompt extended with `t_1..t_{M-1}`.
fn teacher_forced<T: Real>(prompts: &[&Prompt<T>], targets: &[Vec<u32>]) -> Vec<Prompt<T>> {
    prompts
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let mut q = (*p).clone();
            q.tokens.extend_from_slice(&t[..t.len() - 1]);
            q
        })
        .collect()
}

struct Scored<T> {
    run: BatchRun<T>,
    rows: Vec<usize>,
    /// Target id per scored row, with the row's weight `1 / (M * B)`.
    wanted: Vec<(usize, T)>,
    logits: Mat<T>,
    loss: T,
}

fn score<T: Real>(model: &Backbone<T>, prompts: &[&Prompt<T>], targets: &[Vec<u32>]) -> Result<Scored<T>> {
    if prompts.is_empty() || prompts.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} prompts for {} target sequences",
            prompts.len(),
            targets.len()
        )));
    }
    check_targets(model, targets)?;
    let seqs = teacher_forced(prompts, targets);
    let refs: Vec<&Prompt<T>> = seqs.iter().collect();
    let run = model.run_batch(&refs)?;
    let b = T::from_f64(prompts.len() as f64);
    let mut rows = Vec::new();
    let mut wanted = Vec::new();
    for (s, (p, t)) in prompts.iter().zip(targets).enumerate() {
        let m = T::from_f64(t.len() as f64);
        for (i, &tok) in t.iter().enumerate() {
            rows.push(run.row(s, p.len() - 1 + i));
            wanted.push((tok as usize, T::ONE / (m * b)));
        }
    }
    let logits = model.logits_at(&run, &rows);
    let mut loss = T::ZERO;
    for (i, &(tok, w)) in wanted.iter().enumerate() {
        loss -= w * log_softmax(logits.row(i))[tok];
    }
    Ok(Scored {
        run,
        rows,
        wanted,
        logits,
        loss,
    })
}

/// `-(1/M) sum_i log p(t_i | x, t_<i)`, averaged over the batch.
pub fn stage1_loss<T: Real>(model: &Backbone<T>, prompts: &[&Prompt<T>], targets: &[Vec<u32>]) -> Result<T> {
    Ok(score(model, prompts, targets)?.loss)
}

/// Loss plus gradient accumulation into the trainable parameters.
pub fn stage1_loss_and_grad<T: Real>(
    model: &mut Backbone<T>,
    prompts: &[&Prompt<T>],
    targets: &[Vec<u32>],
) -> Result<T> {
    let s = score(model, prompts, targets)?;
    let mut dlogits = Mat::zeros(s.logits.rows, s.logits.cols);
    for (i, &(tok, w)) in s.wanted.iter().enumerate() {
        let lp = log_softmax(s.logits.row(i));
        let row = dlogits.row_mut(i);
        for (d, l) in row.iter_mut().zip(&lp) {
            *d = l.exp() * w;
        }
        row[tok] -= w;
    }
    let (_, cache) = model.lm.logits(&crate::backbone::gather(s.run.last_hidden(), &s.rows));
    let dh = model.lm.logits_backward(&cache, &dlogits);
    let last = s.run.last_hidden();
    let mut d_last = Mat::zeros(last.rows, last.cols);
    for (i, &r) in s.rows.iter().enumerate() {
        for (a, b) in d_last.row_mut(r).iter_mut().zip(dh.row(i)) {
            *a += *b;
        }
    }
    model.backward_batch(&s.run, d_last);
    Ok(s.loss)
}

/// Frozen encoder output per episode, computed once.
pub struct PatchCache<T> {
    patches: HashMap<String, Mat<T>>,
}

impl<T: Real> PatchCache<T> {
    pub fn build(model: &Backbone<T>, examples: &[&SmfExample]) -> Result<Self> {
        let mut patches = HashMap::new();
        for e in examples {
            if !patches.contains_key(&e.episode_id) {
                patches.insert(e.episode_id.clone(), model.encode_image(&e.image)?);
            }
        }
        Ok(PatchCache { patches })
    }

    pub fn prompt(&self, model: &Backbone<T>, e: &SmfExample) -> Result<Prompt<T>> {
        let p = self
            .patches
            .get(&e.episode_id)
            .ok_or_else(|| Error::Config(format!("no encoded image for `{}`", e.episode_id)))?;
        model.prompt_from_patches(p.clone(), &e.instruction)
    }
}

/// Mean verdict loss and verdict accuracy over `examples`.
pub fn evaluate_stage1<T: Real>(
    model: &Backbone<T>,
    cache: &PatchCache<T>,
    examples: &[&SmfExample],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let prompts = chunk
            .iter()
            .map(|e| cache.prompt(model, e))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Prompt<T>> = prompts.iter().collect();
        let targets: Vec<Vec<u32>> = chunk.iter().map(|e| targets_for(model, e.label)).collect();
        let s = score(model, &refs, &targets)?;
        loss += s.loss.to_f64() * chunk.len() as f64;
        for (e, (sl, fl)) in chunk.iter().zip(model.verdict_logits(&s.run)) {
            if crate::backbone::verdict_from_logits(sl, fl) == e.label {
                correct += 1;
            }
        }
    }
    let n = examples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains projector and adapters in place. Base weights are frozen before
/// the first step; one log entry is produced per epoch.
pub fn train_stage1(
    model: &mut Backbone<f32>,
    train: &[&SmfExample],
    val: &[&SmfExample],
    cfg: &Stage1Config,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("stage-1 training split is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.adam.lr > 0.0) {
        return Err(Error::Config("batch_size and learning rate must be positive".into()));
    }
    model.set_stage1_trainable();
    model.zero_grad();
    let mut all: Vec<&SmfExample> = train.to_vec();
    all.extend_from_slice(val);
    let cache = PatchCache::build(model, &all)?;
    let mut opt = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let prompts = chunk
                .iter()
                .map(|&i| cache.prompt(model, train[i]))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Prompt<f32>> = prompts.iter().collect();
            let targets: Vec<Vec<u32>> = chunk.iter().map(|&i| targets_for(model, train[i].label)).collect();
            let loss = stage1_loss_and_grad(model, &refs, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    loss: loss as f64,
                });
            }
            total += loss as f64 * chunk.len() as f64;
            opt.step(model);
            model.zero_grad();
        }
        let (val_loss, val_acc) = evaluate_stage1(model, &cache, val, cfg.batch_size)?;
        let log = EpochLog {
            stage: 1,
            epoch,
            train_loss: total / train.len() as f64,
            val_loss: finite_or_none(val_loss),
            val_acc: finite_or_none(val_acc),
            head_val_acc: Vec::new(),
            wall_ms: start.elapsed().as_millis() as u64,
            seed,
        };
        on_epoch(&log);
        logs.push(log);
    }
    model.stage = 1;
    Ok(logs)
}
