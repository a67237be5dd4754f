//! Toy multimodal backbone: frozen vision encoder, trainable projector,
//! causal language model with LoRA on the K/Q/V projections, and access to
//! every layer's hidden states.

pub mod checkpoint;
mod lm;
mod vision;
pub mod vocab;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Container, Tensor};
pub use lm::{Block, Lm, LmRun};
pub use vision::VisionEncoder;
pub use vocab::Vocabulary;

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, join, sinusoidal_positions, Linear, LinearCache, Lora, Mat, Param, Params, Real};
use crate::worldgen::Frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub patch: usize,
    pub vision_width: usize,
    pub vision_heads: usize,
    pub projector_hidden: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Standard deviation of the adapter down-projection `A` at init.
    pub lora_init_std: f64,
    /// Seed of the random (frozen) base weights.
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 128,
            n_layers: 8,
            n_heads: 4,
            d_ff: 512,
            patch: 16,
            vision_width: 128,
            vision_heads: 4,
            projector_hidden: 256,
            max_seq_len: 64,
            vocab_size: 200,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_init_std: 0.02,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vision_heads == 0 || !self.vision_width.is_multiple_of(self.vision_heads) {
            return bad(format!(
                "vision_width {} not divisible by vision_heads {}",
                self.vision_width, self.vision_heads
            ));
        }
        if self.n_layers == 0 || self.patch == 0 || self.d_ff == 0 || self.projector_hidden == 0 {
            return bad("layer counts and widths must be positive".into());
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1".into());
        }
        if !(self.lora_alpha > 0.0) {
            return bad("lora_alpha must be positive".into());
        }
        Ok(())
    }

    /// Checks that a tiled image of this size can be encoded.
    pub fn check_image(&self, h: usize, w: usize) -> Result<usize> {
        if h == 0 || w == 0 || !h.is_multiple_of(self.patch) || !w.is_multiple_of(self.patch) {
            return Err(Error::Shape(format!(
                "{h}x{w} image is not divisible into {p}x{p} patches",
                p = self.patch
            )));
        }
        Ok((h / self.patch) * (w / self.patch))
    }
}

/// Two-layer GELU MLP from vision width to model width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct ProjectorCache<T> {
    fc1: LinearCache<T>,
    pre_act: Mat<T>,
    fc2: LinearCache<T>,
}

impl<T: Real> Projector<T> {
    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, ProjectorCache<T>) {
        let (pre_act, fc1) = self.fc1.forward(x);
        let (y, fc2) = self.fc2.forward(&gelu(&pre_act));
        (y, ProjectorCache { fc1, pre_act, fc2 })
    }

    pub fn backward(&mut self, c: &ProjectorCache<T>, dy: &Mat<T>) -> Mat<T> {
        let da = self.fc2.backward(&c.fc2, dy);
        let dpre = gelu_backward(&c.pre_act, &da);
        self.fc1.backward(&c.fc1, &dpre)
    }

    fn cast<U: Real>(&self) -> Projector<U> {
        Projector {
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

impl<T: Real> Params<T> for Projector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// `P(tau, g)`: patch embeddings of the tiled image plus the token layout
/// `[<image> x P] <bos> instruction: g <sep> verdict:`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt<T> {
    /// `[P][vision_width]`, output of the frozen encoder.
    pub patches: Mat<T>,
    /// Full token sequence; the first `patches.rows` entries are `<image>`.
    pub tokens: Vec<u32>,
}

impl<T: Real> Prompt<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn visual_len(&self) -> usize {
        self.patches.rows
    }

    /// Index of the slot whose token is being predicted (one past the end).
    pub fn answer_position(&self) -> usize {
        self.tokens.len()
    }
}

pub struct ForwardOutput<T> {
    /// `[len][vocab]`.
    pub logits: Mat<T>,
    /// `L + 1` matrices `[len][d_model]`: embeddings, then each layer's output.
    pub hidden: Vec<Mat<T>>,
}

/// Packed forward pass over several prompts, kept for backpropagation.
pub struct BatchRun<T> {
    pub seqs: Vec<(usize, usize)>,
    pub lm: LmRun<T>,
    projector: ProjectorCache<T>,
    /// Packed row of every visual token, in projector-input order.
    visual_rows: Vec<usize>,
}

impl<T: Real> BatchRun<T> {
    /// Packed row of position `pos` in sequence `seq`.
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        self.seqs[seq].0 + pos
    }

    pub fn last_hidden(&self) -> &Mat<T> {
        self.lm.hidden.last().expect("hidden states")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterState {
    Active,
    Merged,
}

/// Full backbone parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub vocab: Vocabulary,
    pub vision: VisionEncoder<T>,
    pub projector: Projector<T>,
    pub lm: Lm<T>,
    pub adapters: AdapterState,
    /// 0 = freshly initialized, 1 = after stage-1 training.
    pub stage: u8,
    positions: Mat<T>,
}

impl<T: Real> Backbone<T> {
    /// Random base weights from `config.seed`, zero-initialized adapters and
    /// the stage-1 trainable set (projector + adapters).
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::for_catalog(config.vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let vision = VisionEncoder::new(c.patch, c.vision_width, c.vision_heads, &mut rng);
        let projector = Projector {
            fc1: Linear::new(c.vision_width, c.projector_hidden, 1.0 / (c.vision_width as f64).sqrt(), true, &mut rng),
            fc2: Linear::new(c.projector_hidden, c.d_model, 1.0 / (c.projector_hidden as f64).sqrt(), true, &mut rng),
        };
        let mut lm = Lm::new(c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, &mut rng);
        lm.set_trainable(false);
        for block in &mut lm.blocks {
            for lin in block.kqv_mut() {
                lin.lora = Some(Lora::new(c.d_model, c.d_model, c.lora_rank, c.lora_alpha, c.lora_init_std, &mut rng));
            }
        }
        let positions = sinusoidal_positions(c.max_seq_len, c.d_model);
        Ok(Backbone {
            config,
            vocab,
            vision,
            projector,
            lm,
            adapters: AdapterState::Active,
            stage: 0,
            positions,
        })
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            vision: self.vision.cast(),
            projector: self.projector.cast(),
            lm: self.lm.cast(),
            adapters: self.adapters,
            stage: self.stage,
            positions: self.positions.cast(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.lm.blocks.len()
    }

    /// Stage-1 trainable set: projector and adapters only.
    pub fn set_stage1_trainable(&mut self) {
        self.set_trainable(false);
        self.projector.set_trainable(true);
        for block in &mut self.lm.blocks {
            for lin in block.kqv_mut() {
                if let Some(l) = lin.lora.as_mut() {
                    l.a.trainable = true;
                    l.b.trainable = true;
                }
            }
        }
    }

    pub fn encode_image(&self, tiled: &Frame) -> Result<Mat<T>> {
        self.config.check_image(tiled.height, tiled.width)?;
        self.vision.encode(tiled)
    }

    pub fn project(&self, patches: &Mat<T>) -> Mat<T> {
        self.projector.forward(patches).0
    }

    /// Token layout after the visual block.
    pub fn text_tokens(&self, instruction: &str) -> Result<Vec<u32>> {
        let v = &self.vocab;
        let mut t = vec![v.special(vocab::BOS), v.id(vocab::INSTRUCTION_MARK)?];
        t.extend(v.tokenize(instruction)?);
        t.push(v.special(vocab::SEP));
        t.push(v.id(vocab::VERDICT_MARK)?);
        Ok(t)
    }

    /// Builds a prompt from already-encoded patches.
    pub fn prompt_from_patches(&self, patches: Mat<T>, instruction: &str) -> Result<Prompt<T>> {
        if patches.cols != self.config.vision_width {
            return Err(Error::Shape(format!(
                "patch embeddings have width {}, expected {}",
                patches.cols, self.config.vision_width
            )));
        }
        let mut tokens = vec![self.vocab.special(vocab::IMAGE); patches.rows];
        tokens.extend(self.text_tokens(instruction)?);
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceOverflow {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        Ok(Prompt { patches, tokens })
    }

    pub fn build_prompt(&self, tiled: &Frame, instruction: &str) -> Result<Prompt<T>> {
        self.prompt_from_patches(self.encode_image(tiled)?, instruction)
    }

    fn check_prompt(&self, p: &Prompt<T>) -> Result<()> {
        let image = self.vocab.special(vocab::IMAGE);
        let p_len = p.visual_len();
        if p.tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceOverflow {
                len: p.tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if p.tokens.len() < p_len || p.tokens[..p_len].iter().any(|&t| t != image) {
            return Err(Error::Shape("prompt must start with one <image> per patch".into()));
        }
        if p.tokens.iter().any(|&t| t as usize >= self.vocab.len()) {
            return Err(Error::Shape("token id outside the vocabulary".into()));
        }
        Ok(())
    }

    /// Packed forward over `prompts`, keeping activations for backward.
    pub fn run_batch(&self, prompts: &[&Prompt<T>]) -> Result<BatchRun<T>> {
        let mut seqs = Vec::with_capacity(prompts.len());
        let mut total = 0;
        for p in prompts {
            self.check_prompt(p)?;
            seqs.push((total, p.len()));
            total += p.len();
        }
        let patch_refs: Vec<&Mat<T>> = prompts.iter().map(|p| &p.patches).collect();
        let stacked = Mat::vstack(&patch_refs);
        let (visual, projector) = if stacked.rows > 0 {
            self.projector.forward(&stacked)
        } else {
            let (_, c) = self.projector.forward(&Mat::zeros(0, self.config.vision_width));
            (Mat::zeros(0, self.config.d_model), c)
        };
        let d = self.config.d_model;
        let mut x = Mat::zeros(total, d);
        let mut visual_rows = Vec::with_capacity(stacked.rows);
        let mut vi = 0;
        for (p, &(start, len)) in prompts.iter().zip(&seqs) {
            for pos in 0..len {
                let row = x.row_mut(start + pos);
                if pos < p.visual_len() {
                    row.copy_from_slice(visual.row(vi));
                    visual_rows.push(start + pos);
                    vi += 1;
                } else {
                    row.copy_from_slice(self.lm.embed.value.row(p.tokens[pos] as usize));
                }
                for (a, b) in row.iter_mut().zip(self.positions.row(pos)) {
                    *a += *b;
                }
            }
        }
        let lm = self.lm.forward(x, &seqs);
        Ok(BatchRun {
            seqs,
            lm,
            projector,
            visual_rows,
        })
    }

    /// Backpropagates `d hidden[L]` (packed) into the trainable parameters.
    pub fn backward_batch(&mut self, run: &BatchRun<T>, d_last: Mat<T>) {
        let dx = self.lm.backward(&run.lm, d_last, &run.seqs);
        let mut dvis = Mat::zeros(run.visual_rows.len(), dx.cols);
        for (i, &r) in run.visual_rows.iter().enumerate() {
            dvis.row_mut(i).copy_from_slice(dx.row(r));
        }
        if dvis.rows > 0 {
            self.projector.backward(&run.projector, &dvis);
        }
    }

    /// Logits and all hidden states of one prompt.
    pub fn forward(&self, prompt: &Prompt<T>) -> Result<ForwardOutput<T>> {
        let run = self.run_batch(&[prompt])?;
        let (logits, _) = self.lm.logits(run.last_hidden());
        Ok(ForwardOutput {
            logits,
            hidden: run.lm.hidden,
        })
    }

    /// Logit rows at the given packed rows of a batch run.
    pub fn logits_at(&self, run: &BatchRun<T>, rows: &[usize]) -> Mat<T> {
        let h = gather(run.last_hidden(), rows);
        self.lm.logits(&h).0
    }

    /// `(logit(<success>), logit(<fail>))` at the answer slot of each prompt.
    pub fn verdict_logits(&self, run: &BatchRun<T>) -> Vec<(T, T)> {
        let rows: Vec<usize> = run.seqs.iter().map(|&(s, l)| s + l - 1).collect();
        let logits = self.logits_at(run, &rows);
        let (s, f) = (self.vocab.special(vocab::SUCCESS) as usize, self.vocab.special(vocab::FAIL) as usize);
        (0..logits.rows).map(|i| (logits.at(i, s), logits.at(i, f))).collect()
    }

    /// Constrained verdict: 1 iff `<success>` strictly beats `<fail>`.
    pub fn predict_token(&self, prompt: &Prompt<T>) -> Result<u8> {
        let run = self.run_batch(&[prompt])?;
        let (s, f) = self.verdict_logits(&run)[0];
        Ok(verdict_from_logits(s, f))
    }

    /// Folds every adapter into its base weight.
    pub fn merge_lora(&mut self) -> Result<()> {
        if self.adapters == AdapterState::Merged {
            return Err(Error::AdaptersConsumed);
        }
        for block in &mut self.lm.blocks {
            for lin in block.kqv_mut() {
                lin.merge_adapter();
            }
        }
        self.adapters = AdapterState::Merged;
        Ok(())
    }

    pub fn merged(&self) -> Result<Self> {
        let mut m = self.clone();
        m.merge_lora()?;
        Ok(m)
    }

    pub fn trainable_set(&self) -> Vec<String> {
        self.trainable_names()
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            kind: "backbone".into(),
            stage: self.stage,
            adapters: self.adapters,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            trainable: self.trainable_set(),
        };
        Ok(Container {
            meta: serde_json::to_value(&meta)?,
            tensors: checkpoint::collect_tensors(self, ""),
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad backbone metadata: {e}")))?;
        if meta.kind != "backbone" {
            return Err(Error::Checkpoint(format!("expected a backbone checkpoint, found `{}`", meta.kind)));
        }
        let mut model = Backbone::new(meta.config)?;
        if model.vocab.tokens() != meta.vocab.as_slice() {
            model.vocab = Vocabulary::from_tokens(meta.vocab)?;
        }
        if meta.adapters == AdapterState::Merged {
            for block in &mut model.lm.blocks {
                for lin in block.kqv_mut() {
                    lin.lora = None;
                }
            }
            model.adapters = AdapterState::Merged;
        }
        checkpoint::assign_tensors(&mut model, "", &c.tensors)?;
        model.stage = meta.stage;
        let trainable: std::collections::HashSet<String> = meta.trainable.into_iter().collect();
        model.visit_mut("", &mut |name, p| p.trainable = trainable.contains(&name));
        Ok(model)
    }

    /// Writes the checkpoint and returns its SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_container()?.save(path)
    }

    /// Loads a checkpoint and its SHA-256.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (c, hash) = Container::load(path)?;
        Ok((Backbone::from_container(&c)?, hash))
    }

    /// SHA-256 of the serialized checkpoint bytes.
    pub fn hash(&self) -> Result<String> {
        Ok(checkpoint::hash_bytes(&self.to_container()?.to_bytes()?))
    }
}

impl<T: Real> Params<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.vision.visit(&join(prefix, "vision"), f);
        self.projector.visit(&join(prefix, "projector"), f);
        self.lm.visit(&join(prefix, "lm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.vision.visit_mut(&join(prefix, "vision"), f);
        self.projector.visit_mut(&join(prefix, "projector"), f);
        self.lm.visit_mut(&join(prefix, "lm"), f);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    stage: u8,
    adapters: AdapterState,
    config: BackboneConfig,
    vocab: Vec<String>,
    trainable: Vec<String>,
}

pub(crate) fn gather<T: Real>(m: &Mat<T>, rows: &[usize]) -> Mat<T> {
    let mut out = Mat::zeros(rows.len(), m.cols);
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

/// 1 iff `success > fail`; exact ties go to 0.
pub fn verdict_from_logits<T: Real>(success: T, fail: T) -> u8 {
    u8::from(success > fail)
}

/// `K` layer indices spread evenly over `1..=L`:
/// `round(k L / (K + 1))`, clamped, with collisions pushed up by one.
pub fn select_fs_layers(n_layers: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n_layers {
        return Err(Error::Config(format!("need 1 <= K <= L, got K={k}, L={n_layers}")));
    }
    let mut out: Vec<usize> = Vec::with_capacity(k);
    for i in 1..=k {
        let raw = (i as f64 * n_layers as f64 / (k + 1) as f64).round() as usize;
        let mut idx = raw.clamp(1, n_layers);
        if let Some(&prev) = out.last() {
            idx = idx.max(prev + 1);
        }
        if idx > n_layers {
            return Err(Error::Config(format!("cannot place {k} distinct layers in {n_layers}")));
        }
        out.push(idx);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    pub(crate) fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            d_ff: 32,
            patch: 16,
            vision_width: 12,
            vision_heads: 2,
            projector_hidden: 20,
            max_seq_len: 40,
            seed: 9,
            ..BackboneConfig::default()
        }
    }

    fn image(seed: u64, h: usize, w: usize) -> Frame {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame {
            height: h,
            width: w,
            data: (0..3 * h * w).map(|_| rng.random()).collect(),
        }
    }

    fn randomize_adapters(m: &mut Backbone<f32>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut m.lm.blocks {
            for lin in b.kqv_mut() {
                let l = lin.lora.as_mut().unwrap();
                l.b.value = Mat::randn(l.b.value.rows, l.b.value.cols, 0.2, &mut rng);
            }
        }
    }

    #[test]
    fn layer_selection_examples() {
        assert_eq!(select_fs_layers(8, 3).unwrap(), vec![2, 4, 6]);
        assert_eq!(select_fs_layers(24, 3).unwrap(), vec![6, 12, 18]);
        assert_eq!(select_fs_layers(3, 3).unwrap(), vec![1, 2, 3]);
        assert!(select_fs_layers(3, 4).is_err());
        assert!(select_fs_layers(3, 0).is_err());
    }

    #[test]
    fn patch_count_and_shape_errors() {
        let m: Backbone<f32> = Backbone::new(BackboneConfig::default()).unwrap();
        let p = m.encode_image(&image(1, 64, 128)).unwrap();
        assert_eq!(p.shape(), (32, 128));
        assert!(matches!(m.encode_image(&image(1, 60, 128)), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_is_deterministic_and_input_sensitive() {
        let m: Backbone<f32> = Backbone::new(tiny_config()).unwrap();
        let img = image(2, 32, 64);
        assert_eq!(m.encode_image(&img).unwrap(), m.encode_image(&img).unwrap());
        assert_ne!(m.encode_image(&img).unwrap(), m.encode_image(&Frame::zeros(32, 64)).unwrap());
    }

    #[test]
    fn zero_final_projector_layer_gives_zero_tokens() {
        let mut m: Backbone<f32> = Backbone::new(tiny_config()).unwrap();
        m.projector.fc2.w.value.fill(0.0);
        let p = m.encode_image(&image(3, 16, 32)).unwrap();
        let v = m.project(&p);
        assert_eq!(v.shape(), (2, 16));
        assert!(v.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn prompt_layout() {
        let m: Backbone<f32> = Backbone::new(tiny_config()).unwrap();
        let img = image(4, 16, 64);
        let a = m.build_prompt(&img, "lift the red cube").unwrap();
        let b = m.build_prompt(&img, "lift the blue cube").unwrap();
        assert_eq!(a, m.build_prompt(&img, "lift the red cube").unwrap());
        assert_eq!(a.visual_len(), 4);
        assert_eq!(a.answer_position(), a.len());
        let text = m.vocab.detokenize(&a.tokens[4..]).unwrap();
        assert_eq!(text, "<bos> instruction: lift the red cube <sep> verdict:");
        assert_eq!(a.patches, b.patches);
        let first_diff = a.tokens.iter().zip(&b.tokens).position(|(x, y)| x != y).unwrap();
        assert!(first_diff >= a.visual_len());
        let long = vec!["lift"; 40].join(" ");
        assert!(matches!(m.build_prompt(&img, &long), Err(Error::SequenceOverflow { .. })));
        assert!(matches!(m.build_prompt(&img, "lift the purple cube"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn hidden_states_and_causality() {
        let m: Backbone<f64> = Backbone::new(tiny_config()).unwrap();
        let img = image(5, 16, 32);
        let p = m.build_prompt(&img, "lift the red cube").unwrap();
        let out = m.forward(&p).unwrap();
        assert_eq!(out.hidden.len(), 4);
        assert_eq!(out.logits.shape(), (p.len(), 200));
        let mut q = p.clone();
        let last = q.tokens.len() - 3;
        q.tokens[last] = m.vocab.id("blue").unwrap();
        let out2 = m.forward(&q).unwrap();
        for i in 0..last {
            assert_eq!(out.logits.row(i), out2.logits.row(i));
        }
        assert_ne!(out.logits.row(last), out2.logits.row(last));
    }

    #[test]
    fn packed_batch_matches_single_forward() {
        let m: Backbone<f64> = Backbone::new(tiny_config()).unwrap();
        let a = m.build_prompt(&image(6, 16, 32), "lift the red cube").unwrap();
        let b = m.build_prompt(&image(7, 16, 48), "turn on the light").unwrap();
        let run = m.run_batch(&[&a, &b]).unwrap();
        let single = m.forward(&b).unwrap();
        let h = run.last_hidden();
        for i in 0..b.len() {
            for (x, y) in h.row(run.row(1, i)).iter().zip(single.hidden[3].row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_b_adapters_leave_logits_unchanged() {
        let m: Backbone<f32> = Backbone::new(tiny_config()).unwrap();
        let mut base = m.clone();
        for b in &mut base.lm.blocks {
            for lin in b.kqv_mut() {
                lin.lora = None;
            }
        }
        let p = m.build_prompt(&image(8, 16, 32), "push the red cube left").unwrap();
        let a = m.forward(&p).unwrap().logits;
        let b = base.forward(&p).unwrap().logits;
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn merge_matches_adapted_and_is_single_use() {
        let mut m: Backbone<f32> = Backbone::new(tiny_config()).unwrap();
        randomize_adapters(&mut m, 3);
        let p = m.build_prompt(&image(9, 16, 32), "rotate the blue cube right").unwrap();
        let adapted = m.forward(&p).unwrap().logits;
        let mut merged = m.clone();
        merged.merge_lora().unwrap();
        let out = merged.forward(&p).unwrap().logits;
        let scale = adapted.data.iter().fold(0f32, |a, b| a.max(b.abs()));
        for (x, y) in adapted.data.iter().zip(&out.data) {
            assert!((x - y).abs() <= 1e-5 * scale);
        }
        assert!(matches!(merged.merge_lora(), Err(Error::AdaptersConsumed)));
    }

    #[test]
    fn tie_goes_to_failure() {
        assert_eq!(verdict_from_logits(2.0f32, 1.0), 1);
        assert_eq!(verdict_from_logits(1.0f32, 1.0), 0);
        assert_eq!(verdict_from_logits(0.0f32, 1.0), 0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let mut m: Backbone<f32> = Backbone::new(tiny_config()).unwrap();
        randomize_adapters(&mut m, 4);
        m.set_stage1_trainable();
        m.stage = 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        let h1 = m.save(&path).unwrap();
        let (back, h2) = Backbone::<f32>::load(&path).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(back, m);
        assert_eq!(back.hash().unwrap(), h1);
        let merged = m.merged().unwrap();
        merged.save(&path).unwrap();
        assert_eq!(Backbone::<f32>::load(&path).unwrap().0, merged);
    }

    #[test]
    fn stage1_trainable_set() {
        let mut m: Backbone<f32> = Backbone::new(tiny_config()).unwrap();
        m.set_stage1_trainable();
        for name in m.trainable_set() {
            assert!(name.starts_with("projector.") || name.contains(".lora_"), "{name}");
        }
        assert_eq!(m.trainable_set().len(), 4 + 3 * 3 * 2);
    }
}
