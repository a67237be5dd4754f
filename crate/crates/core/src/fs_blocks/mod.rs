//! FS blocks: classification heads over the hidden states of one backbone
//! layer.
//!
//! ```text
//! f (S x d_model) -> per-token MLP -> v (S x d_p)
//! pooled = MHA(query = learnable q, keys = values = v)       (1 x d_p)
//! x -> x + MLP(BatchNorm(x))                                 R times
//! p = sigmoid(classifier(x))
//! ```
//!
//! Trainable parameter count for input width `d`, pooled width `p`, residual
//! hidden width `h` and `R` residual blocks:
//!
//! ```text
//! (d*p + p) + (p*p + p)          token MLP
//! + p + 4*(p*p + p)              query, q/k/v/o projections
//! + R*(2p + p*h + h + h*p + p)   batch-norm scale/shift, residual MLP
//! + (p + 1)                      classifier
//! ```
//!
//! Batch-norm running statistics are buffers, not parameters.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_backward, join, sigmoid, Linear, LinearCache, Mat, Param, Params, Real};

pub use checkpoint::{FsCheckpoint, FS_KIND};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsConfig {
    /// Width of the hidden states read by the head.
    pub d_model: usize,
    pub pool_heads: usize,
    pub d_pool: usize,
    pub residual_blocks: usize,
    pub residual_hidden: usize,
    pub dropout: f64,
}

impl Default for FsConfig {
    fn default() -> Self {
        FsConfig {
            d_model: 128,
            pool_heads: 4,
            d_pool: 128,
            residual_blocks: 2,
            residual_hidden: 256,
            dropout: 0.0,
        }
    }
}

impl FsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_pool == 0 || self.residual_hidden == 0 {
            return Err(Error::Config("FS block widths must be positive".into()));
        }
        if self.pool_heads == 0 || !self.d_pool.is_multiple_of(self.pool_heads) {
            return Err(Error::Config(format!(
                "d_pool {} is not divisible by {} pooling heads",
                self.d_pool, self.pool_heads
            )));
        }
        if self.residual_blocks == 0 {
            return Err(Error::Config("at least one residual block is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count (see module docs).
    pub fn param_count(&self) -> usize {
        let (d, p, h, r) = (self.d_model, self.d_pool, self.residual_hidden, self.residual_blocks);
        (d * p + p) + (p * p + p) + p + 4 * (p * p + p) + r * (2 * p + p * h + h + h * p + p) + (p + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the batch axis with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

pub struct BatchNormCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
    mode: Mode,
    /// Batch mean and unbiased variance, for the running update.
    stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(d: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Mat::from_vec(1, d, vec![T::ONE; d])),
            beta: Param::new(Mat::zeros(1, d)),
            running_mean: vec![T::ZERO; d],
            running_var: vec![T::ONE; d],
        }
    }

    pub fn forward(&self, x: &Mat<T>, mode: Mode) -> Result<(Mat<T>, BatchNormCache<T>)> {
        let (b, d) = x.shape();
        let eps = T::from_f64(BN_EPS);
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::Shape(format!("batch norm in train mode needs a batch of at least 2, got {b}")));
                }
                let n = T::from_f64(b as f64);
                let mut mean = vec![T::ZERO; d];
                for i in 0..b {
                    for (m, v) in mean.iter_mut().zip(x.row(i)) {
                        *m += *v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![T::ZERO; d];
                for i in 0..b {
                    for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                        *s += (*v - *m) * (*v - *m);
                    }
                }
                let unbiased: Vec<T> = var.iter().map(|s| *s / T::from_f64((b - 1) as f64)).collect();
                var.iter_mut().for_each(|s| *s /= n);
                (mean.clone(), var, Some((mean, unbiased)))
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::ONE / (*v + eps).sqrt()).collect();
        let mut xhat = Mat::zeros(b, d);
        let mut y = Mat::zeros(b, d);
        for i in 0..b {
            for j in 0..d {
                let h = (x.at(i, j) - mean[j]) * inv_std[j];
                xhat.row_mut(i)[j] = h;
                y.row_mut(i)[j] = self.gamma.value.data[j] * h + self.beta.value.data[j];
            }
        }
        Ok((
            y,
            BatchNormCache {
                xhat,
                inv_std,
                mode,
                stats,
            },
        ))
    }

    pub fn backward(&mut self, c: &BatchNormCache<T>, dy: &Mat<T>) -> Mat<T> {
        let (b, d) = dy.shape();
        let mut dgamma = vec![T::ZERO; d];
        let mut dbeta = vec![T::ZERO; d];
        for i in 0..b {
            for j in 0..d {
                dgamma[j] += dy.at(i, j) * c.xhat.at(i, j);
                dbeta[j] += dy.at(i, j);
            }
        }
        let mut dx = Mat::zeros(b, d);
        let n = T::from_f64(b as f64);
        for j in 0..d {
            let g = self.gamma.value.data[j];
            for i in 0..b {
                let dxhat = dy.at(i, j) * g;
                dx.row_mut(i)[j] = match c.mode {
                    Mode::Eval => dxhat * c.inv_std[j],
                    Mode::Train => c.inv_std[j] / n * (n * dxhat - g * dbeta[j] - g * c.xhat.at(i, j) * dgamma[j]),
                };
            }
        }
        if self.gamma.trainable {
            for j in 0..d {
                self.gamma.grad.data[j] += dgamma[j];
                self.beta.grad.data[j] += dbeta[j];
            }
        }
        dx
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// estimates.
    pub fn update_running(&mut self, c: &BatchNormCache<T>) {
        if let Some((mean, var)) = &c.stats {
            let m = T::from_f64(BN_MOMENTUM);
            for j in 0..mean.len() {
                self.running_mean[j] = (T::ONE - m) * self.running_mean[j] + m * mean[j];
                self.running_var[j] = (T::ONE - m) * self.running_var[j] + m * var[j];
            }
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
        }
    }
}

impl<T: Real> Params<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// `y = x + fc2(GELU(fc1(BN(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub bn: BatchNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct ResidualCache<T> {
    bn: BatchNormCache<T>,
    fc1: LinearCache<T>,
    pre: Mat<T>,
    mask: Option<Mat<T>>,
    fc2: LinearCache<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        ResidualBlock {
            bn: BatchNorm::new(d),
            fc1: Linear::new(d, hidden, (2.0 / d as f64).sqrt(), true, rng),
            fc2: Linear::new(hidden, d, 1.0 / (hidden as f64).sqrt(), true, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Mat<T>,
        mode: Mode,
        dropout: f64,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Mat<T>, ResidualCache<T>)> {
        let (xn, bn) = self.bn.forward(x, mode)?;
        let (pre, fc1) = self.fc1.forward(&xn);
        let mut act = gelu(&pre);
        let mask = match (mode, rng) {
            (Mode::Train, Some(rng)) if dropout > 0.0 => {
                let keep = T::from_f64(1.0 / (1.0 - dropout));
                let m = Mat::from_fn(act.rows, act.cols, |_, _| {
                    if rng.random::<f64>() < dropout {
                        T::ZERO
                    } else {
                        keep
                    }
                });
                for (a, k) in act.data.iter_mut().zip(&m.data) {
                    *a *= *k;
                }
                Some(m)
            }
            _ => None,
        };
        let (mut y, fc2) = self.fc2.forward(&act);
        y.add_assign(x);
        Ok((
            y,
            ResidualCache {
                bn,
                fc1,
                pre,
                mask,
                fc2,
            },
        ))
    }

    pub fn backward(&mut self, c: &ResidualCache<T>, dy: &Mat<T>) -> Mat<T> {
        let mut dact = self.fc2.backward(&c.fc2, dy);
        if let Some(m) = &c.mask {
            for (d, k) in dact.data.iter_mut().zip(&m.data) {
                *d *= *k;
            }
        }
        let dpre = gelu_backward(&c.pre, &dact);
        let dxn = self.fc1.backward(&c.fc1, &dpre);
        let mut dx = self.bn.backward(&c.bn, &dxn);
        dx.add_assign(dy);
        dx
    }

    pub fn cast<U: Real>(&self) -> ResidualBlock<U> {
        ResidualBlock {
            bn: self.bn.cast(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

impl<T: Real> Params<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.bn.visit(&join(prefix, "bn"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Per-token MLP followed by a single-query multi-head attention pool.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPool<T> {
    pub heads: usize,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
    /// `1 x d_p` learnable query.
    pub query: Param<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

pub struct PoolCache<T> {
    seqs: Vec<(usize, usize)>,
    mlp1: LinearCache<T>,
    pre: Mat<T>,
    mlp2: LinearCache<T>,
    qc: LinearCache<T>,
    qm: Mat<T>,
    kc: LinearCache<T>,
    km: Mat<T>,
    vc: LinearCache<T>,
    vm: Mat<T>,
    /// Attention weights per sequence, `heads x len` each.
    probs: Vec<Mat<T>>,
    oc: LinearCache<T>,
}

impl<T: Real> HybridPool<T> {
    pub fn new(d_in: usize, d_p: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let s_in = 1.0 / (d_in as f64).sqrt();
        let s = 1.0 / (d_p as f64).sqrt();
        HybridPool {
            heads,
            mlp1: Linear::new(d_in, d_p, s_in, true, rng),
            mlp2: Linear::new(d_p, d_p, s, true, rng),
            query: Param::new(Mat::randn(1, d_p, 1.0, rng)),
            q: Linear::new(d_p, d_p, s, true, rng),
            k: Linear::new(d_p, d_p, s, true, rng),
            v: Linear::new(d_p, d_p, s, true, rng),
            o: Linear::new(d_p, d_p, s, true, rng),
        }
    }

    /// Pools each `(start, len)` row range of `f` into one row.
    pub fn forward(&self, f: &Mat<T>, seqs: &[(usize, usize)]) -> (Mat<T>, PoolCache<T>) {
        let (pre, mlp1) = self.mlp1.forward(f);
        let (tokens, mlp2) = self.mlp2.forward(&gelu(&pre));
        let (qm, qc) = self.q.forward(&self.query.value);
        let (km, kc) = self.k.forward(&tokens);
        let (vm, vc) = self.v.forward(&tokens);
        let d = vm.cols;
        let dh = d / self.heads;
        let scale = T::ONE / T::from_f64(dh as f64).sqrt();
        let mut ctx = Mat::zeros(seqs.len(), d);
        let mut probs = Vec::with_capacity(seqs.len());
        for (s, &(start, len)) in seqs.iter().enumerate() {
            let mut p = Mat::zeros(self.heads, len);
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = &qm.row(0)[cols.clone()];
                let row = p.row_mut(h);
                for (j, r) in row.iter_mut().enumerate() {
                    let kh = &km.row(start + j)[cols.clone()];
                    *r = dot(qh, kh) * scale;
                }
                crate::nn::softmax_in_place(row);
                let out = &mut ctx.row_mut(s)[cols.clone()];
                for (j, &a) in p.row(h).iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(&vm.row(start + j)[cols.clone()]) {
                        *o += a * *v;
                    }
                }
            }
            probs.push(p);
        }
        let (pooled, oc) = self.o.forward(&ctx);
        let cache = PoolCache {
            seqs: seqs.to_vec(),
            mlp1,
            pre,
            mlp2,
            qc,
            qm,
            kc,
            km,
            vc,
            vm,
            probs,
            oc,
        };
        (pooled, cache)
    }

    pub fn backward(&mut self, c: &PoolCache<T>, dpooled: &Mat<T>) -> Mat<T> {
        let dctx = self.o.backward(&c.oc, dpooled);
        let d = c.vm.cols;
        let dh = d / self.heads;
        let scale = T::ONE / T::from_f64(dh as f64).sqrt();
        let mut dq = Mat::zeros(1, d);
        let mut dk = Mat::zeros(c.km.rows, d);
        let mut dv = Mat::zeros(c.vm.rows, d);
        for (s, &(start, len)) in c.seqs.iter().enumerate() {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let g = &dctx.row(s)[cols.clone()];
                let a = c.probs[s].row(h);
                let mut da = vec![T::ZERO; len];
                for j in 0..len {
                    da[j] = dot(g, &c.vm.row(start + j)[cols.clone()]);
                    for (x, gv) in dv.row_mut(start + j)[cols.clone()].iter_mut().zip(g) {
                        *x += a[j] * *gv;
                    }
                }
                let mean: T = a.iter().zip(&da).fold(T::ZERO, |acc, (p, d)| acc + *p * *d);
                for j in 0..len {
                    let ds = a[j] * (da[j] - mean) * scale;
                    let kh = &c.km.row(start + j)[cols.clone()];
                    for (x, k) in dq.row_mut(0)[cols.clone()].iter_mut().zip(kh) {
                        *x += ds * *k;
                    }
                    let qh = &c.qm.row(0)[cols.clone()];
                    for (x, q) in dk.row_mut(start + j)[cols.clone()].iter_mut().zip(qh) {
                        *x += ds * *q;
                    }
                }
            }
        }
        let dquery = self.q.backward(&c.qc, &dq);
        if self.query.trainable {
            self.query.grad.add_assign(&dquery);
        }
        let mut dtokens = self.k.backward(&c.kc, &dk);
        dtokens.add_assign(&self.v.backward(&c.vc, &dv));
        let dact = self.mlp2.backward(&c.mlp2, &dtokens);
        let dpre = gelu_backward(&c.pre, &dact);
        self.mlp1.backward(&c.mlp1, &dpre)
    }

    pub fn cast<U: Real>(&self) -> HybridPool<U> {
        HybridPool {
            heads: self.heads,
            mlp1: self.mlp1.cast(),
            mlp2: self.mlp2.cast(),
            query: self.query.cast(),
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::ZERO, |acc, (x, y)| acc + *x * *y)
}

impl<T: Real> Params<T> for HybridPool<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.mlp1.visit(&join(prefix, "mlp1"), f);
        self.mlp2.visit(&join(prefix, "mlp2"), f);
        f(join(prefix, "query"), &self.query);
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.mlp1.visit_mut(&join(prefix, "mlp1"), f);
        self.mlp2.visit_mut(&join(prefix, "mlp2"), f);
        f(join(prefix, "query"), &mut self.query);
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}

/// One FS block `FS_phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct FsBlock<T> {
    pub config: FsConfig,
    pub pool: HybridPool<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub classifier: Linear<T>,
}

pub struct FsCache<T> {
    pool: PoolCache<T>,
    blocks: Vec<ResidualCache<T>>,
    cls: LinearCache<T>,
}

/// Result of a forward pass over a batch of sequences.
pub struct FsOutput<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    pub cache: FsCache<T>,
}

impl<T: Real> FsBlock<T> {
    pub fn new(config: FsConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let pool = HybridPool::new(c.d_model, c.d_pool, c.pool_heads, rng);
        let blocks = (0..c.residual_blocks)
            .map(|_| ResidualBlock::new(c.d_pool, c.residual_hidden, rng))
            .collect();
        let classifier = Linear::new(c.d_pool, 1, 1.0 / (c.d_pool as f64).sqrt(), true, rng);
        Ok(FsBlock {
            config,
            pool,
            blocks,
            classifier,
        })
    }

    /// `f` stacks the hidden states of every sequence; `seqs` gives each
    /// sequence's `(start, len)` row range. Train mode uses batch statistics
    /// but leaves running estimates untouched until [`FsBlock::commit`].
    pub fn forward(
        &self,
        f: &Mat<T>,
        seqs: &[(usize, usize)],
        mode: Mode,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<FsOutput<T>> {
        if f.cols != self.config.d_model {
            return Err(Error::Shape(format!(
                "FS block expects width {}, got {}",
                self.config.d_model, f.cols
            )));
        }
        if !f.all_finite() {
            return Err(Error::Numerical("non-finite input features".into()));
        }
        if seqs.iter().any(|&(s, l)| l == 0 || s + l > f.rows) {
            return Err(Error::Shape("empty or out-of-range sequence".into()));
        }
        let (mut x, pool) = self.pool.forward(f, seqs);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let r = rng.as_mut().map(|r| &mut **r as &mut dyn rand::RngCore);
            let (y, c) = b.forward(&x, mode, self.config.dropout, r)?;
            x = y;
            blocks.push(c);
        }
        let (z, cls) = self.classifier.forward(&x);
        let logits = z.data;
        let probs = logits.iter().map(|&v| sigmoid(v)).collect();
        Ok(FsOutput {
            logits,
            probs,
            cache: FsCache { pool, blocks, cls },
        })
    }

    /// Probabilities in eval mode.
    pub fn predict(&self, f: &Mat<T>, seqs: &[(usize, usize)]) -> Result<Vec<T>> {
        Ok(self.forward(f, seqs, Mode::Eval, None)?.probs)
    }

    /// Accumulates gradients from `d loss / d logit` per sequence.
    pub fn backward(&mut self, c: &FsCache<T>, dlogits: &[T]) -> Mat<T> {
        let dz = Mat::from_vec(dlogits.len(), 1, dlogits.to_vec());
        let mut dx = self.classifier.backward(&c.cls, &dz);
        for (b, bc) in self.blocks.iter_mut().zip(&c.blocks).rev() {
            dx = b.backward(bc, &dx);
        }
        self.pool.backward(&c.pool, &dx)
    }

    /// Applies the running-statistics update of a train-mode forward.
    pub fn commit(&mut self, c: &FsCache<T>) {
        for (b, bc) in self.blocks.iter_mut().zip(&c.blocks) {
            b.bn.update_running(&bc.bn);
        }
    }

    pub fn cast<U: Real>(&self) -> FsBlock<U> {
        FsBlock {
            config: self.config.clone(),
            pool: self.pool.cast(),
            blocks: self.blocks.iter().map(ResidualBlock::cast).collect(),
            classifier: self.classifier.cast(),
        }
    }

    /// Running statistics as `(name, values)` pairs.
    pub fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("blocks.{i}.bn.running_var"), &b.bn.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.bn.running_mean"), &mut b.bn.running_mean));
            out.push((format!("blocks.{i}.bn.running_var"), &mut b.bn.running_var));
        }
        out
    }
}

impl<T: Real> Params<T> for FsBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.pool.visit(&join(prefix, "pool"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.pool.visit_mut(&join(prefix, "pool"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// The K heads with the backbone layer each one reads.
#[derive(Debug, Clone, PartialEq)]
pub struct FsHeads<T> {
    pub layers: Vec<usize>,
    pub heads: Vec<FsBlock<T>>,
}

impl<T: Real> FsHeads<T> {
    pub fn new(config: &FsConfig, layers: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        let heads = layers
            .iter()
            .map(|_| FsBlock::new(config.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(FsHeads { layers, heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn config(&self) -> Option<&FsConfig> {
        self.heads.first().map(|h| &h.config)
    }
}

impl<T: Real> Params<T> for FsHeads<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        for (k, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("head{k}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (k, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("head{k}")), f);
        }
    }
}
