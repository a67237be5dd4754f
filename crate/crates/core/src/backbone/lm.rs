//! Pre-norm causal transformer with tied input/output embeddings.

use rand::Rng;

use crate::nn::{
    attention_backward, attention_forward, gelu, gelu_backward, join, AttentionCache, LayerNorm,
    LayerNormCache, Linear, LinearCache, Mat, Param, Params, Real,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    q: LinearCache<T>,
    k: LinearCache<T>,
    v: LinearCache<T>,
    qm: Mat<T>,
    km: Mat<T>,
    vm: Mat<T>,
    att: AttentionCache<T>,
    o: LinearCache<T>,
    ln2: LayerNormCache<T>,
    fc1: LinearCache<T>,
    pre_act: Mat<T>,
    fc2: LinearCache<T>,
}

impl<T: Real> Block<T> {
    pub fn new(d: usize, d_ff: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        // Residual-branch outputs are shrunk so the stream stays dominated by
        // the token embeddings at initialization.
        let out_std = |fan: usize| 1.0 / (fan as f64).sqrt() / (2.0 * layers as f64).sqrt();
        Block {
            ln1: LayerNorm::new(d),
            q: Linear::new(d, d, std, true, rng),
            k: Linear::new(d, d, std, true, rng),
            v: Linear::new(d, d, std, true, rng),
            o: Linear::new(d, d, out_std(d), true, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, d_ff, std, true, rng),
            fc2: Linear::new(d_ff, d, out_std(d_ff), true, rng),
        }
    }

    pub fn forward(&self, x: &Mat<T>, seqs: &[(usize, usize)], heads: usize) -> (Mat<T>, BlockCache<T>) {
        let (xn, ln1) = self.ln1.forward(x);
        let (qm, q) = self.q.forward(&xn);
        let (km, k) = self.k.forward(&xn);
        let (vm, v) = self.v.forward(&xn);
        let (a, att) = attention_forward(&qm, &km, &vm, seqs, heads, true);
        let (ao, o) = self.o.forward(&a);
        let mut h = x.clone();
        h.add_assign(&ao);
        let (hn, ln2) = self.ln2.forward(&h);
        let (pre_act, fc1) = self.fc1.forward(&hn);
        let (f, fc2) = self.fc2.forward(&gelu(&pre_act));
        h.add_assign(&f);
        let cache = BlockCache {
            ln1,
            q,
            k,
            v,
            qm,
            km,
            vm,
            att,
            o,
            ln2,
            fc1,
            pre_act,
            fc2,
        };
        (h, cache)
    }

    pub fn backward(&mut self, c: &BlockCache<T>, dy: &Mat<T>, seqs: &[(usize, usize)], heads: usize) -> Mat<T> {
        let df = self.fc2.backward(&c.fc2, dy);
        let dpre = gelu_backward(&c.pre_act, &df);
        let dhn = self.fc1.backward(&c.fc1, &dpre);
        let mut dh = self.ln2.backward(&c.ln2, &dhn);
        dh.add_assign(dy);
        let da = self.o.backward(&c.o, &dh);
        let (dq, dk, dv) = attention_backward(&c.qm, &c.km, &c.vm, &c.att, &da, seqs, heads);
        let mut dxn = self.q.backward(&c.q, &dq);
        dxn.add_assign(&self.k.backward(&c.k, &dk));
        dxn.add_assign(&self.v.backward(&c.v, &dv));
        let mut dx = self.ln1.backward(&c.ln1, &dxn);
        dx.add_assign(&dh);
        dx
    }

    pub fn cast<U: Real>(&self) -> Block<U> {
        Block {
            ln1: self.ln1.cast(),
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
            ln2: self.ln2.cast(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }

    pub fn kqv_mut(&mut self) -> [&mut Linear<T>; 3] {
        [&mut self.k, &mut self.q, &mut self.v]
    }

    pub fn kqv(&self) -> [&Linear<T>; 3] {
        [&self.k, &self.q, &self.v]
    }
}

impl<T: Real> Params<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lm<T> {
    pub heads: usize,
    /// `vocab x d`, shared with the output head.
    pub embed: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
}

pub struct LmRun<T> {
    /// `hidden[0]` is the input, `hidden[l]` the output of layer `l`.
    pub hidden: Vec<Mat<T>>,
    caches: Vec<BlockCache<T>>,
}

pub struct HeadCache<T> {
    ln: LayerNormCache<T>,
}

impl<T: Real> Lm<T> {
    pub fn new(vocab: usize, d: usize, layers: usize, heads: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Lm {
            heads,
            embed: Param::new(Mat::randn(vocab, d, 1.0, rng)),
            blocks: (0..layers).map(|_| Block::new(d, d_ff, layers, rng)).collect(),
            ln_f: LayerNorm::new(d),
        }
    }

    pub fn width(&self) -> usize {
        self.embed.value.cols
    }

    pub fn embed_tokens(&self, ids: &[u32]) -> Mat<T> {
        let d = self.width();
        let mut out = Mat::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.embed.value.row(id as usize));
        }
        out
    }

    pub fn forward(&self, x: Mat<T>, seqs: &[(usize, usize)]) -> LmRun<T> {
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        hidden.push(x);
        for b in &self.blocks {
            let (y, c) = b.forward(hidden.last().expect("input"), seqs, self.heads);
            hidden.push(y);
            caches.push(c);
        }
        LmRun { hidden, caches }
    }

    /// Backpropagates `d hidden[L]` to `d hidden[0]`.
    pub fn backward(&mut self, run: &LmRun<T>, d_last: Mat<T>, seqs: &[(usize, usize)]) -> Mat<T> {
        let heads = self.heads;
        let mut d = d_last;
        for (b, c) in self.blocks.iter_mut().zip(&run.caches).rev() {
            d = b.backward(c, &d, seqs, heads);
        }
        d
    }

    /// Vocabulary logits for rows of the last hidden state:
    /// `LN(h) E^T / sqrt(d)`.
    pub fn logits(&self, h: &Mat<T>) -> (Mat<T>, HeadCache<T>) {
        let (hn, ln) = self.ln_f.forward(h);
        let mut logits = Mat::matmul(&hn, false, &self.embed.value, true);
        logits.scale(self.logit_scale());
        (logits, HeadCache { ln })
    }

    pub fn logits_backward(&mut self, cache: &HeadCache<T>, dlogits: &Mat<T>) -> Mat<T> {
        let mut dhn = Mat::matmul(dlogits, false, &self.embed.value, false);
        dhn.scale(self.logit_scale());
        self.ln_f.backward(&cache.ln, &dhn)
    }

    fn logit_scale(&self) -> T {
        T::ONE / T::from_f64(self.width() as f64).sqrt()
    }

    pub fn cast<U: Real>(&self) -> Lm<U> {
        Lm {
            heads: self.heads,
            embed: self.embed.cast(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            ln_f: self.ln_f.cast(),
        }
    }
}

impl<T: Real> Params<T> for Lm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "embed"), &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "embed"), &mut self.embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
    }
}
