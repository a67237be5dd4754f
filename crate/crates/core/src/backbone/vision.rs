//! Frozen stand-in vision encoder: patch projection, fixed sinusoidal
//! positions and one pre-norm self-attention layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{attention_forward, join, sinusoidal_positions, LayerNorm, Linear, Mat, Param, Params, Real};
use crate::worldgen::Frame;

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder<T> {
    pub patch: usize,
    pub heads: usize,
    pub embed: Linear<T>,
    pub ln: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

impl<T: Real> VisionEncoder<T> {
    pub fn new(patch: usize, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let fan = 3 * patch * patch;
        let std = 1.0 / (width as f64).sqrt();
        let mut enc = VisionEncoder {
            patch,
            heads,
            embed: Linear::new(fan, width, 1.0 / (fan as f64).sqrt(), true, rng),
            ln: LayerNorm::new(width),
            q: Linear::new(width, width, std, false, rng),
            k: Linear::new(width, width, std, false, rng),
            v: Linear::new(width, width, std, false, rng),
            o: Linear::new(width, width, std, false, rng),
        };
        enc.set_trainable(false);
        enc
    }

    pub fn width(&self) -> usize {
        self.embed.d_out()
    }

    /// Number of patch embeddings for an `h x w` image.
    pub fn patch_count(&self, h: usize, w: usize) -> Result<usize> {
        if h == 0 || w == 0 || !h.is_multiple_of(self.patch) || !w.is_multiple_of(self.patch) {
            return Err(Error::Shape(format!(
                "{h}x{w} image is not divisible into {p}x{p} patches",
                p = self.patch
            )));
        }
        Ok((h / self.patch) * (w / self.patch))
    }

    /// Flattened patches in row-major grid order, pixels scaled to [-1, 1].
    fn patches(&self, image: &Frame) -> Result<Mat<T>> {
        let n = self.patch_count(image.height, image.width)?;
        let p = self.patch;
        let cols = image.width / p;
        let mut out = Mat::zeros(n, 3 * p * p);
        let scale = 2.0 / 255.0;
        for idx in 0..n {
            let (pi, pj) = (idx / cols, idx % cols);
            let row = out.row_mut(idx);
            let mut k = 0;
            for c in 0..3 {
                for i in 0..p {
                    for j in 0..p {
                        let v = image.get(c, pi * p + i, pj * p + j) as f64;
                        row[k] = T::from_f64(v * scale - 1.0);
                        k += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch embeddings `[P][width]`.
    pub fn encode(&self, image: &Frame) -> Result<Mat<T>> {
        let patches = self.patches(image)?;
        let mut x = self.embed.apply(&patches);
        x.add_assign(&sinusoidal_positions(x.rows, x.cols));
        let (xn, _) = self.ln.forward(&x);
        let seqs = [(0, x.rows)];
        let (att, _) = attention_forward(
            &self.q.apply(&xn),
            &self.k.apply(&xn),
            &self.v.apply(&xn),
            &seqs,
            self.heads,
            false,
        );
        x.add_assign(&self.o.apply(&att));
        Ok(x)
    }

    pub fn cast<U: Real>(&self) -> VisionEncoder<U> {
        VisionEncoder {
            patch: self.patch,
            heads: self.heads,
            embed: self.embed.cast(),
            ln: self.ln.cast(),
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
        }
    }
}

impl<T: Real> Params<T> for VisionEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.ln.visit(&join(prefix, "ln"), f);
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.ln.visit_mut(&join(prefix, "ln"), f);
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}
