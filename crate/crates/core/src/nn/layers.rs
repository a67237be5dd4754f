use rand::Rng;

use super::{gemm, join, Mat, Param, Params, Real};

/// Low-rank additive adapter `delta W = (alpha / r) B A` on a linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora<T> {
    /// `r x in`.
    pub a: Param<T>,
    /// `out x r`.
    pub b: Param<T>,
    pub alpha: f64,
}

impl<T: Real> Lora<T> {
    /// Small-normal `A`, zero `B`.
    pub fn new(d_in: usize, d_out: usize, rank: usize, alpha: f64, a_std: f64, rng: &mut impl Rng) -> Self {
        Lora {
            a: Param::new(Mat::randn(rank, d_in, a_std, rng)),
            b: Param::new(Mat::zeros(d_out, rank)),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.value.rows
    }

    pub fn scale(&self) -> T {
        T::from_f64(self.alpha / self.rank() as f64)
    }

    pub fn cast<U: Real>(&self) -> Lora<U> {
        Lora {
            a: self.a.cast(),
            b: self.b.cast(),
            alpha: self.alpha,
        }
    }
}

/// `y = x W + b` with `W` stored `in x out`, plus an optional adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Param<T>,
    pub b: Option<Param<T>>,
    pub lora: Option<Lora<T>>,
}

pub struct LinearCache<T> {
    x: Mat<T>,
    xa: Option<Mat<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, std: f64, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::new(Mat::randn(d_in, d_out, std, rng)),
            b: bias.then(|| Param::new(Mat::zeros(1, d_out))),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.value.rows
    }

    pub fn d_out(&self) -> usize {
        self.w.value.cols
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LinearCache<T>) {
        let mut y = Mat::matmul(x, false, &self.w.value, false);
        if let Some(b) = &self.b {
            for i in 0..y.rows {
                for (v, bb) in y.row_mut(i).iter_mut().zip(&b.value.data) {
                    *v += *bb;
                }
            }
        }
        let xa = self.lora.as_ref().map(|l| {
            let xa = Mat::matmul(x, false, &l.a.value, true);
            gemm(l.scale(), &xa, false, &l.b.value, true, T::ONE, &mut y);
            xa
        });
        (y, LinearCache { x: x.clone(), xa })
    }

    /// Forward without keeping a cache.
    pub fn apply(&self, x: &Mat<T>) -> Mat<T> {
        self.forward(x).0
    }

    /// Accumulates gradients into trainable parameters and returns `dL/dx`.
    pub fn backward(&mut self, cache: &LinearCache<T>, dy: &Mat<T>) -> Mat<T> {
        let x = &cache.x;
        if self.w.trainable {
            gemm(T::ONE, x, true, dy, false, T::ONE, &mut self.w.grad);
        }
        if let Some(b) = self.b.as_mut().filter(|b| b.trainable) {
            for i in 0..dy.rows {
                for (g, d) in b.grad.data.iter_mut().zip(dy.row(i)) {
                    *g += *d;
                }
            }
        }
        let mut dx = Mat::matmul(dy, false, &self.w.value, true);
        if let (Some(l), Some(xa)) = (self.lora.as_mut(), cache.xa.as_ref()) {
            let s = l.scale();
            if l.b.trainable {
                gemm(s, dy, true, xa, false, T::ONE, &mut l.b.grad);
            }
            let mut dxa = Mat::zeros(dy.rows, l.rank());
            gemm(s, dy, false, &l.b.value, false, T::ZERO, &mut dxa);
            if l.a.trainable {
                gemm(T::ONE, &dxa, true, x, false, T::ONE, &mut l.a.grad);
            }
            gemm(T::ONE, &dxa, false, &l.a.value, false, T::ONE, &mut dx);
        }
        dx
    }

    /// Folds the adapter into `W` and removes it.
    pub fn merge_adapter(&mut self) -> bool {
        match self.lora.take() {
            Some(l) => {
                // W is in x out, so the delta is (s B A)^T = s A^T B^T.
                gemm(l.scale(), &l.a.value, true, &l.b.value, true, T::ONE, &mut self.w.value);
                true
            }
            None => false,
        }
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            w: self.w.cast(),
            b: self.b.as_ref().map(Param::cast),
            lora: self.lora.as_ref().map(Lora::cast),
        }
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "w"), &self.w);
        if let Some(b) = &self.b {
            f(join(prefix, "b"), b);
        }
        if let Some(l) = &self.lora {
            f(join(prefix, "lora_a"), &l.a);
            f(join(prefix, "lora_b"), &l.b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(join(prefix, "b"), b);
        }
        if let Some(l) = &mut self.lora {
            f(join(prefix, "lora_a"), &mut l.a);
            f(join(prefix, "lora_b"), &mut l.b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

pub struct LayerNormCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Mat::from_vec(1, d, vec![T::ONE; d])),
            beta: Param::new(Mat::zeros(1, d)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LayerNormCache<T>) {
        let d = x.cols;
        let n = T::from_f64(d as f64);
        let eps = T::from_f64(self.eps);
        let mut y = Mat::zeros(x.rows, d);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut rstd = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::ONE / (var + eps).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * r;
            }
            let yr = y.row_mut(i);
            for j in 0..d {
                yr[j] = xh[j] * self.gamma.value.data[j] + self.beta.value.data[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &Mat<T>) -> Mat<T> {
        let d = dy.cols;
        let n = T::from_f64(d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        for i in 0..dy.rows {
            let g = dy.row(i);
            let xh = cache.xhat.row(i);
            if self.gamma.trainable {
                for j in 0..d {
                    self.gamma.grad.data[j] += g[j] * xh[j];
                }
            }
            if self.beta.trainable {
                for j in 0..d {
                    self.beta.grad.data[j] += g[j];
                }
            }
            let mut sum = T::ZERO;
            let mut dot = T::ZERO;
            for j in 0..d {
                let dxh = g[j] * self.gamma.value.data[j];
                sum += dxh;
                dot += dxh * xh[j];
            }
            let (mean, mdot) = (sum / n, dot / n);
            let r = cache.rstd[i];
            let out = dx.row_mut(i);
            for j in 0..d {
                let dxh = g[j] * self.gamma.value.data[j];
                out[j] = r * (dxh - mean - xh[j] * mdot);
            }
        }
        dx
    }

    pub fn cast<U: Real>(&self) -> LayerNorm<U> {
        LayerNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            eps: self.eps,
        }
    }
}

impl<T: Real> Params<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: &Mat<T>) -> Mat<T> {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let mut y = x.clone();
    for v in y.data.iter_mut() {
        let u = *v;
        *v = half * u * (T::ONE + (c * (u + k * u * u * u)).tanh());
    }
    y
}

pub fn gelu_backward<T: Real>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let mut dx = dy.clone();
    for (g, &u) in dx.data.iter_mut().zip(&x.data) {
        let t = (c * (u + k * u * u * u)).tanh();
        let dt = (T::ONE - t * t) * c * (T::ONE + three * k * u * u);
        *g *= half * (T::ONE + t) + half * u * dt;
    }
    dx
}
