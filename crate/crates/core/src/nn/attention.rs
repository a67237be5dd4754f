//! Multi-head scaled dot-product attention over packed ragged sequences.
//!
//! Rows of `q`, `k`, `v` hold the tokens of several sequences back to back;
//! `seqs` lists `(start, len)` for each. Tokens only attend within their own
//! sequence.

use super::{softmax_in_place, Mat, Real};

pub struct AttentionCache<T> {
    /// Attention weights per `(sequence, head)`, row-major `len x len`.
    probs: Vec<Vec<T>>,
}

fn check<T: Real>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, heads: usize) -> usize {
    assert_eq!(q.shape(), k.shape());
    assert_eq!(q.shape(), v.shape());
    assert!(heads > 0 && q.cols.is_multiple_of(heads), "width not divisible by heads");
    q.cols / heads
}

pub fn attention_forward<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    seqs: &[(usize, usize)],
    heads: usize,
    causal: bool,
) -> (Mat<T>, AttentionCache<T>) {
    let dh = check(q, k, v, heads);
    let scale = T::ONE / T::from_f64(dh as f64).sqrt();
    let mut out = Mat::zeros(q.rows, q.cols);
    let mut probs = Vec::with_capacity(seqs.len() * heads);
    for &(start, len) in seqs {
        for h in 0..heads {
            let c0 = h * dh;
            let mut p = vec![T::ZERO; len * len];
            for i in 0..len {
                let qi = &q.row(start + i)[c0..c0 + dh];
                let visible = if causal { i + 1 } else { len };
                let row = &mut p[i * len..i * len + visible];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(start + j)[c0..c0 + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<T>() * scale;
                }
                softmax_in_place(row);
                let o = &mut out.row_mut(start + i)[c0..c0 + dh];
                for (j, &w) in row.iter().enumerate() {
                    let vj = &v.row(start + j)[c0..c0 + dh];
                    for (a, b) in o.iter_mut().zip(vj) {
                        *a += w * *b;
                    }
                }
            }
            probs.push(p);
        }
    }
    (out, AttentionCache { probs })
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    cache: &AttentionCache<T>,
    dout: &Mat<T>,
    seqs: &[(usize, usize)],
    heads: usize,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let dh = check(q, k, v, heads);
    let scale = T::ONE / T::from_f64(dh as f64).sqrt();
    let mut dq = Mat::zeros(q.rows, q.cols);
    let mut dk = Mat::zeros(q.rows, q.cols);
    let mut dv = Mat::zeros(q.rows, q.cols);
    let mut ds = Vec::new();
    for (s, &(start, len)) in seqs.iter().enumerate() {
        for h in 0..heads {
            let p = &cache.probs[s * heads + h];
            let c0 = h * dh;
            ds.clear();
            ds.resize(len * len, T::ZERO);
            for i in 0..len {
                let doi = &dout.row(start + i)[c0..c0 + dh];
                let mut dot = T::ZERO;
                for j in 0..len {
                    let w = p[i * len + j];
                    if w == T::ZERO {
                        continue;
                    }
                    let vj = &v.row(start + j)[c0..c0 + dh];
                    let dp = doi.iter().zip(vj).map(|(a, b)| *a * *b).sum::<T>();
                    ds[i * len + j] = dp;
                    dot += dp * w;
                    let dvj = &mut dv.row_mut(start + j)[c0..c0 + dh];
                    for (a, b) in dvj.iter_mut().zip(doi) {
                        *a += w * *b;
                    }
                }
                for j in 0..len {
                    let w = p[i * len + j];
                    ds[i * len + j] = w * (ds[i * len + j] - dot) * scale;
                }
            }
            for i in 0..len {
                for j in 0..len {
                    let g = ds[i * len + j];
                    if g == T::ZERO {
                        continue;
                    }
                    for c in c0..c0 + dh {
                        dq.data[(start + i) * q.cols + c] += g * k.data[(start + j) * q.cols + c];
                        dk.data[(start + j) * q.cols + c] += g * q.data[(start + i) * q.cols + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn loss(out: &Mat<f64>, probe: &Mat<f64>) -> f64 {
        out.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seqs = [(0, 3), (3, 4)];
        for causal in [true, false] {
            let q: Mat<f64> = Mat::randn(7, 4, 1.0, &mut rng);
            let k: Mat<f64> = Mat::randn(7, 4, 1.0, &mut rng);
            let v: Mat<f64> = Mat::randn(7, 4, 1.0, &mut rng);
            let probe: Mat<f64> = Mat::randn(7, 4, 1.0, &mut rng);
            let (_, cache) = attention_forward(&q, &k, &v, &seqs, 2, causal);
            let (dq, dk, dv) = attention_backward(&q, &k, &v, &cache, &probe, &seqs, 2);
            let h = 1e-6;
            for which in 0..3 {
                for idx in 0..28 {
                    let mut t = [q.clone(), k.clone(), v.clone()];
                    t[which].data[idx] += h;
                    let up = loss(&attention_forward(&t[0], &t[1], &t[2], &seqs, 2, causal).0, &probe);
                    t[which].data[idx] -= 2.0 * h;
                    let dn = loss(&attention_forward(&t[0], &t[1], &t[2], &seqs, 2, causal).0, &probe);
                    let fd = (up - dn) / (2.0 * h);
                    let an = [&dq, &dk, &dv][which].data[idx];
                    assert!((fd - an).abs() < 1e-6, "{which} {idx}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn causal_rows_ignore_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q: Mat<f64> = Mat::randn(5, 4, 1.0, &mut rng);
        let k: Mat<f64> = Mat::randn(5, 4, 1.0, &mut rng);
        let v: Mat<f64> = Mat::randn(5, 4, 1.0, &mut rng);
        let (a, _) = attention_forward(&q, &k, &v, &[(0, 5)], 2, true);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for c in 0..4 {
            k2.data[4 * 4 + c] += 3.0;
            v2.data[4 * 4 + c] -= 2.0;
        }
        let (b, _) = attention_forward(&q, &k2, &v2, &[(0, 5)], 2, true);
        assert_eq!(a.data[..16], b.data[..16]);
        assert_ne!(a.data[16..], b.data[16..]);
    }

    #[test]
    fn sequences_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q: Mat<f64> = Mat::randn(6, 4, 1.0, &mut rng);
        let k: Mat<f64> = Mat::randn(6, 4, 1.0, &mut rng);
        let v: Mat<f64> = Mat::randn(6, 4, 1.0, &mut rng);
        let (packed, _) = attention_forward(&q, &k, &v, &[(0, 2), (2, 4)], 1, false);
        let (alone, _) = attention_forward(
            &q.rows_range(2, 6),
            &k.rows_range(2, 6),
            &v.rows_range(2, 6),
            &[(0, 4)],
            1,
            false,
        );
        assert_eq!(packed.data[8..], alone.data[..]);
    }
}
