//! Frame sampling and trajectory tiling.

use crate::error::{Error, Result};
use crate::worldgen::{Episode, Frame};

/// Uniformly spaced timestep indices over `[0, len - 1]`, endpoints included:
/// `round(k * (len - 1) / (count - 1))`.
pub fn sample_indices(len: usize, count: usize) -> Result<Vec<usize>> {
    if count < 2 {
        return Err(Error::Config(format!("need at least 2 sampled frames, got {count}")));
    }
    if count > len {
        return Err(Error::OutOfRange {
            index: count,
            len,
        });
    }
    let span = (len - 1) as f64;
    let gaps = (count - 1) as f64;
    Ok((0..count)
        .map(|k| (k as f64 * span / gaps).round() as usize)
        .collect())
}

/// Picks `count` frames per viewpoint from an episode.
pub fn sample_frames(episode: &Episode, count: usize) -> Result<Vec<Vec<Frame>>> {
    sample_grid(&episode.frames, count)
}

pub(crate) fn sample_grid(frames: &[Vec<Frame>], count: usize) -> Result<Vec<Vec<Frame>>> {
    let len = frames.first().map_or(0, Vec::len);
    let idx = sample_indices(len, count)?;
    Ok(frames
        .iter()
        .map(|row| idx.iter().map(|&i| row[i].clone()).collect())
        .collect())
}

/// Packs `frames[n][t]` (each `3 x H x W`) into one `3 x (H*N) x (W*T)` image:
/// pixel `(c, i, j)` of frame `(n, t)` lands at `(c, n*H + i, t*W + j)`.
pub fn tile(frames: &[Vec<Frame>]) -> Result<Frame> {
    let n = frames.len();
    let t = frames.first().map_or(0, Vec::len);
    if n == 0 || t == 0 {
        return Err(Error::Ragged("empty frame grid".into()));
    }
    let (h, w) = (frames[0][0].height, frames[0][0].width);
    for (p, row) in frames.iter().enumerate() {
        if row.len() != t {
            return Err(Error::Ragged(format!(
                "viewpoint {p} has {} frames, expected {t}",
                row.len()
            )));
        }
        for (k, f) in row.iter().enumerate() {
            if f.height != h || f.width != w {
                return Err(Error::Ragged(format!(
                    "frame ({p}, {k}) is {}x{}, expected {h}x{w}",
                    f.height, f.width
                )));
            }
        }
    }
    let (th, tw) = (h * n, w * t);
    let mut out = Frame::zeros(th, tw);
    for c in 0..3 {
        for (p, row) in frames.iter().enumerate() {
            for (k, f) in row.iter().enumerate() {
                for i in 0..h {
                    let src = (c * h + i) * w;
                    let dst = (c * th + p * h + i) * tw + k * w;
                    out.data[dst..dst + w].copy_from_slice(&f.data[src..src + w]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`tile`].
pub fn untile(image: &Frame, n: usize, t: usize) -> Result<Vec<Vec<Frame>>> {
    if n == 0 || t == 0 || !image.height.is_multiple_of(n) || !image.width.is_multiple_of(t) {
        return Err(Error::Shape(format!(
            "{}x{} image cannot be split into {n}x{t} tiles",
            image.height, image.width
        )));
    }
    let (h, w) = (image.height / n, image.width / t);
    let mut grid = vec![vec![Frame::zeros(h, w); t]; n];
    for c in 0..3 {
        for (p, row) in grid.iter_mut().enumerate() {
            for (k, f) in row.iter_mut().enumerate() {
                for i in 0..h {
                    let dst = (c * h + i) * w;
                    let src = (c * image.height + p * h + i) * image.width + k * w;
                    f.data[dst..dst + w].copy_from_slice(&image.data[src..src + w]);
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_grid(rng: &mut ChaCha8Rng, n: usize, t: usize, h: usize, w: usize) -> Vec<Vec<Frame>> {
        (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| Frame {
                        height: h,
                        width: w,
                        data: (0..3 * h * w).map(|_| rng.random()).collect(),
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn indices_examples() {
        assert_eq!(sample_indices(4, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(sample_indices(10, 4).unwrap(), vec![0, 3, 6, 9]);
        assert_eq!(sample_indices(2, 2).unwrap(), vec![0, 1]);
        assert!(sample_indices(3, 4).is_err());
    }

    #[test]
    fn single_frame_tiles_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_grid(&mut rng, 1, 1, 16, 20);
        assert_eq!(tile(&g).unwrap(), g[0][0]);
    }

    #[test]
    fn tile_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 2, 4, 32, 32);
        let img = tile(&g).unwrap();
        assert_eq!((img.height, img.width), (64, 128));
    }

    #[test]
    fn ragged_grid_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = random_grid(&mut rng, 2, 3, 16, 16);
        g[1][2] = Frame::zeros(16, 17);
        assert!(matches!(tile(&g), Err(Error::Ragged(_))));
        let mut g = random_grid(&mut rng, 2, 3, 16, 16);
        g[0].pop();
        assert!(matches!(tile(&g), Err(Error::Ragged(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn untile_inverts_tile(n in 1usize..4, t in 1usize..5, h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(&mut rng, n, t, h, w);
            let img = tile(&g).unwrap();
            prop_assert_eq!(untile(&img, n, t).unwrap(), g);
        }

        #[test]
        fn indices_hit_endpoints(len in 2usize..200, frac in 0.0f64..1.0) {
            let count = 2 + ((len - 2) as f64 * frac) as usize;
            let idx = sample_indices(len, count).unwrap();
            prop_assert_eq!(idx.len(), count);
            prop_assert_eq!(idx[0], 0);
            prop_assert_eq!(*idx.last().unwrap(), len - 1);
            prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
        }
    }
}
