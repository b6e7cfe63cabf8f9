//! Training-time data augmentation and filtering policies.

use learnlock_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this concentration a Beta(a, a) draw is treated as its limit, a
/// fair coin on `{0, 1}`.
const DEGENERATE_ALPHA: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentPolicy {
    None,
    /// Fresh uniform noise in `[-budget, budget]` per pixel and batch.
    RandomNoise { budget: f32 },
    GaussianBlur { kernel: usize, sigma: f32 },
    /// Random horizontal flip, padded random crop and small rotation.
    Standard { pad: usize, max_degrees: f32 },
    /// Zeroes one square patch whose side is `fraction` of the image side.
    Cutout { fraction: f32 },
    Mixup { alpha: f32 },
    Cutmix { alpha: f32 },
}

impl AugmentPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentPolicy::None => "none",
            AugmentPolicy::RandomNoise { .. } => "random_noise",
            AugmentPolicy::GaussianBlur { .. } => "gaussian_blur",
            AugmentPolicy::Standard { .. } => "standard",
            AugmentPolicy::Cutout { .. } => "cutout",
            AugmentPolicy::Mixup { .. } => "mixup",
            AugmentPolicy::Cutmix { .. } => "cutmix",
        }
    }

    /// The seven defense rows with their default parameters.
    pub fn defense_suite(epsilon: f32) -> Vec<AugmentPolicy> {
        vec![
            AugmentPolicy::None,
            AugmentPolicy::RandomNoise { budget: epsilon },
            AugmentPolicy::GaussianBlur { kernel: 3, sigma: 1.0 },
            AugmentPolicy::Standard {
                pad: 4,
                max_degrees: 15.0,
            },
            AugmentPolicy::Cutout { fraction: 0.25 },
            AugmentPolicy::Mixup { alpha: 1.0 },
            AugmentPolicy::Cutmix { alpha: 1.0 },
        ]
    }

    /// Checks parameters; `epsilon` caps the noise budget when given.
    pub fn validate(&self, epsilon: Option<f32>) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name())));
        match *self {
            AugmentPolicy::None => Ok(()),
            AugmentPolicy::RandomNoise { budget } => {
                if !(budget >= 0.0 && budget < 1.0) {
                    return bad(format!("budget {budget} outside [0, 1)"));
                }
                match epsilon {
                    Some(e) if budget > e => bad(format!("budget {budget} exceeds the experiment epsilon {e}")),
                    _ => Ok(()),
                }
            }
            AugmentPolicy::GaussianBlur { kernel, sigma } => {
                if kernel == 0 || kernel % 2 == 0 {
                    return bad(format!("kernel must be odd and positive, got {kernel}"));
                }
                if !(sigma > 0.0) {
                    return bad(format!("sigma must be positive, got {sigma}"));
                }
                Ok(())
            }
            AugmentPolicy::Standard { max_degrees, .. } => {
                if !(0.0..=180.0).contains(&max_degrees) {
                    return bad(format!("rotation {max_degrees} outside [0, 180]"));
                }
                Ok(())
            }
            AugmentPolicy::Cutout { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return bad(format!("fraction {fraction} outside (0, 1]"));
                }
                Ok(())
            }
            AugmentPolicy::Mixup { alpha } | AugmentPolicy::Cutmix { alpha } => {
                if !(alpha >= 0.0 && alpha.is_finite()) {
                    return bad(format!("alpha must be non-negative, got {alpha}"));
                }
                Ok(())
            }
        }
    }

    /// Transforms a batch `[N, C, H, W]` with hard labels over `k` classes.
    pub fn apply(&self, images: Tensor, labels: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(Error::Config(format!("augment expects N x C x H x W with N labels, got {shape:?}")));
        }
        let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        let mut x = images;
        let hard = |x| Batch {
            images: x,
            targets: Targets::Hard(labels.to_vec()),
        };
        Ok(match *self {
            AugmentPolicy::None => hard(x),
            AugmentPolicy::RandomNoise { budget } => {
                if budget > 0.0 {
                    for v in x.data_mut() {
                        *v = (*v + rng.gen_range(-budget..=budget)).clamp(0.0, 1.0);
                    }
                }
                hard(x)
            }
            AugmentPolicy::GaussianBlur { kernel, sigma } => {
                let taps = gaussian_taps(kernel, sigma);
                for plane in x.data_mut().chunks_mut(h * w) {
                    blur_plane(plane, h, w, &taps);
                }
                hard(x)
            }
            AugmentPolicy::Standard { pad, max_degrees } => {
                let d = c * h * w;
                for img in x.data_mut().chunks_mut(d) {
                    let flip = rng.gen_bool(0.5);
                    let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
                    let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
                    let theta = if max_degrees > 0.0 {
                        rng.gen_range(-max_degrees..=max_degrees).to_radians()
                    } else {
                        0.0
                    };
                    let src = img.to_vec();
                    for (plane_out, plane_in) in img.chunks_mut(h * w).zip(src.chunks(h * w)) {
                        warp_plane(plane_in, plane_out, h, w, flip, dy, dx, theta);
                    }
                }
                hard(x)
            }
            AugmentPolicy::Cutout { fraction } => {
                let side = ((fraction * h.min(w) as f32).round() as usize).max(1);
                for img in x.data_mut().chunks_mut(c * h * w) {
                    let cy = rng.gen_range(0..h) as isize;
                    let cx = rng.gen_range(0..w) as isize;
                    let (y0, x0) = (cy - side as isize / 2, cx - side as isize / 2);
                    for plane in img.chunks_mut(h * w) {
                        for yy in y0.max(0)..(y0 + side as isize).min(h as isize) {
                            for xx in x0.max(0)..(x0 + side as isize).min(w as isize) {
                                plane[yy as usize * w + xx as usize] = 0.0;
                            }
                        }
                    }
                }
                hard(x)
            }
            AugmentPolicy::Mixup { alpha } => {
                let lam = sample_lambda(alpha, rng);
                let perm = permutation(n, rng);
                let src = x.clone();
                let d = c * h * w;
                for (i, img) in x.data_mut().chunks_mut(d).enumerate() {
                    for (v, &o) in img.iter_mut().zip(src.row(perm[i])) {
                        *v = lam * *v + (1.0 - lam) * o;
                    }
                }
                Batch {
                    images: x,
                    targets: Targets::Soft(mixed_targets(labels, &perm, lam, k)),
                }
            }
            AugmentPolicy::Cutmix { alpha } => {
                let lam = sample_lambda(alpha, rng);
                let perm = permutation(n, rng);
                let cut = (1.0 - lam).sqrt();
                let (bh, bw) = ((cut * h as f32) as usize, (cut * w as f32) as usize);
                let cy = rng.gen_range(0..h) as isize;
                let cx = rng.gen_range(0..w) as isize;
                let y0 = (cy - bh as isize / 2).clamp(0, h as isize) as usize;
                let y1 = (cy + bh as isize / 2).clamp(0, h as isize) as usize;
                let x0 = (cx - bw as isize / 2).clamp(0, w as isize) as usize;
                let x1 = (cx + bw as isize / 2).clamp(0, w as isize) as usize;
                let src = x.clone();
                let d = c * h * w;
                for (i, img) in x.data_mut().chunks_mut(d).enumerate() {
                    let other = src.row(perm[i]);
                    for ch in 0..c {
                        for yy in y0..y1 {
                            let off = ch * h * w + yy * w;
                            img[off + x0..off + x1].copy_from_slice(&other[off + x0..off + x1]);
                        }
                    }
                }
                let kept = 1.0 - ((y1 - y0) * (x1 - x0)) as f32 / (h * w) as f32;
                Batch {
                    images: x,
                    targets: Targets::Soft(mixed_targets(labels, &perm, kept, k)),
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Hard(Vec<usize>),
    /// Row-major `[N, K]` distributions.
    Soft(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Targets,
}

fn sample_lambda(alpha: f32, rng: &mut ChaCha8Rng) -> f32 {
    if alpha < DEGENERATE_ALPHA {
        return if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    }
    Beta::new(alpha, alpha).expect("alpha checked positive").sample(rng)
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

fn mixed_targets(labels: &[usize], perm: &[usize], lam: f32, k: usize) -> Vec<f32> {
    let mut t = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        t[i * k + y] += lam;
        t[i * k + labels[perm[i]]] += 1.0 - lam;
    }
    t
}

fn gaussian_taps(kernel: usize, sigma: f32) -> Vec<f32> {
    let r = (kernel / 2) as isize;
    let raw: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable blur with edge replication.
fn blur_plane(plane: &mut [f32], h: usize, w: usize, taps: &[f32]) {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, &k)| k * plane[y * w + (x as isize + t as isize - r).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, &k)| k * tmp[(y as isize + t as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
}

/// Flip, shift and rotate about the centre with bilinear sampling; samples
/// falling outside the source read as zero.
#[allow(clippy::too_many_arguments)]
fn warp_plane(src: &[f32], out: &mut [f32], h: usize, w: usize, flip: bool, dy: isize, dx: isize, theta: f32) {
    let (s, c) = theta.sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let at = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (ry, rx) = (y as f32 - cy, x as f32 - cx);
            let mut sy = c * ry - s * rx + cy + dy as f32;
            let mut sx = s * ry + c * rx + cx + dx as f32;
            if flip {
                sx = w as f32 - 1.0 - sx;
            }
            sy = sy.clamp(-2.0, h as f32 + 1.0);
            sx = sx.clamp(-2.0, w as f32 + 1.0);
            let (y0, x0) = (sy.floor() as isize, sx.floor() as isize);
            let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
            out[y * w + x] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn batch(n: usize) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..n * 3 * 8 * 8).map(|_| rng.gen()).collect();
        (Tensor::new(vec![n, 3, 8, 8], data).unwrap(), (0..n).map(|i| i % 3).collect())
    }

    #[test]
    fn none_is_identity() {
        let (x, y) = batch(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = AugmentPolicy::None.apply(x.clone(), &y, 3, &mut rng).unwrap();
        assert_eq!(b.images, x);
        assert_eq!(b.targets, Targets::Hard(y));
    }

    #[test]
    fn noise_respects_budget() {
        let (x, y) = batch(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = AugmentPolicy::RandomNoise { budget: 0.03 }.apply(x.clone(), &y, 3, &mut rng).unwrap();
        assert!(b.images.max_abs_diff(&x) <= 0.03 + 1e-7);
        assert!(AugmentPolicy::RandomNoise { budget: 0.05 }.validate(Some(0.03)).is_err());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let x = Tensor::full(&[2, 1, 8, 8], 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = AugmentPolicy::GaussianBlur { kernel: 3, sigma: 1.0 }.apply(x.clone(), &[0, 1], 2, &mut rng).unwrap();
        assert!(b.images.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn standard_without_motion_is_identity_or_flip() {
        let (x, y) = batch(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AugmentPolicy::Standard { pad: 0, max_degrees: 0.0 };
        let b = p.apply(x.clone(), &y, 3, &mut rng).unwrap();
        for i in 0..2 {
            let a = b.images.row(i);
            let o = x.row(i);
            let same = a.iter().zip(o).all(|(p, q)| (p - q).abs() < 1e-6);
            let flipped = (0..3 * 8).all(|r| (0..8).all(|c| (a[r * 8 + c] - o[r * 8 + 7 - c]).abs() < 1e-6));
            assert!(same || flipped);
        }
    }

    #[test]
    fn cutout_zeroes_a_patch() {
        let x = Tensor::full(&[1, 1, 8, 8], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = AugmentPolicy::Cutout { fraction: 0.25 }.apply(x, &[0], 2, &mut rng).unwrap();
        let zeros = b.images.data().iter().filter(|&&v| v == 0.0).count();
        assert!((1..=4).contains(&zeros));
    }

    #[test]
    fn mixup_targets_are_distributions() {
        let (x, y) = batch(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [AugmentPolicy::Mixup { alpha: 1.0 }, AugmentPolicy::Cutmix { alpha: 1.0 }] {
            let b = p.apply(x.clone(), &y, 3, &mut rng).unwrap();
            let Targets::Soft(t) = b.targets else { panic!("expected soft targets") };
            for row in t.chunks(3) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn mixup_with_vanishing_alpha_picks_whole_images() {
        let (x, y) = batch(6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let b = AugmentPolicy::Mixup { alpha: 0.0 }.apply(x.clone(), &y, 3, &mut rng).unwrap();
            let Targets::Soft(t) = b.targets else { panic!() };
            assert!(t.iter().all(|&v| v == 0.0 || v == 1.0));
            for i in 0..6 {
                let row = b.images.row(i);
                assert!((0..6).any(|j| x.row(j) == row));
            }
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(AugmentPolicy::GaussianBlur { kernel: 2, sigma: 1.0 }.validate(None).is_err());
        assert!(AugmentPolicy::Cutout { fraction: 0.0 }.validate(None).is_err());
        assert!(AugmentPolicy::Mixup { alpha: -1.0 }.validate(None).is_err());
        for p in AugmentPolicy::defense_suite(0.03) {
            p.validate(Some(0.03)).unwrap();
        }
    }
}
