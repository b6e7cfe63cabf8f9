//! Class-wise affine transform `x' = w ⊙ x + b`.

use learnlock_tensor::Tensor;
use rand::Rng;

use crate::error::{Error, Result};

/// Per-slot scale and shift, each `[slots, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearKey {
    pub epsilon: f32,
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearKey {
    pub fn identity(epsilon: f32, slots: usize, d: usize) -> Self {
        Self {
            epsilon,
            w: Tensor::ones(&[slots, d]),
            b: Tensor::zeros(&[slots, d]),
        }
    }

    /// Uniform draw inside the admissible box.
    pub fn random(epsilon: f32, slots: usize, d: usize, rng: &mut impl Rng) -> Self {
        let h = epsilon / 2.0;
        let w = (0..slots * d).map(|_| rng.gen_range(1.0 - h..=1.0 + h)).collect();
        let b = (0..slots * d).map(|_| rng.gen_range(-h..=h)).collect();
        Self {
            epsilon,
            w: Tensor::new(vec![slots, d], w).expect("shape"),
            b: Tensor::new(vec![slots, d], b).expect("shape"),
        }
    }

    pub fn slots(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w.row_len()
    }

    pub fn w_bounds(&self) -> (f32, f32) {
        (1.0 - self.epsilon / 2.0, 1.0 + self.epsilon / 2.0)
    }

    pub fn b_bounds(&self) -> (f32, f32) {
        (-self.epsilon / 2.0, self.epsilon / 2.0)
    }

    /// Projects `w` and `b` back into their boxes.
    pub fn clip(&mut self) {
        let (wl, wh) = self.w_bounds();
        let (bl, bh) = self.b_bounds();
        self.w.data_mut().iter_mut().for_each(|v| *v = v.clamp(wl, wh));
        self.b.data_mut().iter_mut().for_each(|v| *v = v.clamp(bl, bh));
    }

    pub fn satisfies_invariants(&self) -> bool {
        let (wl, wh) = self.w_bounds();
        let (bl, bh) = self.b_bounds();
        self.w.data().iter().all(|v| (wl..=wh).contains(v)) && self.b.data().iter().all(|v| (bl..=bh).contains(v))
    }

    /// `w ⊙ x + b` without clipping.
    pub fn lock_preclip(&self, slot: usize, x: &[f32], out: &mut [f32]) {
        let (w, b) = (self.w.row(slot), self.b.row(slot));
        for (((o, &xv), &wv), &bv) in out.iter_mut().zip(x).zip(w).zip(b) {
            *o = wv * xv + bv;
        }
    }

    pub fn lock(&self, slot: usize, x: &[f32], out: &mut [f32]) {
        self.lock_preclip(slot, x, out);
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// `(x' - b) / w`; a non-positive scale means the key is corrupt.
    pub fn unlock(&self, slot: usize, x: &[f32], out: &mut [f32]) -> Result<()> {
        let (w, b) = (self.w.row(slot), self.b.row(slot));
        if let Some(bad) = w.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::CorruptKey(format!("scale entry {bad} in slot {slot} is not positive")));
        }
        for (((o, &xv), &wv), &bv) in out.iter_mut().zip(x).zip(w).zip(b) {
            *o = (xv - bv) / wv;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(w: f32, b: f32, eps: f32) -> LinearKey {
        LinearKey {
            epsilon: eps,
            w: Tensor::full(&[1, 1], w),
            b: Tensor::full(&[1, 1], b),
        }
    }

    #[test]
    fn identity_leaves_input() {
        let k = LinearKey::identity(0.03, 2, 4);
        let x = [0.1, 0.5, 0.0, 1.0];
        let mut out = [0.0; 4];
        k.lock(1, &x, &mut out);
        assert_eq!(out, x);
        k.unlock(1, &x, &mut out).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn worked_example() {
        let k = key(1.02, 0.01, 0.0627);
        let mut out = [0.0];
        k.lock(0, &[0.5], &mut out);
        assert!((out[0] - 0.52).abs() < 1e-6);
        assert!((out[0] - 0.5).abs() <= 0.0627);
        let mut back = [0.0];
        k.unlock(0, &[0.52], &mut back).unwrap();
        assert!((back[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_positive_scale_is_corrupt() {
        let k = key(0.0, 0.0, 0.03);
        assert!(matches!(k.unlock(0, &[0.5], &mut [0.0]), Err(Error::CorruptKey(_))));
    }

    #[test]
    fn clip_restores_invariants() {
        let mut k = key(2.0, -1.0, 0.1);
        assert!(!k.satisfies_invariants());
        k.clip();
        assert!(k.satisfies_invariants());
        assert_eq!(k.w.data(), &[1.05]);
        assert_eq!(k.b.data(), &[-0.05]);
    }
}
