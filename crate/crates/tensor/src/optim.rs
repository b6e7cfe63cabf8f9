use std::f32::consts::PI;

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr0 * (1 + cos(pi * t / T)) / 2`, held at zero past `T`.
    Cosine { total_steps: usize },
}

/// SGD with heavy-ball momentum: `v <- mu * v + g; p <- p - lr(t) * v`.
/// With a clip norm set, `g` is first rescaled so its global L2 norm is at most
/// that value.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr0: f32,
    momentum: f32,
    clip_norm: Option<f32>,
    schedule: LrSchedule,
    step: usize,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, schedule: LrSchedule) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid("sgd", format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid("sgd", format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            lr0: lr,
            momentum,
            clip_norm: None,
            schedule,
            step: 0,
            velocity: Vec::new(),
        })
    }

    pub fn with_clip_norm(mut self, clip: Option<f32>) -> Result<Self> {
        if let Some(c) = clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("sgd", format!("clip norm {c} must be positive")));
            }
        }
        self.clip_norm = clip;
        Ok(self)
    }

    pub fn lr_at(&self, t: usize) -> f32 {
        match self.schedule {
            LrSchedule::Constant => self.lr0,
            LrSchedule::Cosine { total_steps } => {
                let total = total_steps.max(1);
                let frac = t.min(total) as f32 / total as f32;
                self.lr0 * (1.0 + (PI * frac).cos()) / 2.0
            }
        }
    }

    pub fn current_lr(&self) -> f32 {
        self.lr_at(self.step)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&[f32]>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(mismatch("sgd_step", &[params.len()], &[grads.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or(TensorError::MissingGrad(i))?;
            if g.len() != p.numel() {
                return Err(mismatch("sgd_step", p.shape(), &[g.len()]));
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        let lr = self.current_lr();
        let scale = match self.clip_norm {
            Some(c) => {
                let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|&v| (v as f64) * (v as f64)).sum();
                let norm = sq.sqrt() as f32;
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g.expect("checked above");
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + scale * gv;
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
        Ok(())
    }
}
