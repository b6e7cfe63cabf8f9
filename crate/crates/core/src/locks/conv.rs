//! Class-wise residual transform `x' = x + ε·tanh(h(x))` with spectrally
//! normalized convolutions in `h`.

use learnlock_tensor::{kernels, ConvGeometry, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Rows per graph when applying a transform to many images.
const APPLY_CHUNK: usize = 250;

const BASE_CHANNELS: [usize; 4] = [8, 16, 16, 8];
const KERNELS: [usize; 5] = [3, 3, 1, 3, 3];
const PADDINGS: [usize; 5] = [1, 1, 0, 1, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

impl ConvLayer {
    fn geometry(&self, hw: [usize; 2]) -> Result<ConvGeometry> {
        let s = self.weight.shape();
        Ok(ConvGeometry::new([s[1], hw[0], hw[1]], [s[0], s[1], s[2], s[3]], 1, self.padding)?)
    }
}

/// One `h`: conv → ReLU repeated, every layer keeping the spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub layers: Vec<ConvLayer>,
}

/// `(in, out, kernel, padding)` per layer for images with `in_c` channels.
pub fn h_layout(in_c: usize, width: f32) -> Vec<(usize, usize, usize, usize)> {
    let mut chans = vec![in_c];
    chans.extend(BASE_CHANNELS.iter().map(|&c| ((c as f32 * width).round() as usize).max(1)));
    chans.push(in_c);
    (0..5).map(|i| (chans[i], chans[i + 1], KERNELS[i], PADDINGS[i])).collect()
}

impl ConvNet {
    /// He-uniform weights times `scale`, zero biases.
    pub fn random(layout: &[(usize, usize, usize, usize)], scale: f32, rng: &mut impl Rng) -> Self {
        let layers = layout
            .iter()
            .map(|&(i, o, k, p)| {
                let bound = scale * (6.0 / (i * k * k) as f32).sqrt();
                let n = o * i * k * k;
                let w = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
                ConvLayer {
                    weight: Tensor::new(vec![o, i, k, k], w).expect("shape"),
                    bias: Tensor::zeros(&[o]),
                    padding: p,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(layout: &[(usize, usize, usize, usize)]) -> Self {
        let layers = layout
            .iter()
            .map(|&(i, o, k, p)| ConvLayer {
                weight: Tensor::zeros(&[o, i, k, k]),
                bias: Tensor::zeros(&[o]),
                padding: p,
            })
            .collect();
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// Binds `(weight, bias)` leaves; `trainable` controls gradient flow.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<(Var, Var, usize)> {
        self.layers
            .iter()
            .map(|l| {
                (
                    g.leaf(l.weight.clone(), trainable),
                    g.leaf(l.bias.clone(), trainable),
                    l.padding,
                )
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let first = self.layers.first().ok_or_else(|| Error::CorruptKey("empty residual network".into()))?;
        let last = self.layers.last().expect("nonempty");
        let (cin, cout) = (first.weight.shape()[1], last.weight.shape()[0]);
        if shape.len() != 4 || shape[1] != cin || cout != cin {
            return Err(Error::Config(format!(
                "residual network maps {cin} to {cout} channels, input is {shape:?}"
            )));
        }
        Ok(())
    }
}

/// Records `ε·tanh(h(x))` on the graph.
pub fn perturbation_graph(g: &mut Graph, layers: &[(Var, Var, usize)], x: Var, epsilon: f32) -> Result<Var> {
    let mut h = x;
    for &(w, b, p) in layers {
        let c = g.conv2d(h, w, Some(b), 1, p)?;
        h = g.relu(c);
    }
    if g.shape(h) != g.shape(x) {
        return Err(Error::Config(format!(
            "residual network output {:?} differs from input {:?}",
            g.shape(h),
            g.shape(x)
        )));
    }
    let t = g.tanh(h);
    Ok(g.mul_scalar(t, epsilon))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvKey {
    pub epsilon: f32,
    /// Fixed-point iterations used by unlock.
    pub iters: usize,
    pub nets: Vec<ConvNet>,
}

impl ConvKey {
    pub fn slots(&self) -> usize {
        self.nets.len()
    }

    /// `ε·tanh(h_slot(x))` for a batch `[N, C, H, W]`.
    pub fn perturbation(&self, slot: usize, x: &Tensor) -> Result<Tensor> {
        let net = &self.nets[slot];
        net.check_input(x.shape())?;
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(x.numel());
        let mut start = 0;
        while start < n {
            let end = (start + APPLY_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::new();
            let layers = net.bind(&mut g, false);
            let xv = g.constant(x.select_rows(&idx));
            let p = perturbation_graph(&mut g, &layers, xv, self.epsilon)?;
            out.extend_from_slice(g.value(p).data());
            start = end;
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        if !t.is_finite() {
            return Err(Error::NonFinite("residual network output"));
        }
        Ok(t)
    }

    pub fn lock_preclip(&self, slot: usize, x: &Tensor) -> Result<Tensor> {
        let p = self.perturbation(slot, x)?;
        let data = x.data().iter().zip(p.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }

    pub fn lock(&self, slot: usize, x: &Tensor) -> Result<Tensor> {
        Ok(self.lock_preclip(slot, x)?.map(|v| v.clamp(0.0, 1.0)))
    }

    /// `m` fixed-point steps `x ← x' − ε·tanh(h(x))` from `x = x'`. Also
    /// returns the final residual `‖x − (x' − ε·tanh(h(x)))‖∞`.
    pub fn unlock(&self, slot: usize, locked: &Tensor, m: usize) -> Result<(Tensor, f32)> {
        let mut x = locked.clone();
        for _ in 0..m {
            let p = self.perturbation(slot, &x)?;
            for ((v, &l), &pv) in x.data_mut().iter_mut().zip(locked.data()).zip(p.data()) {
                *v = l - pv;
            }
            if !x.is_finite() {
                return Err(Error::NonFinite("fixed-point iterate"));
            }
        }
        let p = self.perturbation(slot, &x)?;
        let residual = x
            .data()
            .iter()
            .zip(locked.data())
            .zip(p.data())
            .map(|((&v, &l), &pv)| (v - (l - pv)).abs())
            .fold(0.0f32, f32::max);
        Ok((x, residual))
    }
}

/// Power-iteration vector for one layer, kept across calls.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PowerVector(pub Vec<f32>);

fn unit_start(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

/// Runs `iters` power steps on the layer's linear map over `hw` inputs and
/// returns the estimate `‖A u‖` for the updated unit vector `u`.
pub fn power_iterate(layer: &ConvLayer, hw: [usize; 2], u: &mut PowerVector, iters: usize) -> Result<f32> {
    let geom = layer.geometry(hw)?;
    let w = layer.weight.data();
    if u.0.len() != geom.in_len() || norm(&u.0) == 0.0 {
        u.0 = unit_start(geom.in_len(), geom.weight_len() as u64);
    }
    let mut av = vec![0.0; geom.out_len()];
    for _ in 0..iters {
        kernels::conv2d_forward(&geom, &u.0, w, None, &mut av);
        if norm(&av) == 0.0 {
            return Ok(0.0);
        }
        let mut back = vec![0.0; geom.in_len()];
        kernels::conv2d_backward_input(&geom, &av, w, &mut back);
        let n = norm(&back);
        if n == 0.0 {
            return Ok(0.0);
        }
        back.iter_mut().for_each(|x| *x /= n);
        u.0 = back;
    }
    kernels::conv2d_forward(&geom, &u.0, w, None, &mut av);
    Ok(norm(&av))
}

/// Updates the estimate with `iters` power steps, then divides the weights
/// by `max(1, σ̂)`. Returns σ̂ before division.
pub fn spectral_normalize(layer: &mut ConvLayer, hw: [usize; 2], u: &mut PowerVector, iters: usize) -> Result<f32> {
    let sigma = power_iterate(layer, hw, u, iters)?;
    if sigma > 1.0 {
        layer.weight.data_mut().iter_mut().for_each(|v| *v /= sigma);
    }
    Ok(sigma)
}

/// Fresh `iters`-step estimate of every layer's norm, slot by slot.
pub fn audit_spectral_norms(key: &ConvKey, hw: [usize; 2], iters: usize) -> Result<Vec<Vec<f32>>> {
    key.nets
        .iter()
        .map(|net| {
            net.layers
                .iter()
                .map(|l| power_iterate(l, hw, &mut PowerVector::default(), iters))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: Vec<f32>, shape: [usize; 4], padding: usize) -> ConvLayer {
        ConvLayer {
            weight: Tensor::new(shape.to_vec(), w).unwrap(),
            bias: Tensor::zeros(&[shape[0]]),
            padding,
        }
    }

    #[test]
    fn layout_follows_table() {
        let l = h_layout(3, 1.0);
        assert_eq!(
            l,
            vec![(3, 8, 3, 1), (8, 16, 3, 1), (16, 16, 1, 0), (16, 8, 3, 1), (8, 3, 3, 1)]
        );
        assert_eq!(h_layout(3, 0.5)[1], (4, 8, 3, 1));
    }

    #[test]
    fn scalar_operator_is_normalized() {
        let mut l = layer(vec![2.0], [1, 1, 1, 1], 0);
        let s = spectral_normalize(&mut l, [1, 1], &mut PowerVector::default(), 1).unwrap();
        assert!((s - 2.0).abs() < 1e-6);
        assert!((l.weight.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identity_operator_is_unchanged() {
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let mut l = layer(w.clone(), [1, 1, 3, 3], 1);
        let s = spectral_normalize(&mut l, [6, 6], &mut PowerVector::default(), 5).unwrap();
        assert!((s - 1.0).abs() < 1e-5);
        assert_eq!(l.weight.data(), &w[..]);
    }

    #[test]
    fn zero_weights_skip_division() {
        let mut l = layer(vec![0.0; 18], [2, 1, 3, 3], 1);
        let s = spectral_normalize(&mut l, [4, 4], &mut PowerVector::default(), 3).unwrap();
        assert_eq!(s, 0.0);
        assert!(l.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_net_is_identity() {
        let key = ConvKey {
            epsilon: 0.05,
            iters: 3,
            nets: vec![ConvNet::zeros(&h_layout(3, 0.5))],
        };
        let x = Tensor::full(&[2, 3, 8, 8], 0.4);
        assert_eq!(key.lock(0, &x).unwrap(), x);
        let (u, r) = key.unlock(0, &x, 4).unwrap();
        assert_eq!(u, x);
        assert_eq!(r, 0.0);
    }
}
