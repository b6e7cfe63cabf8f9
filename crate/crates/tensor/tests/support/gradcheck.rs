//! Finite-difference gradient oracle.
//!
//! Each primitive is re-implemented here with naive `f64` loops. The scalar
//! probe loss is `sum(out * r)` for a fixed random `r`; analytic gradients
//! from the engine are compared against central differences (step 1e-3) of
//! the `f64` reference on sampled input coordinates.

#![allow(dead_code)]

use learnlock_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const MIN_COORDS: usize = 20;
/// Denominator floor so coordinates with a vanishing true gradient are
/// judged by absolute error.
const REL_FLOOR: f64 = 1e-3;

type EngineFn = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub name: &'static str,
    inputs: Vec<Tensor>,
    engine: EngineFn,
    reference: RefFn,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: &'static str,
    pub coords: usize,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.coords >= MIN_COORDS && self.max_rel_err <= REL_TOL
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero (kink of relu / clip at 0).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05f32..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced well beyond the difference step (no pooling ties).
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), idx.iter().map(|&i| i as f32 * 0.01 - 0.3).collect()).unwrap()
}

// ---- f64 reference primitives -------------------------------------------

fn r_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn r_conv(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    [n, c, h, wd]: [usize; 4],
    [o, _, kh, kw]: [usize; 4],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn r_log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn r_maxpool(x: &[f64], bc: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![f64::NEG_INFINITY; bc * oh * ow];
    for p in 0..bc {
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..k {
                    for dx in 0..k {
                        let v = x[(p * h + oy * k + dy) * w + ox * k + dx];
                        let o = &mut out[(p * oh + oy) * ow + ox];
                        *o = o.max(v);
                    }
                }
            }
        }
    }
    out
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

// ---- cases ----------------------------------------------------------------

pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::new();
    let mut case = |name, inputs, engine: EngineFn, reference: RefFn| {
        v.push(Case { name, inputs, engine, reference })
    };

    let s = [4, 6];
    case("add", vec![rand_tensor(&mut rng, &s, -1.0, 1.0), rand_tensor(&mut rng, &s, -1.0, 1.0)],
        Box::new(|g, x| g.add(x[0], x[1]).unwrap()), Box::new(|x| zip(&x[0], &x[1], |a, b| a + b)));
    case("sub", vec![rand_tensor(&mut rng, &s, -1.0, 1.0), rand_tensor(&mut rng, &s, -1.0, 1.0)],
        Box::new(|g, x| g.sub(x[0], x[1]).unwrap()), Box::new(|x| zip(&x[0], &x[1], |a, b| a - b)));
    case("mul", vec![rand_tensor(&mut rng, &s, -1.0, 1.0), rand_tensor(&mut rng, &s, -1.0, 1.0)],
        Box::new(|g, x| g.mul(x[0], x[1]).unwrap()), Box::new(|x| zip(&x[0], &x[1], |a, b| a * b)));
    case("div", vec![rand_tensor(&mut rng, &s, -1.0, 1.0), rand_tensor(&mut rng, &s, 0.5, 1.5)],
        Box::new(|g, x| g.div(x[0], x[1]).unwrap()), Box::new(|x| zip(&x[0], &x[1], |a, b| a / b)));
    case("add_scalar", vec![rand_tensor(&mut rng, &s, -1.0, 1.0)],
        Box::new(|g, x| g.add_scalar(x[0], 0.7)), Box::new(|x| x[0].iter().map(|a| a + 0.7).collect()));
    case("mul_scalar", vec![rand_tensor(&mut rng, &s, -1.0, 1.0)],
        Box::new(|g, x| g.mul_scalar(x[0], -1.3)),
        Box::new(|x| x[0].iter().map(|a| a * -1.3f32 as f64).collect()));
    case("matmul", vec![rand_tensor(&mut rng, &[3, 5], -1.0, 1.0), rand_tensor(&mut rng, &[5, 4], -1.0, 1.0)],
        Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()), Box::new(|x| r_matmul(&x[0], &x[1], 3, 5, 4)));
    case("add_row_bias", vec![rand_tensor(&mut rng, &[4, 6], -1.0, 1.0), rand_tensor(&mut rng, &[6], -1.0, 1.0)],
        Box::new(|g, x| g.add_row_bias(x[0], x[1]).unwrap()),
        Box::new(|x| (0..24).map(|i| x[0][i] + x[1][i % 6]).collect()));
    case("conv2d_s1_p1",
        vec![rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0), rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5),
             rand_tensor(&mut rng, &[4], -0.5, 0.5)],
        Box::new(|g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 1).unwrap()),
        Box::new(|x| r_conv(&x[0], &x[1], Some(&x[2]), [2, 3, 6, 6], [4, 3, 3, 3], 1, 1)));
    case("conv2d_s2_p0",
        vec![rand_tensor(&mut rng, &[2, 2, 7, 7], -1.0, 1.0), rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5)],
        Box::new(|g, x| g.conv2d(x[0], x[1], None, 2, 0).unwrap()),
        Box::new(|x| r_conv(&x[0], &x[1], None, [2, 2, 7, 7], [3, 2, 3, 3], 2, 0)));
    case("conv2d_1x1",
        vec![rand_tensor(&mut rng, &[2, 4, 5, 5], -1.0, 1.0), rand_tensor(&mut rng, &[3, 4, 1, 1], -0.5, 0.5),
             rand_tensor(&mut rng, &[3], -0.5, 0.5)],
        Box::new(|g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 0).unwrap()),
        Box::new(|x| r_conv(&x[0], &x[1], Some(&x[2]), [2, 4, 5, 5], [3, 4, 1, 1], 1, 0)));
    case("relu", vec![away_from_zero(&mut rng, &s)],
        Box::new(|g, x| g.relu(x[0])), Box::new(|x| x[0].iter().map(|a| a.max(0.0)).collect()));
    case("tanh", vec![rand_tensor(&mut rng, &s, -2.0, 2.0)],
        Box::new(|g, x| g.tanh(x[0])), Box::new(|x| x[0].iter().map(|a| a.tanh()).collect()));
    case("softmax", vec![rand_tensor(&mut rng, &[4, 5], -2.0, 2.0)],
        Box::new(|g, x| g.softmax(x[0]).unwrap()),
        Box::new(|x| x[0].chunks(5).flat_map(|r| r_log_softmax(r).into_iter().map(f64::exp)).collect()));
    let labels = vec![0usize, 2, 1, 2, 0, 1, 1];
    let l2 = labels.clone();
    case("cross_entropy", vec![rand_tensor(&mut rng, &[7, 3], -2.0, 2.0)],
        Box::new(move |g, x| g.cross_entropy(x[0], &labels).unwrap()),
        Box::new(move |x| {
            let total: f64 = x[0].chunks(3).zip(&l2).map(|(r, &y)| -r_log_softmax(r)[y]).sum();
            vec![total / 7.0]
        }));
    let soft: Vec<f32> = (0..21).map(|i| [0.2f32, 0.5, 0.3][i % 3]).collect();
    let soft2: Vec<f64> = soft.iter().map(|&v| v as f64).collect();
    case("soft_cross_entropy", vec![rand_tensor(&mut rng, &[7, 3], -2.0, 2.0)],
        Box::new(move |g, x| g.soft_cross_entropy(x[0], soft.clone()).unwrap()),
        Box::new(move |x| {
            let total: f64 = x[0].chunks(3).zip(soft2.chunks(3))
                .map(|(r, t)| -r_log_softmax(r).iter().zip(t).map(|(l, t)| l * t).sum::<f64>())
                .sum();
            vec![total / 7.0]
        }));
    case("sum", vec![rand_tensor(&mut rng, &s, -1.0, 1.0)],
        Box::new(|g, x| g.sum(x[0])), Box::new(|x| vec![x[0].iter().sum()]));
    case("mean", vec![rand_tensor(&mut rng, &s, -1.0, 1.0)],
        Box::new(|g, x| g.mean(x[0])), Box::new(|x| vec![x[0].iter().sum::<f64>() / 24.0]));
    case("clip", vec![rand_tensor(&mut rng, &s, -1.0, 1.0).map(|v| if (v.abs() - 0.5).abs() < 0.02 { v * 0.9 } else { v })],
        Box::new(|g, x| g.clip(x[0], -0.5, 0.5)),
        Box::new(|x| x[0].iter().map(|a| a.clamp(-0.5, 0.5)).collect()));
    case("max_pool2d", vec![spaced(&mut rng, &[2, 2, 6, 6])],
        Box::new(|g, x| g.max_pool2d(x[0], 2).unwrap()), Box::new(|x| r_maxpool(&x[0], 4, 6, 6, 2)));
    case("reshape", vec![rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0)],
        Box::new(|g, x| g.flatten(x[0]).unwrap()), Box::new(|x| x[0].clone()));
    case("gather_rows", vec![rand_tensor(&mut rng, &[3, 8], -1.0, 1.0)],
        Box::new(|g, x| g.gather_rows(x[0], &[2, 0, 2, 1]).unwrap()),
        Box::new(|x| [2usize, 0, 2, 1].iter().flat_map(|&r| x[0][r * 8..(r + 1) * 8].to_vec()).collect()));
    case("concat_rows", vec![rand_tensor(&mut rng, &[2, 6], -1.0, 1.0), rand_tensor(&mut rng, &[3, 6], -1.0, 1.0)],
        Box::new(|g, x| g.concat_rows(&[x[0], x[1]]).unwrap()),
        Box::new(|x| x[0].iter().chain(&x[1]).copied().collect()));

    // Composite classifier-like graph.
    let labels = vec![1usize, 0];
    let l2 = labels.clone();
    case("composite_cnn",
        vec![rand_tensor(&mut rng, &[2, 2, 6, 6], 0.0, 1.0), rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5),
             rand_tensor(&mut rng, &[3], -0.1, 0.1), rand_tensor(&mut rng, &[27, 2], -0.5, 0.5)],
        Box::new(move |g, x| {
            let h = g.conv2d(x[0], x[1], Some(x[2]), 1, 1).unwrap();
            let h = g.tanh(h);
            let h = g.max_pool2d(h, 2).unwrap();
            let h = g.flatten(h).unwrap();
            let logits = g.matmul(h, x[3]).unwrap();
            g.cross_entropy(logits, &labels).unwrap()
        }),
        Box::new(move |x| {
            let h = r_conv(&x[0], &x[1], Some(&x[2]), [2, 2, 6, 6], [3, 2, 3, 3], 1, 1);
            let h: Vec<f64> = h.iter().map(|v| v.tanh()).collect();
            let h = r_maxpool(&h, 6, 6, 6, 2);
            let logits = r_matmul(&h, &x[3], 2, 27, 2);
            let total: f64 = logits.chunks(2).zip(&l2).map(|(r, &y)| -r_log_softmax(r)[y]).sum();
            vec![total / 2.0]
        }));
    v
}

pub fn check(case: &Case, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.engine)(&mut g, &vars);
    let out_shape = g.shape(out).to_vec();
    let probe = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
    let probe64: Vec<f64> = probe.data().iter().map(|&v| v as f64).collect();
    let r = g.constant(probe);
    let weighted = g.mul(out, r).unwrap();
    let loss = g.sum(weighted);
    g.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = case.inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let ref_loss = |xs: &[Vec<f64>]| -> f64 {
        (case.reference)(xs).iter().zip(&probe64).map(|(a, b)| a * b).sum()
    };

    let mut coords: Vec<(usize, usize)> = base
        .iter()
        .enumerate()
        .flat_map(|(i, x)| (0..x.len()).map(move |j| (i, j)))
        .collect();
    for i in (1..coords.len()).rev() {
        coords.swap(i, rng.gen_range(0..=i));
    }
    coords.truncate(24.max(MIN_COORDS));

    let mut max_rel = 0.0f64;
    for &(i, j) in &coords {
        let analytic = g.grad(vars[i]).map_or(0.0, |gr| gr[j] as f64);
        let mut plus = base.clone();
        plus[i][j] += FD_STEP;
        let mut minus = base.clone();
        minus[i][j] -= FD_STEP;
        let numeric = (ref_loss(&plus) - ref_loss(&minus)) / (2.0 * FD_STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        max_rel = max_rel.max(rel);
    }
    GradReport { name: case.name, coords: coords.len(), max_rel_err: max_rel }
}

pub fn check_all(seed: u64) -> Vec<GradReport> {
    cases(seed).iter().map(|c| check(c, seed)).collect()
}
