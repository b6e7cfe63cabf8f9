//! Raw slice kernels: GEMM, 2-D convolution and pooling.
//!
//! Batched kernels split work per sample through [`crate::exec`]; weight
//! gradients are accumulated in fixed-size sample chunks and reduced in
//! chunk order.

use crate::error::{invalid, Result};
use crate::exec;

/// Samples per partial weight-gradient buffer.
const WGRAD_CHUNK: usize = 8;

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k`
/// and `op(b)` of shape `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for a square-stride, symmetric-padding convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input_chw: [usize; 3],
        weight_shape: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [in_c, in_h, in_w] = input_chw;
        let [out_c, wc, kh, kw] = weight_shape;
        if wc != in_c {
            return Err(invalid(
                "conv2d",
                format!("input has {in_c} channels, weight expects {wc}"),
            ));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {in_h}x{in_w}"),
            ));
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.patch_len()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, input: &[f32], cols: &mut [f32]) {
        let ohw = self.out_pixels();
        for c in 0..self.in_c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &input[(c * self.in_h + iy as usize) * self.in_w..][..self.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], out: &mut [f32]) {
        let ohw = self.out_pixels();
        for c in 0..self.in_c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst =
                            &mut out[(c * self.in_h + iy as usize) * self.in_w..][..self.in_w];
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch laid out as `N x C x H x W`.
pub fn conv2d_forward(
    geom: &ConvGeometry,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let (in_len, out_len) = (geom.in_len(), geom.out_len());
    let ohw = geom.out_pixels();
    exec::for_each_chunk_mut(out, out_len, |n, out_n| {
        let x = &input[n * in_len..(n + 1) * in_len];
        if geom.is_pointwise() {
            gemm(geom.out_c, geom.patch_len(), ohw, 1.0, weight, false, x, false, 0.0, out_n);
        } else {
            let mut cols = vec![0.0f32; geom.patch_len() * ohw];
            geom.im2col(x, &mut cols);
            gemm(geom.out_c, geom.patch_len(), ohw, 1.0, weight, false, &cols, false, 0.0, out_n);
        }
        if let Some(b) = bias {
            for (o, bv) in b.iter().enumerate() {
                out_n[o * ohw..(o + 1) * ohw].iter_mut().for_each(|v| *v += bv);
            }
        }
    });
}

/// Accumulates the input gradient (the transposed convolution of
/// `grad_out`) into `grad_in`.
pub fn conv2d_backward_input(
    geom: &ConvGeometry,
    grad_out: &[f32],
    weight: &[f32],
    grad_in: &mut [f32],
) {
    let (in_len, out_len) = (geom.in_len(), geom.out_len());
    let ohw = geom.out_pixels();
    exec::for_each_chunk_mut(grad_in, in_len, |n, gin| {
        let g = &grad_out[n * out_len..(n + 1) * out_len];
        if geom.is_pointwise() {
            gemm(geom.patch_len(), geom.out_c, ohw, 1.0, weight, true, g, false, 1.0, gin);
        } else {
            let mut cols = vec![0.0f32; geom.patch_len() * ohw];
            gemm(geom.patch_len(), geom.out_c, ohw, 1.0, weight, true, g, false, 0.0, &mut cols);
            geom.col2im_add(&cols, gin);
        }
    });
}

/// Accumulates weight (and optionally bias) gradients over the batch.
pub fn conv2d_backward_params(
    geom: &ConvGeometry,
    input: &[f32],
    grad_out: &[f32],
    batch: usize,
    grad_w: &mut [f32],
    grad_b: Option<&mut [f32]>,
) {
    let (in_len, out_len) = (geom.in_len(), geom.out_len());
    let ohw = geom.out_pixels();
    let chunks = batch.div_ceil(WGRAD_CHUNK);
    let partials = exec::map_range(chunks, |ci| {
        let mut dw = vec![0.0f32; geom.weight_len()];
        let mut db = vec![0.0f32; geom.out_c];
        let mut cols = vec![0.0f32; geom.patch_len() * ohw];
        for n in ci * WGRAD_CHUNK..((ci + 1) * WGRAD_CHUNK).min(batch) {
            let x = &input[n * in_len..(n + 1) * in_len];
            let g = &grad_out[n * out_len..(n + 1) * out_len];
            let patches: &[f32] = if geom.is_pointwise() {
                x
            } else {
                geom.im2col(x, &mut cols);
                &cols
            };
            gemm(geom.out_c, ohw, geom.patch_len(), 1.0, g, false, patches, true, 1.0, &mut dw);
            for (o, d) in db.iter_mut().enumerate() {
                *d += g[o * ohw..(o + 1) * ohw].iter().sum::<f32>();
            }
        }
        (dw, db)
    });
    let mut grad_b = grad_b;
    for (dw, db) in partials {
        grad_w.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        if let Some(gb) = grad_b.as_deref_mut() {
            gb.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        }
    }
}

/// Non-overlapping `k x k` max pooling; returns the flat argmax per output.
pub fn max_pool2d_forward(
    input: &[f32],
    batch_channels: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [f32],
) -> Vec<usize> {
    let (oh, ow) = (h / k, w / k);
    let mut argmax = vec![0usize; batch_channels * oh * ow];
    for bc in 0..batch_channels {
        let plane = &input[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = (oy * k + dy) * w + ox * k + dx;
                        if plane[idx] > best || (dy == 0 && dx == 0) {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (bc * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = bc * h * w + best_idx;
            }
        }
    }
    argmax
}
