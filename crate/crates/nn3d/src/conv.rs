//! Stride-1 "same" 3-D convolution with kernel size 1 or 3.
//!
//! Weights are stored `[out][in][kd][kh][kw]`. The 3×3×3 path runs as shifted
//! row updates along the fastest axis so the inner loops vectorize; reductions
//! for weight gradients accumulate row partials in `f64`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::param::{Param, Parameterized};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv3d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv3d {
    /// He-uniform initialization. `kernel` must be 1 or 3.
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, bias: bool, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1 and 3 kernels are supported");
        let taps = kernel * kernel * kernel;
        let fan_in = (in_ch * taps) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = (0..out_ch * in_ch * taps).map(|_| dist.sample(rng)).collect();
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: Param::new(w),
            bias: bias.then(|| Param::zeros(out_ch)),
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let out = self.infer(x);
        self.input = Some(x.clone());
        out
    }

    /// Forward pass without caching the input.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let [n, c, d0, d1, d2] = x.shape();
        assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let mut out = Tensor::zeros([n, self.out_ch, d0, d1, d2]);
        let dims = [d0, d1, d2];
        let plane = x.plane_len();
        for i in 0..n {
            let src = x.sample(i);
            let dst = out.sample_mut(i);
            if let Some(b) = self.bias.as_ref() {
                for (co, oplane) in dst.chunks_mut(plane).enumerate() {
                    oplane.iter_mut().for_each(|v| *v = b.value[co]);
                }
            }
            if self.kernel == 3 {
                correlate3(dst, src, &self.weight.value, self.in_ch, self.out_ch, dims);
            } else {
                for (co, oplane) in dst.chunks_mut(plane).enumerate() {
                    for ci in 0..self.in_ch {
                        axpy(oplane, &src[ci * plane..(ci + 1) * plane], self.weight.value[co * self.in_ch + ci]);
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let input = self.input.take().expect("conv backward called before forward");
        let gin = self.backward_with(&input, grad);
        self.input = Some(input);
        gin
    }

    /// Accumulates parameter gradients only; for layers whose input needs no gradient.
    pub fn backward_params(&mut self, grad: &Tensor) {
        let input = self.input.take().expect("conv backward called before forward");
        self.param_grads(&input, grad);
        self.input = Some(input);
    }

    fn param_grads(&mut self, input: &Tensor, grad: &Tensor) {
        let [n, _, d0, d1, d2] = input.shape();
        assert_eq!(grad.shape(), [n, self.out_ch, d0, d1, d2], "conv grad shape mismatch");
        let dims = [d0, d1, d2];
        let plane = input.plane_len();
        let taps = self.taps();
        let (in_ch, out_ch) = (self.in_ch, self.out_ch);

        if let Some(b) = self.bias.as_mut() {
            for i in 0..n {
                let g = grad.sample(i);
                for co in 0..out_ch {
                    b.grad[co] += sum_f64(&g[co * plane..(co + 1) * plane]) as f32;
                }
            }
        }

        let mut acc = vec![0.0f64; out_ch * in_ch * taps];
        for i in 0..n {
            let g = grad.sample(i);
            let src = input.sample(i);
            if self.kernel == 3 {
                weight_grad3(&mut acc, g, src, in_ch, out_ch, dims);
            } else {
                for co in 0..out_ch {
                    for ci in 0..in_ch {
                        acc[co * in_ch + ci] += dot_f64(&g[co * plane..(co + 1) * plane], &src[ci * plane..(ci + 1) * plane]);
                    }
                }
            }
        }
        for (d, a) in self.weight.grad.iter_mut().zip(acc) {
            *d += a as f32;
        }
    }

    fn backward_with(&mut self, input: &Tensor, grad: &Tensor) -> Tensor {
        self.param_grads(input, grad);
        let [n, _, d0, d1, d2] = input.shape();
        let dims = [d0, d1, d2];
        let plane = input.plane_len();
        let taps = self.taps();
        let (in_ch, out_ch) = (self.in_ch, self.out_ch);

        // input gradient = correlation with the flipped, transposed kernel
        let mut flipped = vec![0.0f32; in_ch * out_ch * taps];
        for co in 0..out_ch {
            for ci in 0..in_ch {
                for k in 0..taps {
                    flipped[(ci * out_ch + co) * taps + (taps - 1 - k)] = self.weight.value[(co * in_ch + ci) * taps + k];
                }
            }
        }
        let mut gin = Tensor::zeros(input.shape());
        for i in 0..n {
            let g = grad.sample(i);
            let dst = gin.sample_mut(i);
            if self.kernel == 3 {
                correlate3(dst, g, &flipped, out_ch, in_ch, dims);
            } else {
                for (ci, iplane) in dst.chunks_mut(plane).enumerate() {
                    for co in 0..out_ch {
                        axpy(iplane, &g[co * plane..(co + 1) * plane], flipped[ci * out_ch + co]);
                    }
                }
            }
        }
        gin
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl Parameterized for Conv3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(b);
        }
    }
}

#[inline]
fn axpy(dst: &mut [f32], src: &[f32], a: f32) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

const L: usize = 8;
const LW: usize = 16;
type Lanes = [f32; L];

/// Zero-padded copy of `channels` planes: one voxel of padding on every face,
/// rows widened to a whole number of lane chunks plus the two halo columns.
struct Padded {
    data: Vec<f32>,
    rows: usize,
    width: usize,
    plane: usize,
}

impl Padded {
    fn new(src: &[f32], channels: usize, dims: [usize; 3]) -> Self {
        let [d0, d1, d2] = dims;
        let chunks = d2.div_ceil(LW);
        let width = chunks * LW + 2;
        let rows = d1 + 2;
        let plane = (d0 + 2) * rows * width;
        let mut data = vec![0.0f32; channels * plane];
        let sp = d0 * d1 * d2;
        for c in 0..channels {
            for z in 0..d0 {
                for y in 0..d1 {
                    let s = &src[c * sp + (z * d1 + y) * d2..][..d2];
                    let o = c * plane + ((z + 1) * rows + y + 1) * width + 1;
                    data[o..o + d2].copy_from_slice(s);
                }
            }
        }
        Self { data, rows, width, plane }
    }

    #[inline(always)]
    fn row(&self, c: usize, z: usize, y: usize) -> &[f32] {
        let o = c * self.plane + (z * self.rows + y) * self.width;
        &self.data[o..o + self.width]
    }
}

#[inline(always)]
fn load(src: &[f32]) -> Lanes {
    let mut v = [0.0f32; L];
    v.copy_from_slice(&src[..L]);
    v
}

/// `dst[co] += Σ_ci correlate(src[ci], w[co][ci])` over a 3×3×3 stencil with zero padding.
/// `w` is laid out `[co][ci][27]`; `dst` holds `co` planes.
fn correlate3(dst: &mut [f32], src: &[f32], w: &[f32], in_ch: usize, out_ch: usize, dims: [usize; 3]) {
    let pad = Padded::new(src, in_ch, dims);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        let mut co = 0;
        while co < out_ch {
            // SAFETY: feature checked above; `Padded` guarantees every lane read is in bounds.
            unsafe { avx512::correlate3_block4(dst, &pad, w, in_ch, out_ch, co, dims) };
            co += 4;
        }
        return;
    }
    correlate3_portable(dst, &pad, w, in_ch, out_ch, dims);
}

fn correlate3_portable(dst: &mut [f32], pad: &Padded, w: &[f32], in_ch: usize, out_ch: usize, dims: [usize; 3]) {
    let mut co = 0;
    while co < out_ch {
        match out_ch - co {
            1 => correlate3_block::<1>(dst, pad, w, in_ch, co, dims),
            2 => correlate3_block::<2>(dst, pad, w, in_ch, co, dims),
            3 => correlate3_block::<3>(dst, pad, w, in_ch, co, dims),
            _ => correlate3_block::<4>(dst, pad, w, in_ch, co, dims),
        }
        co += 4;
    }
}

fn correlate3_block<const CB: usize>(
    dst: &mut [f32],
    pad: &Padded,
    w: &[f32],
    in_ch: usize,
    co0: usize,
    dims: [usize; 3],
) {
    let [d0, d1, d2] = dims;
    let sp = d0 * d1 * d2;
    let chunks = d2.div_ceil(L);
    // weights regrouped as [ci][tap-row][j][3]
    let mut wb = vec![0.0f32; in_ch * 9 * CB * 3];
    for ci in 0..in_ch {
        for ab in 0..9 {
            for j in 0..CB {
                for c in 0..3 {
                    wb[((ci * 9 + ab) * CB + j) * 3 + c] = w[((co0 + j) * in_ch + ci) * 27 + ab * 3 + c];
                }
            }
        }
    }
    for z in 0..d0 {
        for y in 0..d1 {
            for xc in 0..chunks {
                let mut acc = [[0.0f32; L]; CB];
                for ci in 0..in_ch {
                    for a in 0..3 {
                        for b in 0..3 {
                            let row = &pad.row(ci, z + a, y + b)[xc * L..];
                            let r0 = load(row);
                            let r1 = load(&row[1..]);
                            let r2 = load(&row[2..]);
                            let wk = &wb[((ci * 9 + a * 3 + b) * CB) * 3..][..CB * 3];
                            for j in 0..CB {
                                let (w0, w1, w2) = (wk[j * 3], wk[j * 3 + 1], wk[j * 3 + 2]);
                                for l in 0..L {
                                    acc[j][l] = r0[l].mul_add(w0, acc[j][l]);
                                    acc[j][l] = r1[l].mul_add(w1, acc[j][l]);
                                    acc[j][l] = r2[l].mul_add(w2, acc[j][l]);
                                }
                            }
                        }
                    }
                }
                let x0 = xc * L;
                let n = L.min(d2 - x0);
                for j in 0..CB {
                    let o = &mut dst[(co0 + j) * sp + (z * d1 + y) * d2 + x0..][..n];
                    for (d, v) in o.iter_mut().zip(&acc[j]) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// `acc[co][ci][a][b][c] += Σ_p g[co][p] * src[ci][p + (a-1, b-1, c-1)]`
fn weight_grad3(acc: &mut [f64], g: &[f32], src: &[f32], in_ch: usize, out_ch: usize, dims: [usize; 3]) {
    let pad = Padded::new(src, in_ch, dims);
    let [d0, d1, d2] = dims;
    let gw = d2.div_ceil(LW) * LW;
    let sp = d0 * d1 * d2;
    // gradient rows widened to whole chunks, zero tail
    let mut gpad = vec![0.0f32; out_ch * d0 * d1 * gw];
    for co in 0..out_ch {
        for r in 0..d0 * d1 {
            gpad[(co * d0 * d1 + r) * gw..][..d2].copy_from_slice(&g[co * sp + r * d2..][..d2]);
        }
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        let mut co = 0;
        while co < out_ch {
            // SAFETY: as in `correlate3`; `gpad` rows are whole lane chunks.
            unsafe { avx512::weight_grad3_block4(acc, &gpad, &pad, in_ch, out_ch, co, dims) };
            co += 4;
        }
        return;
    }
    weight_grad3_portable(acc, &gpad, &pad, in_ch, out_ch, dims);
}

fn weight_grad3_portable(acc: &mut [f64], gpad: &[f32], pad: &Padded, in_ch: usize, out_ch: usize, dims: [usize; 3]) {
    let mut co = 0;
    while co < out_ch {
        match out_ch - co {
            1 => weight_grad3_block::<1>(acc, gpad, pad, in_ch, co, dims),
            2 => weight_grad3_block::<2>(acc, gpad, pad, in_ch, co, dims),
            3 => weight_grad3_block::<3>(acc, gpad, pad, in_ch, co, dims),
            _ => weight_grad3_block::<4>(acc, gpad, pad, in_ch, co, dims),
        }
        co += 4;
    }
}

fn weight_grad3_block<const CB: usize>(
    acc: &mut [f64],
    gpad: &[f32],
    pad: &Padded,
    in_ch: usize,
    co0: usize,
    dims: [usize; 3],
) {
    let [d0, d1, d2] = dims;
    let chunks = d2.div_ceil(L);
    let gw = d2.div_ceil(LW) * LW;
    let gplane = d0 * d1 * gw;
    for ci in 0..in_ch {
        for a in 0..3 {
            for b in 0..3 {
                let mut part = [[[0.0f32; L]; 3]; CB];
                let mut total = [[0.0f64; 3]; CB];
                for z in 0..d0 {
                    for y in 0..d1 {
                        let row = pad.row(ci, z + a, y + b);
                        for xc in 0..chunks {
                            let r = &row[xc * L..];
                            let rs = [load(r), load(&r[1..]), load(&r[2..])];
                            for j in 0..CB {
                                let gv = load(&gpad[(co0 + j) * gplane + (z * d1 + y) * gw + xc * L..]);
                                for c in 0..3 {
                                    for l in 0..L {
                                        part[j][c][l] = gv[l].mul_add(rs[c][l], part[j][c][l]);
                                    }
                                }
                            }
                        }
                    }
                    // flush per slice to bound f32 accumulation length
                    for j in 0..CB {
                        for c in 0..3 {
                            total[j][c] += part[j][c].iter().map(|&v| v as f64).sum::<f64>();
                            part[j][c] = [0.0; L];
                        }
                    }
                }
                for j in 0..CB {
                    for c in 0..3 {
                        acc[((co0 + j) * in_ch + ci) * 27 + (a * 3 + b) * 3 + c] += total[j][c];
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::Padded;
    use std::arch::x86_64::*;

    /// Four output channels starting at `co0`; channels past `out_ch` get zero weights and are not stored.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn correlate3_block4(
        dst: &mut [f32],
        pad: &Padded,
        w: &[f32],
        in_ch: usize,
        out_ch: usize,
        co0: usize,
        dims: [usize; 3],
    ) {
        let [d0, d1, d2] = dims;
        let sp = d0 * d1 * d2;
        let valid = (out_ch - co0).min(4);
        let mut wb = vec![0.0f32; in_ch * 9 * 12];
        for ci in 0..in_ch {
            for ab in 0..9 {
                for j in 0..valid {
                    for c in 0..3 {
                        wb[(ci * 9 + ab) * 12 + j * 3 + c] = w[((co0 + j) * in_ch + ci) * 27 + ab * 3 + c];
                    }
                }
            }
        }
        let chunks = d2.div_ceil(16);
        assert!(pad.data.len() >= in_ch * pad.plane && dst.len() >= (co0 + valid) * sp);
        let base = pad.data.as_ptr();
        let mut tmp = [0.0f32; 16];
        for z in 0..d0 {
            for y in 0..d1 {
                for xc in 0..chunks {
                    let mut acc = [_mm512_setzero_ps(); 4];
                    for ci in 0..in_ch {
                        for a in 0..3 {
                            for b in 0..3 {
                                let p = base.add(ci * pad.plane + ((z + a) * pad.rows + y + b) * pad.width + xc * 16);
                                let r0 = _mm512_loadu_ps(p);
                                let r1 = _mm512_loadu_ps(p.add(1));
                                let r2 = _mm512_loadu_ps(p.add(2));
                                let wk = wb.as_ptr().add((ci * 9 + a * 3 + b) * 12);
                                for (j, aj) in acc.iter_mut().enumerate() {
                                    *aj = _mm512_fmadd_ps(r0, _mm512_set1_ps(*wk.add(j * 3)), *aj);
                                    *aj = _mm512_fmadd_ps(r1, _mm512_set1_ps(*wk.add(j * 3 + 1)), *aj);
                                    *aj = _mm512_fmadd_ps(r2, _mm512_set1_ps(*wk.add(j * 3 + 2)), *aj);
                                }
                            }
                        }
                    }
                    let x0 = xc * 16;
                    let n = 16.min(d2 - x0);
                    for (j, aj) in acc.iter().enumerate().take(valid) {
                        _mm512_storeu_ps(tmp.as_mut_ptr(), *aj);
                        let o = &mut dst[(co0 + j) * sp + (z * d1 + y) * d2 + x0..][..n];
                        for (d, v) in o.iter_mut().zip(&tmp) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn weight_grad3_block4(
        acc: &mut [f64],
        gpad: &[f32],
        pad: &Padded,
        in_ch: usize,
        out_ch: usize,
        co0: usize,
        dims: [usize; 3],
    ) {
        let [d0, d1, d2] = dims;
        let chunks = d2.div_ceil(16);
        let gw = chunks * 16;
        let gplane = d0 * d1 * gw;
        let valid = (out_ch - co0).min(4);
        assert!(gpad.len() >= out_ch * gplane && pad.data.len() >= in_ch * pad.plane);
        let gbase = gpad.as_ptr();
        let base = pad.data.as_ptr();
        let zero = vec![0.0f32; gw];
        for z in 0..d0 {
            for ci in 0..in_ch {
                for a in 0..3 {
                    for b in 0..3 {
                        let mut part = [[_mm512_setzero_ps(); 3]; 4];
                        for y in 0..d1 {
                            let prow = base.add(ci * pad.plane + ((z + a) * pad.rows + y + b) * pad.width);
                            let mut grows = [zero.as_ptr(); 4];
                            for (j, g) in grows.iter_mut().enumerate().take(valid) {
                                *g = gbase.add((co0 + j) * gplane + (z * d1 + y) * gw);
                            }
                            for xc in 0..chunks {
                                let p = prow.add(xc * 16);
                                let rs = [_mm512_loadu_ps(p), _mm512_loadu_ps(p.add(1)), _mm512_loadu_ps(p.add(2))];
                                for j in 0..4 {
                                    let gv = _mm512_loadu_ps(grows[j].add(xc * 16));
                                    for c in 0..3 {
                                        part[j][c] = _mm512_fmadd_ps(gv, rs[c], part[j][c]);
                                    }
                                }
                            }
                        }
                        for (j, pj) in part.iter().enumerate().take(valid) {
                            for (c, pc) in pj.iter().enumerate() {
                                acc[((co0 + j) * in_ch + ci) * 27 + (a * 3 + b) * 3 + c] += _mm512_reduce_add_ps(*pc) as f64;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    const L: usize = 16;
    let mut acc = [0.0f32; L];
    let ca = a.chunks_exact(L);
    let cb = b.chunks_exact(L);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..L {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().sum::<f32>() + tail
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.chunks(1024)
        .zip(b.chunks(1024))
        .map(|(x, y)| dot(x, y) as f64)
        .sum()
}

pub(crate) fn sum_f64(a: &[f32]) -> f64 {
    a.chunks(1024)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>())
        .sum()
}
