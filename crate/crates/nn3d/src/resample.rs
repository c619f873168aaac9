//! Separable trilinear resizing with half-pixel centres (`align_corners = false`).

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f32,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                w_hi: (src - lo as f64) as f32,
            }
        })
        .collect()
}

/// Resizes a single `[d0, d1, d2]` plane to `out` extents.
pub fn resize_plane(src: &[f32], dims: [usize; 3], out: [usize; 3]) -> Vec<f32> {
    let [a0, a1, a2] = dims;
    let [b0, b1, b2] = out;
    // fastest axis first
    let t2 = taps(a2, b2);
    let mut s1 = vec![0.0f32; a0 * a1 * b2];
    for r in 0..a0 * a1 {
        let row = &src[r * a2..(r + 1) * a2];
        let dst = &mut s1[r * b2..(r + 1) * b2];
        for (d, t) in dst.iter_mut().zip(&t2) {
            *d = (1.0 - t.w_hi) * row[t.lo] + t.w_hi * row[t.hi];
        }
    }
    let t1 = taps(a1, b1);
    let mut s2 = vec![0.0f32; a0 * b1 * b2];
    for z in 0..a0 {
        for (y, t) in t1.iter().enumerate() {
            let lo = &s1[(z * a1 + t.lo) * b2..(z * a1 + t.lo + 1) * b2];
            let hi = &s1[(z * a1 + t.hi) * b2..(z * a1 + t.hi + 1) * b2];
            let dst = &mut s2[(z * b1 + y) * b2..(z * b1 + y + 1) * b2];
            for ((d, l), h) in dst.iter_mut().zip(lo).zip(hi) {
                *d = (1.0 - t.w_hi) * *l + t.w_hi * *h;
            }
        }
    }
    let t0 = taps(a0, b0);
    let pl = b1 * b2;
    let mut s3 = vec![0.0f32; b0 * pl];
    for (z, t) in t0.iter().enumerate() {
        let lo = &s2[t.lo * pl..(t.lo + 1) * pl];
        let hi = &s2[t.hi * pl..(t.hi + 1) * pl];
        for ((d, l), h) in s3[z * pl..(z + 1) * pl].iter_mut().zip(lo).zip(hi) {
            *d = (1.0 - t.w_hi) * *l + t.w_hi * *h;
        }
    }
    s3
}

/// Adjoint of [`resize_plane`]: maps an output-space gradient back to input space.
pub fn resize_plane_adjoint(grad: &[f32], dims: [usize; 3], out: [usize; 3]) -> Vec<f32> {
    let [a0, a1, a2] = dims;
    let [b0, b1, b2] = out;
    let pl = b1 * b2;
    let t0 = taps(a0, b0);
    let mut s2 = vec![0.0f32; a0 * pl];
    for (z, t) in t0.iter().enumerate() {
        let g = &grad[z * pl..(z + 1) * pl];
        for (i, gv) in g.iter().enumerate() {
            s2[t.lo * pl + i] += (1.0 - t.w_hi) * gv;
            s2[t.hi * pl + i] += t.w_hi * gv;
        }
    }
    let t1 = taps(a1, b1);
    let mut s1 = vec![0.0f32; a0 * a1 * b2];
    for z in 0..a0 {
        for (y, t) in t1.iter().enumerate() {
            let g = &s2[(z * b1 + y) * b2..(z * b1 + y + 1) * b2];
            for (i, gv) in g.iter().enumerate() {
                s1[(z * a1 + t.lo) * b2 + i] += (1.0 - t.w_hi) * gv;
                s1[(z * a1 + t.hi) * b2 + i] += t.w_hi * gv;
            }
        }
    }
    let t2 = taps(a2, b2);
    let mut s0 = vec![0.0f32; a0 * a1 * a2];
    for r in 0..a0 * a1 {
        let g = &s1[r * b2..(r + 1) * b2];
        let dst = &mut s0[r * a2..(r + 1) * a2];
        for (gv, t) in g.iter().zip(&t2) {
            dst[t.lo] += (1.0 - t.w_hi) * gv;
            dst[t.hi] += t.w_hi * gv;
        }
    }
    s0
}

/// Trilinear resize layer for every channel of a batch.
#[derive(Clone, Debug)]
pub struct Resize {
    out: [usize; 3],
    in_dims: [usize; 3],
}

impl Resize {
    pub fn new(out: [usize; 3]) -> Self {
        Self { out, in_dims: [0; 3] }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let [n, c, ..] = x.shape();
        self.in_dims = x.spatial();
        let [b0, b1, b2] = self.out;
        let mut y = Tensor::zeros([n, c, b0, b1, b2]);
        for i in 0..n {
            for ch in 0..c {
                let r = resize_plane(x.channel(i, ch), self.in_dims, self.out);
                y.channel_mut(i, ch).copy_from_slice(&r);
            }
        }
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, ..] = grad.shape();
        let [a0, a1, a2] = self.in_dims;
        let mut g = Tensor::zeros([n, c, a0, a1, a2]);
        for i in 0..n {
            for ch in 0..c {
                let r = resize_plane_adjoint(grad.channel(i, ch), self.in_dims, self.out);
                g.channel_mut(i, ch).copy_from_slice(&r);
            }
        }
        g
    }
}
