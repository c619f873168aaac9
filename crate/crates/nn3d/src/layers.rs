//! Parameter-free layers plus the fully connected layer.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::param::{Param, Parameterized};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        self.mask.clear();
        self.mask.reserve(out.len());
        for v in out.data_mut() {
            let keep = *v > 0.0;
            self.mask.push(keep);
            if !keep {
                *v = 0.0;
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        assert_eq!(grad.len(), self.mask.len(), "relu backward before forward");
        let mut out = grad.clone();
        for (g, &m) in out.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *g = 0.0;
            }
        }
        out
    }
}

/// 2×2×2 max pooling with stride 2. Spatial extents must be even.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    argmax: Vec<u8>,
    in_shape: [usize; 5],
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let [n, c, d0, d1, d2] = x.shape();
        assert!(d0 % 2 == 0 && d1 % 2 == 0 && d2 % 2 == 0, "max pool needs even extents, got {:?}", x.spatial());
        let (o0, o1, o2) = (d0 / 2, d1 / 2, d2 / 2);
        let mut out = Tensor::zeros([n, c, o0, o1, o2]);
        self.in_shape = x.shape();
        self.argmax = vec![0; out.len()];
        let op = o0 * o1 * o2;
        for i in 0..n {
            for ch in 0..c {
                let src = x.channel(i, ch);
                let base = (i * c + ch) * op;
                let dst = out.channel_mut(i, ch);
                for z in 0..o0 {
                    for y in 0..o1 {
                        for xx in 0..o2 {
                            let mut best = f32::NEG_INFINITY;
                            let mut arg = 0u8;
                            for k in 0..8u8 {
                                let (a, b, e) = ((k >> 2) as usize, ((k >> 1) & 1) as usize, (k & 1) as usize);
                                let v = src[((2 * z + a) * d1 + 2 * y + b) * d2 + 2 * xx + e];
                                if v > best {
                                    best = v;
                                    arg = k;
                                }
                            }
                            let o = (z * o1 + y) * o2 + xx;
                            dst[o] = best;
                            self.argmax[base + o] = arg;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, d0, d1, d2] = self.in_shape;
        let [_, _, o0, o1, o2] = grad.shape();
        assert_eq!(grad.len(), self.argmax.len(), "max pool backward before forward");
        let mut gin = Tensor::zeros(self.in_shape);
        let _ = d0;
        let op = o0 * o1 * o2;
        for i in 0..n {
            for ch in 0..c {
                let g = grad.channel(i, ch);
                let base = (i * c + ch) * op;
                let dst = gin.channel_mut(i, ch);
                for z in 0..o0 {
                    for y in 0..o1 {
                        for xx in 0..o2 {
                            let o = (z * o1 + y) * o2 + xx;
                            let k = self.argmax[base + o];
                            let (a, b, e) = ((k >> 2) as usize, ((k >> 1) & 1) as usize, (k & 1) as usize);
                            dst[((2 * z + a) * d1 + 2 * y + b) * d2 + 2 * xx + e] += g[o];
                        }
                    }
                }
            }
        }
        gin
    }
}

/// Mean over all spatial voxels, producing `[n, c, 1, 1, 1]`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    in_shape: [usize; 5],
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let [n, c, ..] = x.shape();
        self.in_shape = x.shape();
        let p = x.plane_len() as f64;
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            for ch in 0..c {
                out.push((crate::conv::sum_f64(x.channel(i, ch)) / p) as f32);
            }
        }
        Tensor::vector(n, c, out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let [n, c, ..] = self.in_shape;
        let mut gin = Tensor::zeros(self.in_shape);
        let p = gin.plane_len() as f32;
        for i in 0..n {
            for ch in 0..c {
                let g = grad.data()[i * c + ch] / p;
                gin.channel_mut(i, ch).iter_mut().for_each(|v| *v = g);
            }
        }
        gin
    }
}

/// Fully connected layer on `[n, in, 1, 1, 1]` vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    in_f: usize,
    out_f: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng>(in_f: usize, out_f: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_f as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Self {
            in_f,
            out_f,
            weight: Param::new((0..in_f * out_f).map(|_| dist.sample(rng)).collect()),
            bias: Param::zeros(out_f),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_f
    }

    pub fn out_features(&self) -> usize {
        self.out_f
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let n = x.batch();
        assert_eq!(x.len(), n * self.in_f, "linear input size mismatch");
        let mut out = Vec::with_capacity(n * self.out_f);
        for i in 0..n {
            let xi = &x.data()[i * self.in_f..(i + 1) * self.in_f];
            for o in 0..self.out_f {
                let w = &self.weight.value[o * self.in_f..(o + 1) * self.in_f];
                let s: f64 = w.iter().zip(xi).map(|(a, b)| *a as f64 * *b as f64).sum();
                out.push(s as f32 + self.bias.value[o]);
            }
        }
        self.input = Some(x.clone());
        Tensor::vector(n, self.out_f, out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("linear backward before forward");
        let n = x.batch();
        let mut gin = vec![0.0f32; n * self.in_f];
        for i in 0..n {
            let xi = &x.data()[i * self.in_f..(i + 1) * self.in_f];
            for o in 0..self.out_f {
                let g = grad.data()[i * self.out_f + o];
                self.bias.grad[o] += g;
                let row = o * self.in_f;
                for j in 0..self.in_f {
                    self.weight.grad[row + j] += g * xi[j];
                    gin[i * self.in_f + j] += g * self.weight.value[row + j];
                }
            }
        }
        Tensor::from_vec(x.shape(), gin)
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
