use crate::param::{Param, Parameterized};
use crate::tensor::Tensor;
use crate::Mode;

/// Per-channel batch normalization over batch and spatial axes.
#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    momentum: f32,
    eps: f32,
    cache: Option<NormCache>,
}

#[derive(Clone, Debug)]
struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    mode: Mode,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let [n, c, ..] = x.shape();
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let p = x.plane_len();
        let count = (n * p) as f64;
        let mut mean = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let (m, var) = match mode {
                Mode::Train => {
                    let mut s = 0.0f64;
                    for i in 0..n {
                        s += crate::conv::sum_f64(x.channel(i, ch));
                    }
                    let m = s / count;
                    let mut ss = 0.0f64;
                    for i in 0..n {
                        ss += x.channel(i, ch)
                            .chunks(1024)
                            .map(|c| c.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>())
                            .sum::<f64>();
                    }
                    let var = ss / count;
                    let unbiased = if count > 1.0 { ss / (count - 1.0) } else { var };
                    let mo = self.momentum as f64;
                    self.running_mean[ch] = ((1.0 - mo) * self.running_mean[ch] as f64 + mo * m) as f32;
                    self.running_var[ch] = ((1.0 - mo) * self.running_var[ch] as f64 + mo * unbiased) as f32;
                    (m as f32, var as f32)
                }
                Mode::Eval => (self.running_mean[ch], self.running_var[ch]),
            };
            mean[ch] = m;
            inv_std[ch] = 1.0 / (var + self.eps).sqrt();
        }
        let mut xhat = x.clone();
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            for ch in 0..c {
                let (m, s) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                let xh = xhat.channel_mut(i, ch);
                let o = out.channel_mut(i, ch);
                for (h, y) in xh.iter_mut().zip(o.iter_mut()) {
                    *h = (*h - m) * s;
                    *y = g * *h + b;
                }
            }
        }
        self.cache = Some(NormCache { xhat, inv_std, mode });
        out
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("batch norm backward before forward");
        let [n, c, ..] = grad.shape();
        let count = (n * grad.plane_len()) as f64;
        let mut gin = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for i in 0..n {
                sum_g += crate::conv::sum_f64(grad.channel(i, ch));
                sum_gx += crate::conv::dot_f64(grad.channel(i, ch), cache.xhat.channel(i, ch));
            }
            self.beta.grad[ch] += sum_g as f32;
            self.gamma.grad[ch] += sum_gx as f32;
            let gs = self.gamma.value[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let mg = (sum_g / count) as f32;
                    let mgx = (sum_gx / count) as f32;
                    for i in 0..n {
                        let g = grad.channel(i, ch);
                        let xh = cache.xhat.channel(i, ch);
                        for ((d, gv), h) in gin.channel_mut(i, ch).iter_mut().zip(g).zip(xh) {
                            *d = gs * (*gv - mg - *h * mgx);
                        }
                    }
                }
                Mode::Eval => {
                    for i in 0..n {
                        for (d, gv) in gin.channel_mut(i, ch).iter_mut().zip(grad.channel(i, ch)) {
                            *d = gs * *gv;
                        }
                    }
                }
            }
        }
        gin
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Parameterized for BatchNorm3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}
