use nn3d::{BatchNorm3d, Conv3d, GlobalAvgPool, Linear, MaxPool2, Mode, Param, Parameterized, Relu, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tensor_dims, ConvUnit};
use crate::error::{Error, Result};

fn default_final() -> usize {
    16
}

/// Fully convolutional global-age regressor: pooled conv blocks, a 1×1 conv block, global pooling, linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorConfig {
    /// Output channels of each 3×3×3 block; every block halves the resolution.
    pub channels: Vec<usize>,
    /// Channels of the final 1×1 block whose maps are exposed for Grad-CAM.
    #[serde(default = "default_final")]
    pub final_channels: usize,
    #[serde(default)]
    pub age_offset: f64,
    #[serde(default = "super::default_scale")]
    pub age_scale: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 32],
            final_channels: 16,
            age_offset: 0.0,
            age_scale: 1.0,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) || self.final_channels == 0 {
            return Err(Error::Config("regressor channel list must be nonempty and positive".into()));
        }
        if !(self.age_scale > 0.0) || !self.age_offset.is_finite() {
            return Err(Error::Config("age_scale must be positive and age_offset finite".into()));
        }
        Ok(())
    }

    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << self.channels.len();
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Config(format!(
                "input extents {dims:?} are not divisible by {f} ({} pooled blocks)",
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// conv3 → BN → max-pool → ReLU
#[derive(Clone, Debug)]
struct PooledBlock {
    conv: Conv3d,
    bn: BatchNorm3d,
    pool: MaxPool2,
    relu: Relu,
}

#[derive(Clone, Debug)]
pub struct GlobalRegressor {
    cfg: RegressorConfig,
    blocks: Vec<PooledBlock>,
    last: ConvUnit,
    pool: GlobalAvgPool,
    head: Linear,
    features: Option<Tensor>,
}

impl GlobalRegressor {
    pub fn new(cfg: RegressorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 1;
        let mut blocks = Vec::new();
        for &c in &cfg.channels {
            blocks.push(PooledBlock {
                conv: Conv3d::new(cin, c, 3, false, &mut rng),
                bn: BatchNorm3d::new(c),
                pool: MaxPool2::new(),
                relu: Relu::new(),
            });
            cin = c;
        }
        let last = ConvUnit::new(cin, cfg.final_channels, 1, true, &mut rng);
        let head = Linear::new(cfg.final_channels, 1, &mut rng);
        Ok(Self {
            cfg,
            blocks,
            last,
            pool: GlobalAvgPool::new(),
            head,
            features: None,
        })
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.cfg
    }

    pub fn set_age_offset(&mut self, age: f64) {
        self.cfg.age_offset = age;
    }

    /// Zeroes the final linear layer so the raw output is identically zero.
    pub fn zero_head(&mut self) {
        self.head.weight.value.iter_mut().for_each(|w| *w = 0.0);
        self.head.bias.value.iter_mut().for_each(|w| *w = 0.0);
    }

    pub fn head_mut(&mut self) -> &mut Linear {
        &mut self.head
    }

    /// Forward on `[n, 1, d0, d1, d2]`; returns one age per sample.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Vec<f32>> {
        if x.channels() != 1 {
            return Err(Error::Shape(format!("expected 1 input channel, got {}", x.channels())));
        }
        self.cfg.check_input(tensor_dims(x))?;
        let mut h = x.clone();
        for b in self.blocks.iter_mut() {
            let y = b.conv.forward(&h);
            let y = b.bn.forward(&y, mode);
            let y = b.pool.forward(&y);
            h = b.relu.forward(&y);
        }
        let f = self.last.forward(&h, mode);
        let p = self.pool.forward(&f);
        let o = self.head.forward(&p);
        self.features = Some(f);
        Ok(o.data()
            .iter()
            .map(|&v| (self.cfg.age_offset + self.cfg.age_scale * v as f64) as f32)
            .collect())
    }

    /// Final convolutional feature maps from the last forward pass, `[n, final_channels, ...]`.
    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    /// Gradient of the outputs w.r.t. the final feature maps, without touching parameters.
    pub fn feature_gradient(&self, grad_out: &[f32]) -> Result<Tensor> {
        let f = self
            .features
            .as_ref()
            .ok_or_else(|| Error::Capability("feature maps requested before a forward pass".into()))?;
        let [n, c, ..] = f.shape();
        let p = f.plane_len() as f32;
        let sc = self.cfg.age_scale as f32;
        let mut g = Tensor::zeros(f.shape());
        for i in 0..n {
            for k in 0..c {
                let v = grad_out[i] * sc * self.head.weight.value[k] / p;
                g.channel_mut(i, k).iter_mut().for_each(|x| *x = v);
            }
        }
        Ok(g)
    }

    /// Back-propagates output gradients; accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &[f32]) -> Tensor {
        let n = grad_out.len();
        let sc = self.cfg.age_scale as f32;
        let go = Tensor::vector(n, 1, grad_out.iter().map(|g| g * sc).collect());
        let gp = self.head.backward(&go);
        let gf = self.pool.backward(&gp);
        let mut g = self.last.backward(&gf, true).unwrap();
        for b in self.blocks.iter_mut().rev() {
            let y = b.relu.backward(&g);
            let y = b.pool.backward(&y);
            let y = b.bn.backward(&y);
            g = b.conv.backward(&y);
        }
        g
    }

    /// Resolution of the exposed feature maps for an input of `dims` (x fastest).
    pub fn feature_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let f = 1usize << self.cfg.channels.len();
        [dims[0] / f, dims[1] / f, dims[2] / f]
    }
}

impl Parameterized for GlobalRegressor {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in self.blocks.iter_mut() {
            b.conv.visit_params(f);
            b.bn.visit_params(f);
        }
        self.last.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        for b in self.blocks.iter_mut() {
            b.bn.visit_buffers(f);
        }
        self.last.visit_buffers(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RegressorConfig {
        RegressorConfig {
            channels: vec![2, 4],
            final_channels: 3,
            ..RegressorConfig::default()
        }
    }

    fn ramp(d: usize) -> Tensor {
        Tensor::from_vec([1, 1, d, d, d], (0..d * d * d).map(|i| ((i * 13) % 7) as f32 * 0.2 - 0.5).collect())
    }

    #[test]
    fn scalar_output_and_feature_shape() {
        let mut m = GlobalRegressor::new(cfg(), 1).unwrap();
        let out = m.forward(&ramp(16), Mode::Eval).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(m.features().unwrap().shape(), [1, 3, 4, 4, 4]);
        assert_eq!(m.feature_dims([16, 16, 16]), [4, 4, 4]);
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut m = GlobalRegressor::new(cfg(), 1).unwrap();
        m.zero_head();
        for s in 0..3 {
            let mut x = ramp(16);
            x.scale(s as f32 + 0.5);
            assert_eq!(m.forward(&x, Mode::Eval).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut m = GlobalRegressor::new(cfg(), 2).unwrap();
        // distinct values so no max-pool window starts on a tie
        let mut s = 3u64;
        let x = Tensor::from_vec(
            [1, 1, 8, 8, 8],
            (0..512)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 40) as f32 / (1u64 << 24) as f32 - 0.5
                })
                .collect(),
        );
        for _ in 0..60 {
            m.forward(&x, Mode::Train).unwrap();
        }
        m.forward(&x, Mode::Eval).unwrap();
        let g = m.backward(&[1.0]);
        // max-pool and ReLU kinks spoil a few probes; require most to agree
        let mut good = 0;
        let probes: Vec<usize> = (0..512).step_by(17).collect();
        for &idx in &probes {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += 1e-3;
            xm.data_mut()[idx] -= 1e-3;
            let fp = m.forward(&xp, Mode::Eval).unwrap()[0] as f64;
            let fm = m.forward(&xm, Mode::Eval).unwrap()[0] as f64;
            let fd = (fp - fm) / 2e-3;
            let an = g.data()[idx] as f64;
            if (fd - an).abs() <= 2e-2 * fd.abs().max(an.abs()).max(1e-2) {
                good += 1;
            }
        }
        assert!(good * 10 >= probes.len() * 9, "{good} of {} probes agree", probes.len());
    }
}
