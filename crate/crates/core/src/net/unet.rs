use nn3d::{concat_channels, split_channels, Conv3d, GlobalAvgPool, Linear, MaxPool2, Mode, Param, Parameterized, Relu, Resize, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{tensor_dims, ConvUnit, MultitaskOutput, NetConfig};
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Two-layer regressor on pooled bottleneck features.
#[derive(Clone, Debug)]
struct GlobalHead {
    pool: GlobalAvgPool,
    fc1: Linear,
    relu: Relu,
    fc2: Linear,
}

/// Batched raw outputs. Ages are already in years.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    /// `[n, 1, d0, d1, d2]`
    pub voxel: Tensor,
    /// `[n, classes, d0, d1, d2]` logits
    pub seg: Option<Tensor>,
    pub global: Option<Vec<f32>>,
}

/// Loss gradients with respect to each output of [`NetOutput`].
#[derive(Clone, Debug)]
pub struct NetGrads {
    pub voxel: Tensor,
    pub seg: Option<Tensor>,
    pub global: Option<Vec<f32>>,
}

impl NetOutput {
    pub fn batch(&self) -> usize {
        self.voxel.batch()
    }

    /// Splits sample `i` into a per-sample output.
    pub fn sample(&self, i: usize) -> MultitaskOutput {
        let dims = tensor_dims(&self.voxel);
        MultitaskOutput {
            voxel_age: Volume::with_nan_allowed(dims, [1.0; 3], self.voxel.sample(i).to_vec())
                .expect("output dims are valid"),
            global_age: self.global.as_ref().map(|g| g[i] as f64),
            seg_logits: self.seg.as_ref().map(|s| {
                let p = s.plane_len();
                s.sample(i).chunks(p).map(|c| c.to_vec()).collect()
            }),
        }
    }

    pub fn samples(&self) -> Vec<MultitaskOutput> {
        (0..self.batch()).map(|i| self.sample(i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.voxel.is_finite()
            && self.seg.as_ref().is_none_or(|s| s.is_finite())
            && self.global.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Encoder-decoder with skip connections at every level and up to three heads.
#[derive(Clone, Debug)]
pub struct UNet {
    cfg: NetConfig,
    enc: Vec<[ConvUnit; 2]>,
    pools: Vec<MaxPool2>,
    /// 1×1 channel reduction applied before upsampling, per decoder level.
    reduce: Vec<Conv3d>,
    ups: Vec<Resize>,
    dec: Vec<[ConvUnit; 2]>,
    voxel_head: Conv3d,
    seg_head: Option<Conv3d>,
    global_head: Option<GlobalHead>,
}

impl UNet {
    /// Parameters are a deterministic function of `(cfg, seed)`.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = cfg.channels();
        let bn = cfg.batch_norm;
        let mut enc = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let cin = if l == 0 { cfg.in_channels } else { ch[l - 1] };
            enc.push([
                ConvUnit::new(cin, ch[l], 3, bn, &mut rng),
                ConvUnit::new(ch[l], ch[l], 3, bn, &mut rng),
            ]);
        }
        let mut reduce = Vec::new();
        let mut dec = Vec::new();
        for l in 0..cfg.depth - 1 {
            reduce.push(Conv3d::new(ch[l + 1], ch[l], 1, false, &mut rng));
            dec.push([
                ConvUnit::new(2 * ch[l], ch[l], 3, bn, &mut rng),
                ConvUnit::new(ch[l], ch[l], 3, bn, &mut rng),
            ]);
        }
        let voxel_head = Conv3d::new(ch[0], 1, 1, true, &mut rng);
        let seg_head = cfg
            .task_set
            .segmentation()
            .then(|| Conv3d::new(ch[0], cfg.seg_classes, 1, true, &mut rng));
        let global_head = cfg.task_set.global_age().then(|| GlobalHead {
            pool: GlobalAvgPool::new(),
            fc1: Linear::new(ch[cfg.depth - 1], cfg.global_hidden, &mut rng),
            relu: Relu::new(),
            fc2: Linear::new(cfg.global_hidden, 1, &mut rng),
        });
        Ok(Self {
            pools: (0..cfg.depth - 1).map(|_| MaxPool2::new()).collect(),
            ups: (0..cfg.depth - 1).map(|_| Resize::new([0; 3])).collect(),
            cfg,
            enc,
            reduce,
            dec,
            voxel_head,
            seg_head,
            global_head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Whether each head exists: (voxel, global, segmentation).
    pub fn heads(&self) -> (bool, bool, bool) {
        (true, self.global_head.is_some(), self.seg_head.is_some())
    }

    /// Batched forward pass on `[n, in_channels, d0, d1, d2]`. Caches activations for [`UNet::backward`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<NetOutput> {
        if x.channels() != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.cfg.in_channels,
                x.channels()
            )));
        }
        self.cfg.check_input(tensor_dims(x))?;
        let depth = self.cfg.depth;
        let mut skips = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for l in 0..depth {
            if l > 0 {
                h = self.pools[l - 1].forward(&h);
            }
            h = self.enc[l][0].forward(&h, mode);
            h = self.enc[l][1].forward(&h, mode);
            if l < depth - 1 {
                skips.push(h.clone());
            }
        }
        let global = self.global_head.as_mut().map(|g| {
            let p = g.pool.forward(&h);
            let a = g.relu.forward(&g.fc1.forward(&p));
            let o = g.fc2.forward(&a);
            o.data()
                .iter()
                .map(|&v| (self.cfg.age_offset + self.cfg.age_scale * v as f64) as f32)
                .collect::<Vec<f32>>()
        });
        for l in (0..depth - 1).rev() {
            let r = self.reduce[l].forward(&h);
            let [a, b, c] = skips[l].spatial();
            self.ups[l] = Resize::new([a, b, c]);
            let up = self.ups[l].forward(&r);
            let cat = concat_channels(&skips[l], &up);
            h = self.dec[l][0].forward(&cat, mode);
            h = self.dec[l][1].forward(&h, mode);
        }
        let mut voxel = self.voxel_head.forward(&h);
        let (off, sc) = (self.cfg.age_offset, self.cfg.age_scale);
        voxel
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = (off + sc * *v as f64) as f32);
        let seg = self.seg_head.as_mut().map(|s| s.forward(&h));
        Ok(NetOutput { voxel, seg, global })
    }

    /// Evaluation-mode forward on one volume.
    pub fn predict(&mut self, v: &Volume) -> Result<MultitaskOutput> {
        let out = self.forward(&super::volume_to_tensor(v), Mode::Eval)?;
        self.clear_cache();
        Ok(out.sample(0))
    }

    /// Back-propagates output gradients into parameter gradients (accumulating).
    pub fn backward(&mut self, grads: &NetGrads) {
        let sc = self.cfg.age_scale as f32;
        let mut gv = grads.voxel.clone();
        gv.scale(sc);
        let mut g = self.voxel_head.backward(&gv);
        if let (Some(head), Some(gs)) = (self.seg_head.as_mut(), grads.seg.as_ref()) {
            g.add_assign(&head.backward(gs));
        }
        let depth = self.cfg.depth;
        let mut skip_grads: Vec<Tensor> = Vec::with_capacity(depth - 1);
        for l in 0..depth - 1 {
            let gd = self.dec[l][1].backward(&g, true).unwrap();
            let gcat = self.dec[l][0].backward(&gd, true).unwrap();
            let c = skip_channels(&self.cfg, l);
            let (gskip, gup) = split_channels(&gcat, c);
            skip_grads.push(gskip);
            g = self.reduce[l].backward(&self.ups[l].backward(&gup));
        }
        if let (Some(head), Some(gg)) = (self.global_head.as_mut(), grads.global.as_ref()) {
            let n = gg.len();
            let go = Tensor::vector(n, 1, gg.iter().map(|v| v * sc).collect());
            let ga = head.fc2.backward(&go);
            let gp = head.fc1.backward(&head.relu.backward(&ga));
            g.add_assign(&head.pool.backward(&gp));
        }
        for l in (0..depth).rev() {
            let g1 = self.enc[l][1].backward(&g, true).unwrap();
            match self.enc[l][0].backward(&g1, l > 0) {
                Some(gin) => {
                    g = self.pools[l - 1].backward(&gin);
                    g.add_assign(&skip_grads[l - 1]);
                }
                None => break,
            }
        }
    }

    /// Drops cached activations.
    pub fn clear_cache(&mut self) {
        for u in self.enc.iter_mut().chain(self.dec.iter_mut()).flatten() {
            u.clear_cache();
        }
        for c in self.reduce.iter_mut() {
            c.clear_cache();
        }
        self.pools.iter_mut().for_each(|p| *p = MaxPool2::new());
        self.voxel_head.clear_cache();
        if let Some(s) = self.seg_head.as_mut() {
            s.clear_cache();
        }
    }

    /// Sets the constant added to both age heads.
    pub fn set_age_offset(&mut self, age: f64) {
        self.cfg.age_offset = age;
    }
}

fn skip_channels(cfg: &NetConfig, l: usize) -> usize {
    cfg.channels()[l]
}

impl Parameterized for UNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for u in self.enc.iter_mut().flatten() {
            u.visit_params(f);
        }
        for (r, d) in self.reduce.iter_mut().zip(self.dec.iter_mut()) {
            r.visit_params(f);
            for u in d.iter_mut() {
                u.visit_params(f);
            }
        }
        self.voxel_head.visit_params(f);
        if let Some(s) = self.seg_head.as_mut() {
            s.visit_params(f);
        }
        if let Some(g) = self.global_head.as_mut() {
            g.fc1.visit_params(f);
            g.fc2.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        for u in self.enc.iter_mut().chain(self.dec.iter_mut()).flatten() {
            u.visit_buffers(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{param_checksum, TaskSet};

    fn tiny(ts: TaskSet) -> NetConfig {
        NetConfig {
            base_channels: 2,
            depth: 3,
            task_set: ts,
            global_hidden: 4,
            ..NetConfig::default()
        }
    }

    fn input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data = (0..n * d * d * d)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32) - 0.5
            })
            .collect();
        Tensor::from_vec([n, 1, d, d, d], data)
    }

    #[test]
    fn heads_follow_task_set() {
        for ts in TaskSet::ALL {
            let mut m = UNet::new(tiny(ts), 1).unwrap();
            assert_eq!(m.heads(), (true, ts.global_age(), ts.segmentation()));
            let out = m.forward(&input(1, 8, 1), Mode::Eval).unwrap();
            assert_eq!(out.seg.is_some(), ts.segmentation());
            assert_eq!(out.global.is_some(), ts.global_age());
            assert_eq!(out.voxel.shape(), [1, 1, 8, 8, 8]);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut a = UNet::new(tiny(TaskSet::SGV), 3).unwrap();
        let mut b = UNet::new(tiny(TaskSet::SGV), 3).unwrap();
        let mut c = UNet::new(tiny(TaskSet::SGV), 4).unwrap();
        assert_eq!(param_checksum(&mut a), param_checksum(&mut b));
        assert_ne!(param_checksum(&mut a), param_checksum(&mut c));
    }

    #[test]
    fn eval_forward_is_pure_and_batch_independent() {
        let mut m = UNet::new(tiny(TaskSet::SGV), 2).unwrap();
        let x = input(1, 8, 9);
        let xx = Tensor::stack(&[x.clone(), x.clone()]);
        let o = m.forward(&xx, Mode::Eval).unwrap();
        assert_eq!(o.voxel.sample(0), o.voxel.sample(1));
        let o1 = m.forward(&x, Mode::Eval).unwrap();
        let o2 = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(o1, o2);
        let z = m.forward(&Tensor::zeros([1, 1, 8, 8, 8]), Mode::Eval).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut m = UNet::new(tiny(TaskSet::V), 0).unwrap();
        assert!(matches!(m.forward(&input(1, 6, 0), Mode::Eval), Err(Error::Config(_))));
    }

    /// Shifts every bias-like parameter off zero so no pre-activation sits exactly on a ReLU kink.
    fn jitter_biases(m: &mut UNet) {
        let mut k = 0u32;
        m.visit_params(&mut |p| {
            if p.len() <= 8 {
                for v in p.value.iter_mut() {
                    k += 1;
                    *v += 0.05 * ((k * 7919 % 13) as f32 / 13.0 - 0.5);
                }
            }
        });
    }

    /// Central differences of L = Σ gv·voxel + Σ gs·seg + Σ gg·global.
    fn fd_pairs(mode: Mode, batch_norm: bool) -> Vec<(f64, f64, String)> {
        let cfg = NetConfig {
            batch_norm,
            ..tiny(TaskSet::SGV)
        };
        let mut m = UNet::new(cfg, 5).unwrap();
        jitter_biases(&mut m);
        let x = input(2, 8, 3);
        if mode == Mode::Eval {
            // bring running statistics close to the batch statistics
            for _ in 0..60 {
                m.forward(&x, Mode::Train).unwrap();
            }
        }
        let out = m.forward(&x, mode).unwrap();
        let gv = input(2, 8, 11);
        let mut gs = Tensor::zeros(out.seg.as_ref().unwrap().shape());
        for (i, v) in gs.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f32 / 11.0 - 0.5;
        }
        let gg = vec![0.7f32, -0.4];
        let objective = |o: &NetOutput| -> f64 {
            let mut s = 0.0f64;
            for (a, b) in o.voxel.data().iter().zip(gv.data()) {
                s += *a as f64 * *b as f64;
            }
            for (a, b) in o.seg.as_ref().unwrap().data().iter().zip(gs.data()) {
                s += *a as f64 * *b as f64;
            }
            for (a, b) in o.global.as_ref().unwrap().iter().zip(&gg) {
                s += *a as f64 * *b as f64;
            }
            s
        };
        m.zero_grad();
        m.backward(&NetGrads {
            voxel: gv.clone(),
            seg: Some(gs.clone()),
            global: Some(gg.clone()),
        });
        let mut analytic = Vec::new();
        m.visit_params(&mut |p| analytic.push(p.grad.clone()));
        let mut saved = Vec::new();
        m.visit_buffers(&mut |b| saved.push(b.clone()));
        let mut pairs = Vec::new();
        let eps = 1e-3f32;
        for pi in 0..analytic.len() {
            let len = analytic[pi].len();
            for j in [0, len / 2, len - 1] {
                let probe = |delta: f32, m: &mut UNet| {
                    let mut k = 0;
                    m.visit_params(&mut |p| {
                        if k == pi {
                            p.value[j] += delta;
                        }
                        k += 1;
                    });
                    let o = m.forward(&x, mode).unwrap();
                    let mut it = saved.clone().into_iter();
                    m.visit_buffers(&mut |b| *b = it.next().unwrap());
                    objective(&o)
                };
                let plus = probe(eps, &mut m);
                let minus = probe(-2.0 * eps, &mut m);
                probe(eps, &mut m);
                pairs.push(((plus - minus) / (2.0 * eps as f64), analytic[pi][j] as f64, format!("param {pi}[{j}]")));
            }
        }
        pairs
    }

    /// ReLU and max-pool kinks make a few central differences unreliable, so the check is
    /// on the median relative error plus a cap on the fraction of outliers.
    fn assert_close(pairs: &[(f64, f64, String)], median_rel: f64, outlier_rel: f64, max_outliers: f64) {
        let mut rel: Vec<f64> = pairs
            .iter()
            .map(|(fd, an, _)| (fd - an).abs() / fd.abs().max(an.abs()).max(0.05))
            .collect();
        let outliers: Vec<_> = pairs.iter().zip(&rel).filter(|(_, &r)| r > outlier_rel).map(|(p, _)| p).collect();
        rel.sort_by(f64::total_cmp);
        let med = rel[rel.len() / 2];
        assert!(med <= median_rel, "median relative error {med}");
        assert!(
            outliers.len() as f64 <= max_outliers * pairs.len() as f64,
            "{} of {} outliers: {outliers:?}",
            outliers.len(),
            pairs.len()
        );
    }

    #[test]
    fn backward_matches_finite_differences_eval_mode() {
        assert_close(&fd_pairs(Mode::Eval, true), 1e-2, 0.2, 0.1);
        assert_close(&fd_pairs(Mode::Eval, false), 1e-2, 0.2, 0.1);
    }

    #[test]
    fn backward_matches_finite_differences_train_mode() {
        assert_close(&fd_pairs(Mode::Train, true), 1e-2, 0.2, 0.1);
    }
}
