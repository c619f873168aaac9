//! Independent reference implementations shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use brainage::evalmaps::PADMap;
use brainage::interpret::{OcclusionSpec, ScalarModel};
use brainage::loss::{combined_loss, combined_loss_with_grad, LossInputs, LossTargets, LossWeightSchedule};
use brainage::net::TaskSet;
use brainage::regional::RegionAtlas;
use brainage::volume::{BrainMask, Volume};
use brainage::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn naive_dice_loss(probs: &[Vec<Vec<f64>>], truth: &[&[u8]]) -> f64 {
    let mut per_sample = Vec::new();
    for (p, t) in probs.iter().zip(truth) {
        let mut dices = Vec::new();
        for c in 1..p.len() {
            let mut inter = 0.0;
            let mut a = 0.0;
            let mut b = 0.0;
            for j in 0..t.len() {
                let y = if t[j] as usize == c { 1.0 } else { 0.0 };
                inter += p[c][j] * y;
                a += p[c][j];
                b += y;
            }
            dices.push(if a + b == 0.0 { 1.0 } else { 2.0 * inter / (a + b) });
        }
        per_sample.push(dices.iter().sum::<f64>() / dices.len() as f64);
    }
    1.0 - per_sample.iter().sum::<f64>() / per_sample.len() as f64
}

pub fn naive_mae_voxel(pred: &[Vec<f64>], truth: &[Vec<f64>], masks: &[BrainMask]) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        let mut s = 0.0;
        let mut k = 0;
        for j in 0..pred[i].len() {
            if masks[i].data()[j] {
                s += (pred[i][j] - truth[i][j]).abs();
                k += 1;
            }
        }
        total += s / k as f64;
    }
    total / pred.len() as f64
}

pub fn naive_mae_global(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64
}

pub fn random_probs(rng: &mut ChaCha8Rng, classes: usize, n: usize) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = (0..classes).map(|_| (0..n).map(|_| rng.gen_range(0.01..1.0)).collect()).collect();
    let mut out = raw.clone();
    for j in 0..n {
        let s: f64 = raw.iter().map(|c| c[j]).sum();
        for c in 0..classes {
            out[c][j] = raw[c][j] / s;
        }
    }
    out
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> BrainMask {
    let mut d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
    d[rng.gen_range(0..n)] = true;
    BrainMask::new([n, 1, 1], d).unwrap()
}

pub fn loss_toy(rng: &mut ChaCha8Rng, batch: usize, n: usize, classes: usize) -> (LossInputs, LossTargets) {
    let inputs = LossInputs {
        voxel: (0..batch).map(|_| (0..n).map(|_| rng.gen_range(18.0..88.0)).collect()).collect(),
        seg_logits: Some(
            (0..batch)
                .map(|_| (0..classes).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect())
                .collect(),
        ),
        global: Some((0..batch).map(|_| rng.gen_range(18.0..88.0)).collect()),
    };
    let targets = LossTargets {
        voxel: (0..batch).map(|_| (0..n).map(|_| rng.gen_range(18.0..88.0)).collect()).collect(),
        masks: (0..batch).map(|_| random_mask(rng, n)).collect(),
        labels: (0..batch).map(|_| (0..n).map(|_| rng.gen_range(0..classes as u8)).collect()).collect(),
        global: (0..batch).map(|_| rng.gen_range(18.0..88.0)).collect(),
    };
    (inputs, targets)
}

/// Worst relative error of the analytic loss gradient against central differences (step 1e-3), every coordinate.
pub fn max_gradient_error(ts: TaskSet, epoch: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, targets) = loss_toy(&mut rng, 2, 64, 4);
    let sched = LossWeightSchedule::default();
    let (_, g) = combined_loss_with_grad(&inputs, &targets, ts, &sched, epoch).unwrap();
    let f = |x: &LossInputs| combined_loss(x, &targets, ts, &sched, epoch).unwrap().total;
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut check = |fd: f64, an: f64| {
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    };
    for i in 0..2 {
        for j in 0..64 {
            let mut p = inputs.clone();
            p.voxel[i][j] += h;
            let mut m = inputs.clone();
            m.voxel[i][j] -= h;
            check((f(&p) - f(&m)) / (2.0 * h), g.voxel[i][j]);
            for c in 0..4 {
                let mut p = inputs.clone();
                p.seg_logits.as_mut().unwrap()[i][c][j] += h;
                let mut m = inputs.clone();
                m.seg_logits.as_mut().unwrap()[i][c][j] -= h;
                let an = g.seg_logits.as_ref().map_or(0.0, |s| s[i][c][j]);
                check((f(&p) - f(&m)) / (2.0 * h), an);
            }
        }
        let mut p = inputs.clone();
        p.global.as_mut().unwrap()[i] += h;
        let mut m = inputs.clone();
        m.global.as_mut().unwrap()[i] -= h;
        let an = g.global.as_ref().map_or(0.0, |s| s[i]);
        check((f(&p) - f(&m)) / (2.0 * h), an);
    }
    worst
}

/// Per-region (count, mean) over mask ∩ region by explicit x/y/z loops.
pub fn naive_regional(pad: &PADMap, atlas: &RegionAtlas) -> BTreeMap<u8, (usize, f64)> {
    let [dx, dy, dz] = pad.dims;
    let mut acc: BTreeMap<u8, (usize, f64)> = atlas.regions().keys().map(|&c| (c, (0, 0.0))).collect();
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let i = x + dx * (y + dy * z);
                let code = atlas.labels().get(x, y, z);
                if code != 0 && pad.mask.data()[i] {
                    let e = acc.get_mut(&code).unwrap();
                    e.0 += 1;
                    e.1 += pad.data[i];
                }
            }
        }
    }
    acc.into_iter()
        .map(|(c, (n, s))| (c, (n, if n > 0 { s / n as f64 } else { f64::NAN })))
        .collect()
}

/// Occlusion map by direct loops over cuboid origins (z, then y, then x), averaging overlaps.
pub fn naive_occlusion(model: &mut dyn ScalarModel, input: &Volume, spec: &OcclusionSpec) -> Result<Vec<f32>> {
    let d = input.dims();
    let base = model.predict(input)?;
    let origins = |a: usize| {
        let last = d[a] - spec.size[a];
        let mut v = Vec::new();
        let mut p = 0;
        while p <= last {
            v.push(p);
            p += spec.stride[a];
        }
        if *v.last().unwrap() != last {
            v.push(last);
        }
        v
    };
    let mut sum = vec![0.0f64; input.len()];
    let mut cnt = vec![0u32; input.len()];
    for &oz in &origins(2) {
        for &oy in &origins(1) {
            for &ox in &origins(0) {
                let mut data = input.data().to_vec();
                let mut cells = Vec::new();
                for z in oz..oz + spec.size[2] {
                    for y in oy..oy + spec.size[1] {
                        for x in ox..ox + spec.size[0] {
                            let i = x + d[0] * (y + d[1] * z);
                            data[i] = spec.fill_value;
                            cells.push(i);
                        }
                    }
                }
                let delta = model.predict(&input.with_data(data))? - base;
                for i in cells {
                    sum[i] += delta;
                    cnt[i] += 1;
                }
            }
        }
    }
    Ok(sum
        .iter()
        .zip(&cnt)
        .map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 0.0 })
        .collect())
}

/// Two-sided signed-rank p by listing every one of the 2ⁿ sign assignments of the ranks.
pub fn brute_force_wilcoxon_p(diffs: &[f64]) -> f64 {
    let d: Vec<f64> = diffs.iter().copied().filter(|&v| v != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for pattern in 0u32..(1 << n) {
        let w: f64 = (0..n).filter(|&i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
}

/// `y = w·x + b`.
pub struct LinearModel {
    pub w: Vec<f32>,
    pub b: f64,
}

impl ScalarModel for LinearModel {
    fn predict(&mut self, x: &Volume) -> Result<f64> {
        Ok(self.b + self.w.iter().zip(x.data()).map(|(&w, &v)| w as f64 * v as f64).sum::<f64>())
    }

    fn input_gradient(&mut self, x: &Volume) -> Result<(f64, Vec<f32>)> {
        Ok((self.predict(x)?, self.w.clone()))
    }
}

/// Every file under `a` equals the same relative file under `b`, and the trees list the same files.
pub fn assert_same_tree(a: &Path, b: &Path) {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<std::path::PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    walk(a, a, &mut fa);
    walk(b, b, &mut fb);
    fa.sort();
    fb.sort();
    assert_eq!(fa, fb, "file lists differ");
    for f in &fa {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(x == y, "{} differs", f.display());
    }
}

/// Files present in both trees whose bytes differ, plus files present in only one.
pub fn tree_differences(a: &Path, b: &Path) -> Vec<String> {
    let r = std::panic::catch_unwind(|| assert_same_tree(a, b));
    match r {
        Ok(()) => Vec::new(),
        Err(e) => vec![e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default()],
    }
}
