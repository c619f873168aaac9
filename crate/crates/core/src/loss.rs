//! Multitask loss: soft Dice over tissue classes, voxel-age MAE, global-age MAE, and the
//! epoch-dependent weighting between them. Label-noise injection lives here too.
//!
//! Everything is computed in f64; network outputs are widened at the boundary.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use nn3d::Tensor;

use crate::error::{Error, Result};
use crate::net::{NetGrads, NetOutput, TaskSet};
use crate::volume::BrainMask;

/// Loss weights `(w_s, w_g, w_v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w_s: f64,
    pub w_g: f64,
    pub w_v: f64,
}

impl Weights {
    pub const fn new(w_s: f64, w_g: f64, w_v: f64) -> Self {
        Self { w_s, w_g, w_v }
    }
}

/// Epochs `start..end` use `weights`; the last segment also covers `end` itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSegment {
    pub start: usize,
    pub end: usize,
    pub w_s: f64,
    pub w_g: f64,
    pub w_v: f64,
}

impl ScheduleSegment {
    pub fn weights(&self) -> Weights {
        Weights::new(self.w_s, self.w_g, self.w_v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ScheduleSegment>", into = "Vec<ScheduleSegment>")]
pub struct LossWeightSchedule {
    segments: Vec<ScheduleSegment>,
}

/// Full-scale schedule boundaries and weights.
const TABLE: [(usize, usize, Weights); 3] = [
    (0, 50, Weights::new(80.0, 1.0, 1.0)),
    (50, 130, Weights::new(40.0, 1.0, 1.0)),
    (130, 300, Weights::new(15.0, 0.7, 1.3)),
];

impl Default for LossWeightSchedule {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl LossWeightSchedule {
    pub fn new(segments: Vec<ScheduleSegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Schedule("schedule has no segments".into()));
        }
        if segments[0].start != 0 {
            return Err(Error::Schedule(format!("schedule starts at epoch {}, not 0", segments[0].start)));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.end <= s.start {
                return Err(Error::Schedule(format!("segment {i} has empty range [{}, {})", s.start, s.end)));
            }
            if let Some(next) = segments.get(i + 1) {
                if next.start != s.end {
                    return Err(Error::Schedule(format!(
                        "segments {i} and {} are not contiguous ({} vs {})",
                        i + 1,
                        s.end,
                        next.start
                    )));
                }
            }
            if ![s.w_s, s.w_g, s.w_v].iter().all(|w| w.is_finite() && *w >= 0.0) {
                return Err(Error::Schedule(format!("segment {i} has a negative or non-finite weight")));
            }
        }
        Ok(Self { segments })
    }

    /// The 300-epoch schedule: 80/40/15 segmentation weight.
    pub fn full_scale() -> Self {
        Self::scaled(300)
    }

    /// Full-scale boundaries rescaled proportionally to `total_epochs` (rounded).
    pub fn scaled(total_epochs: usize) -> Self {
        let total = total_epochs.max(TABLE.len());
        let mut segments = Vec::new();
        let mut start = 0;
        for (i, &(_, end, w)) in TABLE.iter().enumerate() {
            let end = if i + 1 == TABLE.len() {
                total
            } else {
                ((end as f64 * total as f64 / 300.0).round() as usize).clamp(start + 1, total - (TABLE.len() - 1 - i))
            };
            segments.push(ScheduleSegment {
                start,
                end,
                w_s: w.w_s,
                w_g: w.w_g,
                w_v: w.w_v,
            });
            start = end;
        }
        Self { segments }
    }

    pub fn segments(&self) -> &[ScheduleSegment] {
        &self.segments
    }

    /// Last epoch covered (inclusive).
    pub fn last_epoch(&self) -> usize {
        self.segments.last().unwrap().end
    }

    pub fn weights_at(&self, epoch: usize) -> Result<Weights> {
        let last = self.segments.len() - 1;
        for (i, s) in self.segments.iter().enumerate() {
            if epoch >= s.start && (epoch < s.end || (i == last && epoch == s.end)) {
                return Ok(s.weights());
            }
        }
        Err(Error::Schedule(format!(
            "epoch {epoch} is outside the schedule domain [0, {}]",
            self.last_epoch()
        )))
    }
}

impl TryFrom<Vec<ScheduleSegment>> for LossWeightSchedule {
    type Error = Error;
    fn try_from(v: Vec<ScheduleSegment>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LossWeightSchedule> for Vec<ScheduleSegment> {
    fn from(s: LossWeightSchedule) -> Self {
        s.segments
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "NoiseSpec::default_low")]
    pub low: f64,
    #[serde(default = "NoiseSpec::default_high")]
    pub high: f64,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            low: -2.0,
            high: 2.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    fn default_low() -> f64 {
        -2.0
    }
    fn default_high() -> f64 {
        2.0
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low < self.high) || !self.low.is_finite() || !self.high.is_finite() {
            return Err(Error::Validation(format!(
                "noise range [{}, {}] must be finite with low < high",
                self.low, self.high
            )));
        }
        Ok(())
    }

    /// Independent seed stream for one (epoch, sample) draw.
    pub fn for_draw(&self, epoch: usize, sample: usize) -> NoiseSpec {
        NoiseSpec {
            seed: mix(mix(self.seed ^ 0x6e6f697365, epoch as u64), sample as u64),
            ..*self
        }
    }
}

/// splitmix64 step over `a + b`.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(b.wrapping_mul(0x9e3779b97f4a7c15)).wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Adds i.i.d. `Uniform(low, high)` noise to every brain voxel; other voxels are copied.
pub fn inject_label_noise(truth: &[f64], mask: &BrainMask, spec: &NoiseSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if truth.len() != mask.data().len() {
        return Err(Error::Shape(format!(
            "label grid has {} voxels, mask has {}",
            truth.len(),
            mask.data().len()
        )));
    }
    let mut out = truth.to_vec();
    if !spec.enabled {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u = Uniform::new_inclusive(spec.low, spec.high);
    for (v, &m) in out.iter_mut().zip(mask.data()) {
        if m {
            *v += u.sample(&mut rng);
        }
    }
    Ok(out)
}

fn check_normalized(probs: &[Vec<f64>]) -> Result<()> {
    let n = probs[0].len();
    for i in 0..n {
        let s: f64 = probs.iter().map(|c| c[i]).sum();
        if (s - 1.0).abs() > 1e-3 {
            return Err(Error::Validation(format!(
                "class probabilities at voxel {i} sum to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Per-class soft Dice terms for one sample: returns `(intersection, |pred| + |truth|)` per foreground class.
fn dice_terms(probs: &[Vec<f64>], truth: &[u8]) -> Vec<(f64, f64)> {
    (1..probs.len())
        .map(|c| {
            let mut inter = 0.0;
            let mut sum = 0.0;
            for (p, &t) in probs[c].iter().zip(truth) {
                let y = (t as usize == c) as u8 as f64;
                inter += p * y;
                sum += p + y;
            }
            (inter, sum)
        })
        .collect()
}

fn dice_of(inter: f64, sum: f64) -> f64 {
    // a class absent from both prediction and truth counts as perfect overlap
    if sum == 0.0 {
        1.0
    } else {
        2.0 * inter / sum
    }
}

fn check_seg_shapes(probs: &[Vec<Vec<f64>>], truth: &[&[u8]]) -> Result<()> {
    if probs.is_empty() || probs.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} segmentation predictions for {} label grids",
            probs.len(),
            truth.len()
        )));
    }
    for (p, t) in probs.iter().zip(truth) {
        if p.len() < 2 || p.iter().any(|c| c.len() != t.len()) {
            return Err(Error::Shape("segmentation grids do not match the label grid".into()));
        }
        if let Some(&bad) = t.iter().find(|&&v| v as usize >= p.len()) {
            return Err(Error::Validation(format!("label {bad} has no matching class channel")));
        }
    }
    Ok(())
}

/// `1 − mean over batch of (mean over foreground classes of soft Dice)`.
///
/// `probs[i][c]` is the class-`c` probability grid of sample `i`; class 0 is background and excluded.
pub fn dice_loss(probs: &[Vec<Vec<f64>>], truth: &[&[u8]]) -> Result<f64> {
    check_seg_shapes(probs, truth)?;
    let mut total = 0.0;
    for (p, t) in probs.iter().zip(truth) {
        check_normalized(p)?;
        let terms = dice_terms(p, t);
        total += terms.iter().map(|&(i, s)| dice_of(i, s)).sum::<f64>() / terms.len() as f64;
    }
    Ok((1.0 - total / probs.len() as f64).clamp(0.0, 1.0))
}

/// Hard Dice over foreground classes, averaged over classes, for one label pair.
pub fn hard_dice(pred: &[u8], truth: &[u8], classes: usize) -> Result<f64> {
    if pred.len() != truth.len() || classes < 2 {
        return Err(Error::Shape("hard Dice needs equal-length grids and at least 2 classes".into()));
    }
    let mut acc = 0.0;
    for c in 1..classes as u8 {
        let mut inter = 0usize;
        let mut sum = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            inter += (p == c && t == c) as usize;
            sum += (p == c) as usize + (t == c) as usize;
        }
        acc += dice_of(inter as f64, sum as f64);
    }
    Ok(acc / (classes - 1) as f64)
}

fn check_voxel_shapes(pred: &[&[f64]], truth: &[&[f64]], masks: &[&BrainMask]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() || pred.len() != masks.len() {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} predictions, {} targets, {} masks",
            pred.len(),
            truth.len(),
            masks.len()
        )));
    }
    for ((p, t), m) in pred.iter().zip(truth).zip(masks) {
        if p.len() != t.len() || p.len() != m.data().len() {
            return Err(Error::Shape("voxel-age grids and mask differ in size".into()));
        }
        if m.count() == 0 {
            return Err(Error::Validation("brain mask has no voxels".into()));
        }
    }
    Ok(())
}

/// Mean over the batch of each sample's mean absolute error over its brain voxels.
pub fn mae_voxel(pred: &[&[f64]], truth: &[&[f64]], masks: &[&BrainMask]) -> Result<f64> {
    check_voxel_shapes(pred, truth, masks)?;
    let mut total = 0.0;
    for ((p, t), m) in pred.iter().zip(truth).zip(masks) {
        let mut s = 0.0;
        for ((a, b), &keep) in p.iter().zip(t.iter()).zip(m.data()) {
            if keep {
                s += (a - b).abs();
            }
        }
        total += s / m.count() as f64;
    }
    Ok(total / pred.len() as f64)
}

pub fn mae_global(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} global predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Batch of model outputs widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct LossInputs {
    /// Per-sample voxel-age grids.
    pub voxel: Vec<Vec<f64>>,
    /// Per-sample, per-class logit grids.
    pub seg_logits: Option<Vec<Vec<Vec<f64>>>>,
    pub global: Option<Vec<f64>>,
}

impl LossInputs {
    pub fn from_net_output(o: &NetOutput) -> Self {
        let n = o.voxel.batch();
        let widen = |xs: &[f32]| xs.iter().map(|&v| v as f64).collect::<Vec<_>>();
        Self {
            voxel: (0..n).map(|i| widen(o.voxel.channel(i, 0))).collect(),
            seg_logits: o.seg.as_ref().map(|s| {
                (0..n)
                    .map(|i| (0..s.channels()).map(|c| widen(s.channel(i, c))).collect())
                    .collect()
            }),
            global: o.global.as_ref().map(|g| widen(g)),
        }
    }

    pub fn batch(&self) -> usize {
        self.voxel.len()
    }
}

/// Ground truth for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    /// Per-sample voxel-age labels (possibly noisy).
    pub voxel: Vec<Vec<f64>>,
    pub masks: Vec<BrainMask>,
    pub labels: Vec<Vec<u8>>,
    /// Chronological ages.
    pub global: Vec<f64>,
}

/// Gradients of the total loss with respect to each prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub voxel: Vec<Vec<f64>>,
    pub seg_logits: Option<Vec<Vec<Vec<f64>>>>,
    pub global: Option<Vec<f64>>,
}

impl LossGrads {
    /// Narrows to f32 tensors laid out like `out`.
    pub fn to_net_grads(&self, out: &NetOutput) -> NetGrads {
        let mut voxel = Tensor::zeros(out.voxel.shape());
        for (i, g) in self.voxel.iter().enumerate() {
            for (d, &v) in voxel.channel_mut(i, 0).iter_mut().zip(g) {
                *d = v as f32;
            }
        }
        let seg = match (&self.seg_logits, &out.seg) {
            (Some(gs), Some(s)) => {
                let mut t = Tensor::zeros(s.shape());
                for (i, per_class) in gs.iter().enumerate() {
                    for (c, g) in per_class.iter().enumerate() {
                        for (d, &v) in t.channel_mut(i, c).iter_mut().zip(g) {
                            *d = v as f32;
                        }
                    }
                }
                Some(t)
            }
            (_, Some(s)) => Some(Tensor::zeros(s.shape())),
            _ => None,
        };
        let global = match (&self.global, &out.global) {
            (Some(g), Some(_)) => Some(g.iter().map(|&v| v as f32).collect()),
            (_, Some(o)) => Some(vec![0.0; o.len()]),
            _ => None,
        };
        NetGrads { voxel, seg, global }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Absent when the segmentation head is disabled.
    pub dice_loss: Option<f64>,
    pub mae_voxel: f64,
    /// Absent when the global head is disabled.
    pub mae_global: Option<f64>,
    pub total: f64,
    pub weights_used: Weights,
}

/// Softmax over classes for every voxel of one sample.
pub fn softmax(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = logits[0].len();
    let mut out = vec![vec![0.0; n]; logits.len()];
    for i in 0..n {
        let m = logits.iter().map(|l| l[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (c, l) in logits.iter().enumerate() {
            let e = (l[i] - m).exp();
            out[c][i] = e;
            s += e;
        }
        for o in out.iter_mut() {
            o[i] /= s;
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn combined_loss(
    inputs: &LossInputs,
    targets: &LossTargets,
    task_set: TaskSet,
    schedule: &LossWeightSchedule,
    epoch: usize,
) -> Result<LossBreakdown> {
    combined_loss_with_grad(inputs, targets, task_set, schedule, epoch).map(|(b, _)| b)
}

/// Total loss over the enabled tasks and its gradient with respect to voxel ages, seg logits and global ages.
pub fn combined_loss_with_grad(
    inputs: &LossInputs,
    targets: &LossTargets,
    task_set: TaskSet,
    schedule: &LossWeightSchedule,
    epoch: usize,
) -> Result<(LossBreakdown, LossGrads)> {
    let w = schedule.weights_at(epoch)?;
    let m = inputs.batch();

    let pred: Vec<&[f64]> = inputs.voxel.iter().map(|v| v.as_slice()).collect();
    let truth: Vec<&[f64]> = targets.voxel.iter().map(|v| v.as_slice()).collect();
    let masks: Vec<&BrainMask> = targets.masks.iter().collect();
    let mv = mae_voxel(&pred, &truth, &masks)?;
    let mut gv = Vec::with_capacity(m);
    for ((p, t), mk) in pred.iter().zip(&truth).zip(&masks) {
        let k = w.w_v / (m as f64 * mk.count() as f64);
        gv.push(
            p.iter()
                .zip(t.iter())
                .zip(mk.data())
                .map(|((a, b), &keep)| if keep { k * sign(a - b) } else { 0.0 })
                .collect(),
        );
    }

    let (dice, gs) = if task_set.segmentation() {
        let logits = inputs
            .seg_logits
            .as_ref()
            .ok_or_else(|| Error::Shape("segmentation enabled but no logits supplied".into()))?;
        let probs: Vec<_> = logits.iter().map(|l| softmax(l)).collect();
        let labels: Vec<&[u8]> = targets.labels.iter().map(|l| l.as_slice()).collect();
        let d = dice_loss(&probs, &labels)?;
        let mut grads = Vec::with_capacity(m);
        for (p, t) in probs.iter().zip(&labels) {
            let terms = dice_terms(p, t);
            let k = terms.len() as f64;
            // dL/dp for every class; background gets zero
            let mut gp = vec![vec![0.0; t.len()]; p.len()];
            for (ci, &(inter, sum)) in terms.iter().enumerate() {
                let c = ci + 1;
                if sum == 0.0 {
                    continue;
                }
                let scale = -w.w_s / (m as f64 * k);
                for (j, g) in gp[c].iter_mut().enumerate() {
                    let y = (t[j] as usize == c) as u8 as f64;
                    *g = scale * (2.0 * y / sum - 2.0 * inter / (sum * sum));
                }
            }
            // back through the softmax: dz_c = p_c (g_c − Σ_k p_k g_k)
            let mut gz = vec![vec![0.0; t.len()]; p.len()];
            for j in 0..t.len() {
                let dot: f64 = (0..p.len()).map(|c| p[c][j] * gp[c][j]).sum();
                for c in 0..p.len() {
                    gz[c][j] = p[c][j] * (gp[c][j] - dot);
                }
            }
            grads.push(gz);
        }
        (Some(d), Some(grads))
    } else {
        (None, None)
    };

    let (mg, gg) = if task_set.global_age() {
        let g = inputs
            .global
            .as_ref()
            .ok_or_else(|| Error::Shape("global head enabled but no prediction supplied".into()))?;
        let v = mae_global(g, &targets.global)?;
        let grad = g
            .iter()
            .zip(&targets.global)
            .map(|(a, b)| w.w_g * sign(a - b) / m as f64)
            .collect();
        (Some(v), Some(grad))
    } else {
        (None, None)
    };

    let total = w.w_v * mv + dice.map_or(0.0, |d| w.w_s * d) + mg.map_or(0.0, |g| w.w_g * g);
    Ok((
        LossBreakdown {
            dice_loss: dice,
            mae_voxel: mv,
            mae_global: mg,
            total,
            weights_used: w,
        },
        LossGrads {
            voxel: gv,
            seg_logits: gs,
            global: gg,
        },
    ))
}

/// Which rows a training log line belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Val,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Val => "val",
        }
    }
}

pub const LOG_HEADER: &str = "phase,epoch,step,lr,dice_loss,mae_voxel,mae_global,total,w_s,w_g,w_v";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One training-log CSV line (no trailing newline). Absent terms are empty fields.
pub fn log_row(phase: Phase, epoch: usize, step: usize, lr: f64, b: &LossBreakdown) -> String {
    format!(
        "{},{epoch},{step},{lr:e},{},{:.6},{},{:.6},{},{},{}",
        phase.as_str(),
        opt(b.dice_loss),
        b.mae_voxel,
        opt(b.mae_global),
        b.total,
        b.weights_used.w_s,
        b.weights_used.w_g,
        b.weights_used.w_v
    )
}

pub fn write_log_row<W: Write>(w: &mut W, phase: Phase, epoch: usize, step: usize, lr: f64, b: &LossBreakdown) -> Result<()> {
    writeln!(w, "{}", log_row(phase, epoch, step, lr, b)).map_err(|e| Error::io("training log", e))
}
