//! Multitask 3-D U-Net, the global-age regressor, and checkpoints.

mod checkpoint;
mod regressor;
mod unet;

use std::fmt;
use std::str::FromStr;

use nn3d::{BatchNorm3d, Conv3d, Mode, Param, Parameterized, Relu, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub use checkpoint::{load_checkpoint_into, read_checkpoint_header, save_checkpoint, Checkpointable, CheckpointHeader};
pub use regressor::{GlobalRegressor, RegressorConfig};
pub use unet::{NetGrads, NetOutput, UNet};

/// Which output heads a model has. The voxel-age head is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TaskSet {
    voxel_age: bool,
    global_age: bool,
    segmentation: bool,
}

impl TaskSet {
    pub const V: TaskSet = TaskSet {
        voxel_age: true,
        global_age: false,
        segmentation: false,
    };
    pub const SV: TaskSet = TaskSet {
        voxel_age: true,
        global_age: false,
        segmentation: true,
    };
    pub const GV: TaskSet = TaskSet {
        voxel_age: true,
        global_age: true,
        segmentation: false,
    };
    pub const SGV: TaskSet = TaskSet {
        voxel_age: true,
        global_age: true,
        segmentation: true,
    };

    /// The four admissible configurations in report order.
    pub const ALL: [TaskSet; 4] = [TaskSet::V, TaskSet::SV, TaskSet::GV, TaskSet::SGV];

    pub fn new(voxel_age: bool, global_age: bool, segmentation: bool) -> Result<Self> {
        if !voxel_age {
            return Err(Error::Config("the voxel-age task cannot be disabled".into()));
        }
        Ok(Self {
            voxel_age,
            global_age,
            segmentation,
        })
    }

    pub fn voxel_age(&self) -> bool {
        self.voxel_age
    }

    pub fn global_age(&self) -> bool {
        self.global_age
    }

    pub fn segmentation(&self) -> bool {
        self.segmentation
    }

    pub fn label(&self) -> &'static str {
        match (self.segmentation, self.global_age) {
            (false, false) => "V",
            (true, false) => "S+V",
            (false, true) => "G+V",
            (true, true) => "S+G+V",
        }
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TaskSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts: Vec<String> = s
            .split(['+', ',', ' '])
            .filter(|p| !p.is_empty())
            .map(|p| p.trim().to_ascii_uppercase())
            .collect();
        parts.sort();
        parts.dedup();
        let has = |k: &str| parts.iter().any(|p| p == k);
        if parts.iter().any(|p| !matches!(p.as_str(), "S" | "G" | "V")) || !has("V") {
            return Err(Error::Config(format!(
                "task set '{s}' must be one of V, S+V, G+V, S+G+V"
            )));
        }
        TaskSet::new(true, has("G"), has("S"))
    }
}

impl TryFrom<String> for TaskSet {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TaskSet> for String {
    fn from(t: TaskSet) -> String {
        t.label().to_string()
    }
}

fn default_seg_classes() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_hidden() -> usize {
    64
}
fn default_scale() -> f64 {
    1.0
}

/// U-Net configuration. Channels at level `l` are `base_channels * 2^l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "NetConfig::default_in")]
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub task_set: TaskSet,
    #[serde(default = "default_seg_classes")]
    pub seg_classes: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    /// Hidden width of the global-age regressor on pooled bottleneck features.
    #[serde(default = "default_hidden")]
    pub global_hidden: usize,
    /// Age heads emit `age_offset + age_scale * raw`; the loss still sees years.
    #[serde(default)]
    pub age_offset: f64,
    #[serde(default = "default_scale")]
    pub age_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            depth: 4,
            task_set: TaskSet::SGV,
            seg_classes: 4,
            batch_norm: true,
            global_hidden: 64,
            age_offset: 0.0,
            age_scale: 1.0,
        }
    }
}

impl NetConfig {
    fn default_in() -> usize {
        1
    }

    pub fn channels(&self) -> Vec<usize> {
        (0..self.depth).map(|l| self.base_channels << l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.task_set.segmentation && self.seg_classes < 2 {
            return Err(Error::Config("segmentation needs at least 2 classes".into()));
        }
        if !(self.age_scale > 0.0) || !self.age_offset.is_finite() {
            return Err(Error::Config("age_scale must be positive and age_offset finite".into()));
        }
        Ok(())
    }

    /// Every spatial extent must be divisible by `2^(depth-1)`.
    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << (self.depth - 1);
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Config(format!(
                "input extents {dims:?} are not divisible by {f} (depth {})",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskOutput {
    /// Voxel-age grid in years, same dims as the input (x fastest).
    pub voxel_age: Volume,
    pub global_age: Option<f64>,
    /// Class logits, `seg_classes` grids in input layout.
    pub seg_logits: Option<Vec<Vec<f32>>>,
}

impl MultitaskOutput {
    /// Per-voxel softmax probabilities.
    pub fn seg_probabilities(&self) -> Option<Vec<Vec<f32>>> {
        self.seg_logits.as_ref().map(|l| softmax_classes(l))
    }

    /// Arg-max class per voxel.
    pub fn seg_labels(&self) -> Option<Vec<u8>> {
        self.seg_logits.as_ref().map(|l| {
            (0..l[0].len())
                .map(|i| {
                    let mut best = 0;
                    for c in 1..l.len() {
                        if l[c][i] > l[best][i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
    }
}

pub fn softmax_classes(logits: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let n = logits[0].len();
    let c = logits.len();
    let mut out = vec![vec![0.0f32; n]; c];
    for i in 0..n {
        let m = logits.iter().map(|l| l[i]).fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f64;
        for k in 0..c {
            let e = ((logits[k][i] - m) as f64).exp();
            out[k][i] = e as f32;
            s += e;
        }
        for row in out.iter_mut() {
            row[i] = (row[i] as f64 / s) as f32;
        }
    }
    out
}

/// Volume (x fastest, dims `[dx,dy,dz]`) to a `[1,1,dz,dy,dx]` tensor; no copy reordering needed.
pub fn volume_to_tensor(v: &Volume) -> Tensor {
    let [dx, dy, dz] = v.dims();
    Tensor::from_vec([1, 1, dz, dy, dx], v.data().to_vec())
}

pub fn tensor_dims(t: &Tensor) -> [usize; 3] {
    let [a, b, c] = t.spatial();
    [c, b, a]
}

/// Order-sensitive FNV-1a hash over all parameter and buffer bits.
pub fn param_checksum<M: Parameterized + ?Sized>(m: &mut M) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |xs: &[f32]| {
        for x in xs {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    };
    m.visit_params(&mut |p| eat(&p.value));
    m.visit_buffers(&mut |b| eat(b));
    h
}

/// Convolution, optional batch norm, ReLU.
#[derive(Clone, Debug)]
pub(crate) struct ConvUnit {
    conv: Conv3d,
    bn: Option<BatchNorm3d>,
    relu: Relu,
}

impl ConvUnit {
    pub(crate) fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, batch_norm: bool, rng: &mut R) -> Self {
        Self {
            conv: Conv3d::new(cin, cout, kernel, !batch_norm, rng),
            bn: batch_norm.then(|| BatchNorm3d::new(cout)),
            relu: Relu::new(),
        }
    }

    pub(crate) fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = self.conv.forward(x);
        let y = match self.bn.as_mut() {
            Some(bn) => bn.forward(&y, mode),
            None => y,
        };
        self.relu.forward(&y)
    }

    /// Returns the input gradient unless `need_input` is false.
    pub(crate) fn backward(&mut self, g: &Tensor, need_input: bool) -> Option<Tensor> {
        let g = self.relu.backward(g);
        let g = match self.bn.as_mut() {
            Some(bn) => bn.backward(&g),
            None => g,
        };
        if need_input {
            Some(self.conv.backward(&g))
        } else {
            self.conv.backward_params(&g);
            None
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.conv.clear_cache();
        if let Some(bn) = self.bn.as_mut() {
            bn.clear_cache();
        }
        self.relu = Relu::new();
    }
}

impl Parameterized for ConvUnit {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params(f);
        if let Some(bn) = self.bn.as_mut() {
            bn.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        if let Some(bn) = self.bn.as_mut() {
            bn.visit_buffers(f);
        }
    }
}
