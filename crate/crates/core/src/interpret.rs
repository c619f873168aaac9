//! Saliency baselines over a scalar age model: Grad-CAM, occlusion sensitivity and SmoothGrad,
//! plus a slice panel that puts them next to PAD maps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nn3d::resample::resize_plane;
use nn3d::{Mode, Parameterized, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmaps::{sidecar_path, PADMap};
use crate::net::{volume_to_tensor, GlobalRegressor};
use crate::volume::{save_volume, Volume};

/// A model mapping one volume to one age.
pub trait ScalarModel {
    fn predict(&mut self, x: &Volume) -> Result<f64>;

    /// Output and its gradient with respect to every input voxel (x fastest).
    fn input_gradient(&mut self, x: &Volume) -> Result<(f64, Vec<f32>)>;

    /// Final convolutional maps `[1, C, ...]` and the output gradient with respect to them.
    fn feature_maps(&mut self, _x: &Volume) -> Result<(Tensor, Tensor)> {
        Err(Error::Capability("model does not expose convolutional feature maps".into()))
    }
}

impl ScalarModel for GlobalRegressor {
    fn predict(&mut self, x: &Volume) -> Result<f64> {
        Ok(self.forward(&volume_to_tensor(x), Mode::Eval)?[0] as f64)
    }

    fn input_gradient(&mut self, x: &Volume) -> Result<(f64, Vec<f32>)> {
        let y = self.forward(&volume_to_tensor(x), Mode::Eval)?[0] as f64;
        let g = self.backward(&[1.0]);
        self.zero_grad();
        Ok((y, g.into_vec()))
    }

    fn feature_maps(&mut self, x: &Volume) -> Result<(Tensor, Tensor)> {
        self.forward(&volume_to_tensor(x), Mode::Eval)?;
        let g = self.feature_gradient(&[1.0])?;
        let f = self.features().expect("forward stores features").clone();
        Ok((f, g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    UnitRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub data: Volume,
    pub method: String,
    pub normalization: Normalization,
    pub sample_id: String,
    pub params: serde_json::Value,
}

impl SaliencyMap {
    /// Rescales to [0, 1]; a constant map becomes all zeros.
    pub fn unit_range(&self) -> SaliencyMap {
        let (lo, hi) = self.data.min_max();
        let span = hi - lo;
        SaliencyMap {
            data: self.data.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }),
            normalization: Normalization::UnitRange,
            ..self.clone()
        }
    }

    /// Volume file plus `<path>.json` with the method and its parameters.
    pub fn save(&self, path: impl AsRef<Path>, format: &str) -> Result<()> {
        let path = path.as_ref();
        save_volume(&self.data, path, format)?;
        let side = sidecar_path(path);
        let json = serde_json::json!({
            "method": self.method,
            "params": self.params,
            "normalization": self.normalization,
            "sample_id": self.sample_id,
        });
        fs::write(&side, serde_json::to_string_pretty(&json).unwrap()).map_err(|e| Error::io(side, e))
    }
}

/// A saliency method selectable by name.
pub trait SaliencyMethod {
    fn name(&self) -> &'static str;
    fn params(&self) -> serde_json::Value;
    fn compute(&self, model: &mut dyn ScalarModel, input: &Volume) -> Result<Volume>;

    fn run(&self, model: &mut dyn ScalarModel, input: &Volume, sample_id: &str) -> Result<SaliencyMap> {
        Ok(SaliencyMap {
            data: self.compute(model, input)?,
            method: self.name().to_string(),
            normalization: Normalization::Raw,
            sample_id: sample_id.to_string(),
            params: self.params(),
        })
    }
}

/// Pooled-gradient weighting of the final feature maps, rectified and trilinearly upsampled.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCam;

impl SaliencyMethod for GradCam {
    fn name(&self) -> &'static str {
        "gradcam"
    }

    fn params(&self) -> serde_json::Value {
        serde_json::json!({})
    }

    fn compute(&self, model: &mut dyn ScalarModel, input: &Volume) -> Result<Volume> {
        let (f, g) = model.feature_maps(input)?;
        if f.shape() != g.shape() || f.batch() != 1 {
            return Err(Error::Shape("feature maps and their gradient disagree".into()));
        }
        let plane = f.plane_len();
        let mut cam = vec![0.0f64; plane];
        for k in 0..f.channels() {
            let w = g.channel(0, k).iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            for (c, &a) in cam.iter_mut().zip(f.channel(0, k)) {
                *c += w * a as f64;
            }
        }
        let cam: Vec<f32> = cam.iter().map(|&v| v.max(0.0) as f32).collect();
        let [dx, dy, dz] = input.dims();
        let up = resize_plane(&cam, f.spatial(), [dz, dy, dx]);
        // interpolation of nonnegative values stays nonnegative; clamp guards rounding
        Volume::new(input.dims(), input.spacing(), up.into_iter().map(|v| v.max(0.0)).collect())
    }
}

/// Cuboid occluder geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionSpec {
    pub size: [usize; 3],
    pub stride: [usize; 3],
    pub fill_value: f32,
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self {
            size: [8; 3],
            stride: [4; 3],
            fill_value: 0.0,
        }
    }
}

impl OcclusionSpec {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.size[a] == 0 || self.stride[a] == 0 || self.size[a] > dims[a] {
                return Err(Error::Validation(format!(
                    "occluder size {:?} / stride {:?} invalid for dims {dims:?}",
                    self.size, self.stride
                )));
            }
        }
        Ok(())
    }

    /// Cuboid origins along one axis: the stride grid, plus a final flush position if the grid stops short.
    pub fn positions(&self, axis: usize, dim: usize) -> Vec<usize> {
        let last = dim - self.size[axis];
        let mut p: Vec<usize> = (0..=last).step_by(self.stride[axis]).collect();
        if *p.last().unwrap() != last {
            p.push(last);
        }
        p
    }
}

/// Prediction change when each cuboid is filled; overlapping footprints are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Occlusion(pub OcclusionSpec);

impl SaliencyMethod for Occlusion {
    fn name(&self) -> &'static str {
        "occlusion"
    }

    fn params(&self) -> serde_json::Value {
        serde_json::to_value(self.0).unwrap()
    }

    fn compute(&self, model: &mut dyn ScalarModel, input: &Volume) -> Result<Volume> {
        let spec = &self.0;
        let dims = input.dims();
        spec.validate(dims)?;
        let base = model.predict(input)?;
        let n = input.len();
        let mut sum = vec![0.0f64; n];
        let mut count = vec![0u32; n];
        let (px, py, pz) = (spec.positions(0, dims[0]), spec.positions(1, dims[1]), spec.positions(2, dims[2]));
        let mut buf = input.data().to_vec();
        for &oz in &pz {
            for &oy in &py {
                for &ox in &px {
                    let idx = footprint(dims, [ox, oy, oz], spec.size);
                    for &i in &idx {
                        buf[i] = spec.fill_value;
                    }
                    let y = model.predict(&input.with_data(buf.clone()))?;
                    let delta = y - base;
                    for &i in &idx {
                        sum[i] += delta;
                        count[i] += 1;
                        buf[i] = input.data()[i];
                    }
                }
            }
        }
        let data = sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 0.0 })
            .collect();
        Volume::new(dims, input.spacing(), data)
    }
}

/// Linear indices covered by a cuboid, z-major then y then x.
pub fn footprint(dims: [usize; 3], origin: [usize; 3], size: [usize; 3]) -> Vec<usize> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in origin[2]..origin[2] + size[2] {
        for y in origin[1]..origin[1] + size[1] {
            for x in origin[0]..origin[0] + size[0] {
                out.push(crate::volume::linear_index(dims, x, y, z));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothGradSpec {
    pub n_samples: usize,
    /// Noise SD as a fraction of the input's intensity range.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SmoothGradSpec {
    fn default() -> Self {
        Self {
            n_samples: 25,
            noise_sd: 0.10,
            seed: 0,
        }
    }
}

/// Mean absolute input gradient over Gaussian-perturbed copies of the input.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SmoothGrad(pub SmoothGradSpec);

impl SaliencyMethod for SmoothGrad {
    fn name(&self) -> &'static str {
        "smoothgrad"
    }

    fn params(&self) -> serde_json::Value {
        serde_json::to_value(self.0).unwrap()
    }

    fn compute(&self, model: &mut dyn ScalarModel, input: &Volume) -> Result<Volume> {
        let spec = &self.0;
        if spec.n_samples == 0 || !(spec.noise_sd >= 0.0) {
            return Err(Error::Validation("SmoothGrad needs n_samples >= 1 and noise_sd >= 0".into()));
        }
        let (lo, hi) = input.min_max();
        let sd = spec.noise_sd * (hi - lo) as f64;
        let normal = Normal::new(0.0, sd).map_err(|e| Error::Validation(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut acc = vec![0.0f64; input.len()];
        for _ in 0..spec.n_samples {
            let noisy: Vec<f32> = if sd > 0.0 {
                input.data().iter().map(|&v| v + normal.sample(&mut rng) as f32).collect()
            } else {
                input.data().to_vec()
            };
            let (_, g) = model.input_gradient(&input.with_data(noisy))?;
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v.abs() as f64;
            }
        }
        let n = spec.n_samples as f64;
        Volume::new(input.dims(), input.spacing(), acc.iter().map(|&a| (a / n) as f32).collect())
    }
}

/// |∂output/∂input| at the input itself.
pub fn gradient_map(model: &mut dyn ScalarModel, input: &Volume) -> Result<Volume> {
    let (_, g) = model.input_gradient(input)?;
    Volume::new(input.dims(), input.spacing(), g.iter().map(|v| v.abs()).collect())
}

pub fn gradcam(model: &mut dyn ScalarModel, input: &Volume) -> Result<SaliencyMap> {
    GradCam.run(model, input, "")
}

pub fn occlusion_sensitivity(model: &mut dyn ScalarModel, input: &Volume, spec: OcclusionSpec) -> Result<SaliencyMap> {
    Occlusion(spec).run(model, input, "")
}

pub fn smoothgrad(model: &mut dyn ScalarModel, input: &Volume, spec: SmoothGradSpec) -> Result<SaliencyMap> {
    SmoothGrad(spec).run(model, input, "")
}

/// Saliency methods by name.
pub struct SaliencyRegistry {
    items: BTreeMap<&'static str, Box<dyn SaliencyMethod>>,
}

impl Default for SaliencyRegistry {
    fn default() -> Self {
        Self::with(OcclusionSpec::default(), SmoothGradSpec::default())
    }
}

impl SaliencyRegistry {
    pub fn with(occlusion: OcclusionSpec, smooth: SmoothGradSpec) -> Self {
        let mut r = Self { items: BTreeMap::new() };
        r.register(Box::new(GradCam));
        r.register(Box::new(Occlusion(occlusion)));
        r.register(Box::new(SmoothGrad(smooth)));
        r
    }

    pub fn register(&mut self, m: Box<dyn SaliencyMethod>) {
        self.items.insert(m.name(), m);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.items.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn SaliencyMethod> {
        self.items.get(name).map(|b| b.as_ref()).ok_or_else(|| Error::UnknownStrategy {
            kind: "saliency method",
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }
}

/// Which colour map a panel uses and the value range mapped onto it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelInfo {
    pub name: String,
    pub diverging: bool,
    pub lo: f32,
    pub hi: f32,
    pub path: PathBuf,
}

const SCALE: u32 = 4;
const BAR: u32 = 12;

fn slice(v: &Volume, axis: usize, index: usize) -> Result<(Vec<f32>, usize, usize)> {
    let d = v.dims();
    if axis > 2 || index >= d[axis] {
        return Err(Error::Validation(format!(
            "slice {index} on axis {axis} is out of range for dims {d:?}"
        )));
    }
    let (u, w) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut out = Vec::with_capacity(d[u] * d[w]);
    for j in 0..d[w] {
        for i in 0..d[u] {
            let mut p = [0; 3];
            p[axis] = index;
            p[u] = i;
            p[w] = j;
            out.push(v.get(p[0], p[1], p[2]));
        }
    }
    Ok((out, d[u], d[w]))
}

fn diverging(t: f32) -> Rgb<u8> {
    // t in [0,1]: blue → white → red
    let t = t.clamp(0.0, 1.0);
    if t < 0.5 {
        let s = t / 0.5;
        Rgb([(255.0 * s) as u8, (255.0 * s) as u8, 255])
    } else {
        let s = (1.0 - t) / 0.5;
        Rgb([255, (255.0 * s) as u8, (255.0 * s) as u8])
    }
}

fn sequential(t: f32) -> Rgb<u8> {
    // black → red → yellow → white
    let t = t.clamp(0.0, 1.0);
    let r = (3.0 * t).min(1.0);
    let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
    Rgb([(255.0 * r) as u8, (255.0 * g) as u8, (255.0 * b) as u8])
}

fn render(values: &[f32], w: usize, h: usize, diverging_scale: bool) -> (RgbImage, f32, f32) {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = if diverging_scale {
        let m = finite.fold(0.0f32, |a, v| a.max(v.abs())).max(1e-6);
        (-m, m)
    } else {
        let (a, b) = finite.fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if a.is_finite() && b > a {
            (a, b)
        } else {
            (0.0, 1.0)
        }
    };
    let cmap = if diverging_scale { diverging } else { sequential };
    let (iw, ih) = (w as u32 * SCALE, h as u32 * SCALE);
    let mut img = RgbImage::new(iw + BAR + 4, ih);
    for y in 0..ih {
        for x in 0..iw {
            // image rows run top to bottom; flip so the second in-plane axis points up
            let v = values[(h - 1 - (y / SCALE) as usize) * w + (x / SCALE) as usize];
            let px = if v.is_finite() {
                cmap((v - lo) / (hi - lo))
            } else {
                Rgb([128, 128, 128])
            };
            img.put_pixel(x, y, px);
        }
        let t = 1.0 - y as f32 / (ih - 1).max(1) as f32;
        for x in iw + 4..iw + 4 + BAR {
            img.put_pixel(x, y, cmap(t));
        }
    }
    (img, lo, hi)
}

/// Writes one PNG per panel plus `panel.png` (all side by side) and `panel.json` with colour-bar limits.
pub fn comparison_panel(
    pad: &PADMap,
    regional: &Volume,
    saliencies: &[SaliencyMap],
    axis: usize,
    index: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PanelInfo>> {
    let out_dir = out_dir.as_ref();
    let pad_vol = pad.to_volume()?;
    let mut panels: Vec<(String, &Volume, bool)> = vec![("pad".into(), &pad_vol, true), ("regional".into(), regional, true)];
    for s in saliencies {
        panels.push((s.method.clone(), &s.data, s.method == "occlusion"));
    }
    for (name, v, _) in &panels {
        if v.dims() != pad.dims {
            return Err(Error::Alignment(format!(
                "panel '{name}' has dims {:?}, PAD map has {:?}",
                v.dims(),
                pad.dims
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut infos = Vec::new();
    let mut images = Vec::new();
    for (k, (name, v, div)) in panels.iter().enumerate() {
        let (vals, w, h) = slice(v, axis, index)?;
        let (img, lo, hi) = render(&vals, w, h, *div);
        let path = out_dir.join(format!("panel_{k}_{name}.png"));
        img.save(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        infos.push(PanelInfo {
            name: name.clone(),
            diverging: *div,
            lo,
            hi,
            path,
        });
        images.push(img);
    }
    let gap = 8;
    let width: u32 = images.iter().map(|i| i.width() + gap).sum();
    let height = images.iter().map(|i| i.height()).max().unwrap_or(1);
    let mut all = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut x0 = 0;
    for img in &images {
        image::imageops::replace(&mut all, img, x0 as i64, 0);
        x0 += img.width() + gap;
    }
    let p = out_dir.join("panel.png");
    all.save(&p).map_err(|e| Error::io(&p, std::io::Error::other(e)))?;
    let p = out_dir.join("panel.json");
    fs::write(&p, serde_json::to_string_pretty(&infos).unwrap()).map_err(|e| Error::io(&p, e))?;
    Ok(infos)
}
