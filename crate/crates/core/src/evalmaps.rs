//! Whole-volume inference, PAD maps, bias correction and test-set reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nn3d::{Mode, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::loss::hard_dice;
use crate::net::{tensor_dims, MultitaskOutput, UNet};
use crate::phantom::{AGE_MAX, AGE_MIN};
use crate::volume::{linear_index, save_volume, BrainMask, Volume};

/// Symmetric zero-padding of every extent up to a multiple of `f`; returns the padded grid and the offsets.
fn pad_to_multiple(v: &Volume, f: usize) -> (Vec<f32>, [usize; 3], [usize; 3]) {
    let dims = v.dims();
    let mut pdims = [0; 3];
    let mut before = [0; 3];
    for a in 0..3 {
        pdims[a] = dims[a].div_ceil(f) * f;
        before[a] = (pdims[a] - dims[a]) / 2;
    }
    if pdims == dims {
        return (v.data().to_vec(), dims, before);
    }
    let mut out = vec![0.0f32; pdims.iter().product()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let src = linear_index(dims, 0, y, z);
            let dst = linear_index(pdims, before[0], y + before[1], z + before[2]);
            out[dst..dst + dims[0]].copy_from_slice(&v.data()[src..src + dims[0]]);
        }
    }
    (out, pdims, before)
}

fn unpad(grid: &[f32], pdims: [usize; 3], before: [usize; 3], dims: [usize; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let s = linear_index(pdims, before[0], y + before[1], z + before[2]);
            out.extend_from_slice(&grid[s..s + dims[0]]);
        }
    }
    out
}

/// Evaluation-mode prediction over a whole volume, padding and cropping when extents are not divisible.
pub fn predict_full_volume(model: &mut UNet, image: &Volume) -> Result<MultitaskOutput> {
    let f = 1usize << (model.config().depth - 1);
    let dims = image.dims();
    let (grid, pdims, before) = pad_to_multiple(image, f);
    let x = Tensor::from_vec([1, 1, pdims[2], pdims[1], pdims[0]], grid);
    let out = model.forward(&x, Mode::Eval)?;
    model.clear_cache();
    debug_assert_eq!(tensor_dims(&out.voxel), pdims);
    let voxel = unpad(out.voxel.channel(0, 0), pdims, before, dims);
    let seg_logits = out
        .seg
        .as_ref()
        .map(|s| (0..s.channels()).map(|c| unpad(s.channel(0, c), pdims, before, dims)).collect());
    Ok(MultitaskOutput {
        voxel_age: Volume::with_nan_allowed(dims, image.spacing(), voxel)?.with_orientation(image.orientation()),
        global_age: out.global.as_ref().map(|g| g[0] as f64),
        seg_logits,
    })
}

/// Voxelwise predicted minus chronological age.
#[derive(Clone, Debug, PartialEq)]
pub struct PADMap {
    pub dims: [usize; 3],
    /// Years, x fastest. Values outside the mask are kept but never enter statistics.
    pub data: Vec<f64>,
    pub mask: BrainMask,
    pub chronological_age: f64,
    /// Mean |PAD| over the mask.
    pub sample_mae: f64,
    /// Sample MAE subtracted; for display only.
    pub adjusted: bool,
    pub corrected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadSidecar {
    pub chronological_age: f64,
    pub sample_mae: f64,
    pub corrected: bool,
    pub adjusted: bool,
}

impl PADMap {
    pub fn to_volume(&self) -> Result<Volume> {
        Volume::new(self.dims, [1.0; 3], self.data.iter().map(|&v| v as f32).collect())
    }

    pub fn sidecar(&self) -> PadSidecar {
        PadSidecar {
            chronological_age: self.chronological_age,
            sample_mae: self.sample_mae,
            corrected: self.corrected,
            adjusted: self.adjusted,
        }
    }

    /// Writes the map as a volume plus `<path>.json`.
    pub fn save(&self, path: impl AsRef<Path>, format: &str) -> Result<()> {
        let path = path.as_ref();
        save_volume(&self.to_volume()?, path, format)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.sidecar()).expect("sidecar serializes");
        fs::write(&side, json).map_err(|e| Error::io(side, e))
    }

    /// Mean of the raw map over mask voxels.
    pub fn mask_mean(&self) -> f64 {
        let mut s = 0.0;
        for (v, &m) in self.data.iter().zip(self.mask.data()) {
            if m {
                s += v;
            }
        }
        s / self.mask.count() as f64
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn compute_pad(pred: &Volume, chronological_age: f64, mask: &BrainMask) -> Result<PADMap> {
    if pred.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "prediction dims {:?} do not match mask dims {:?}",
            pred.dims(),
            mask.dims()
        )));
    }
    if mask.count() == 0 {
        return Err(Error::Validation("brain mask has no voxels".into()));
    }
    let data: Vec<f64> = pred.data().iter().map(|&p| p as f64 - chronological_age).collect();
    let mut s = 0.0;
    for (d, &m) in data.iter().zip(mask.data()) {
        if m {
            s += d.abs();
        }
    }
    let sample_mae = s / mask.count() as f64;
    if !sample_mae.is_finite() {
        return Err(Error::Validation("PAD map has non-finite values inside the mask".into()));
    }
    Ok(PADMap {
        dims: pred.dims(),
        data,
        mask: mask.clone(),
        chronological_age,
        sample_mae,
        adjusted: false,
        corrected: false,
    })
}

/// Subtracts the sample MAE from every mask voxel. The result is for visualization only.
pub fn adjust_pad(p: &PADMap) -> PADMap {
    let mut out = p.clone();
    for (v, &m) in out.data.iter_mut().zip(p.mask.data()) {
        if m {
            *v -= p.sample_mae;
        }
    }
    out.adjusted = true;
    out
}

/// A fitted post-hoc correction of age predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BiasCorrectionModel {
    /// `predicted = slope * age + intercept` on the calibration set.
    Regression {
        slope: f64,
        intercept: f64,
        calibration_n: usize,
        age_range: [f64; 2],
    },
    /// Mean PAD per age bin; `offsets[i]` covers `[edges[i], edges[i+1])` (last bin closed).
    AgeBins {
        edges: Vec<f64>,
        offsets: Vec<Option<f64>>,
        calibration_n: usize,
        age_range: [f64; 2],
    },
}

impl BiasCorrectionModel {
    pub fn mode(&self) -> &'static str {
        match self {
            BiasCorrectionModel::Regression { .. } => "regression",
            BiasCorrectionModel::AgeBins { .. } => "age_bins",
        }
    }

    pub fn identity() -> Self {
        BiasCorrectionModel::Regression {
            slope: 1.0,
            intercept: 0.0,
            calibration_n: 0,
            age_range: [f64::NEG_INFINITY, f64::INFINITY],
        }
    }

    pub fn calibration_n(&self) -> usize {
        match self {
            BiasCorrectionModel::Regression { calibration_n, .. } | BiasCorrectionModel::AgeBins { calibration_n, .. } => {
                *calibration_n
            }
        }
    }

    pub fn age_range(&self) -> [f64; 2] {
        match self {
            BiasCorrectionModel::Regression { age_range, .. } | BiasCorrectionModel::AgeBins { age_range, .. } => {
                *age_range
            }
        }
    }

    fn check_age(&self, age: f64) -> Result<()> {
        let [lo, hi] = self.age_range();
        if !(age >= lo && age <= hi) {
            return Err(Error::Range(format!(
                "age {age} is outside the calibration range [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    /// Corrects one prediction for a subject of the given chronological age.
    pub fn apply(&self, raw: f64, chronological_age: f64) -> Result<f64> {
        self.check_age(chronological_age)?;
        match self {
            BiasCorrectionModel::Regression { slope, intercept, .. } => Ok((raw - intercept) / slope),
            BiasCorrectionModel::AgeBins { edges, offsets, .. } => {
                let bin = bin_of(edges, chronological_age).ok_or_else(|| {
                    Error::Range(format!("age {chronological_age} falls outside the bin edges"))
                })?;
                let off = offsets[bin].ok_or_else(|| {
                    Error::Range(format!(
                        "age bin [{}, {}] has no calibration samples",
                        edges[bin],
                        edges[bin + 1]
                    ))
                })?;
                Ok(raw - off)
            }
        }
    }

    /// Applies the same transform to every voxel of a grid.
    pub fn apply_volume(&self, raw: &Volume, chronological_age: f64) -> Result<Volume> {
        self.check_age(chronological_age)?;
        let probe_zero = self.apply(0.0, chronological_age)?;
        let probe_one = self.apply(1.0, chronological_age)?;
        // both modes are affine in the raw value for a fixed age
        let (a, b) = (probe_one - probe_zero, probe_zero);
        Ok(raw.map(|v| (a * v as f64 + b) as f32))
    }
}

fn bin_of(edges: &[f64], age: f64) -> Option<usize> {
    let n = edges.len() - 1;
    (0..n).find(|&i| age >= edges[i] && (age < edges[i + 1] || (i + 1 == n && age <= edges[n])))
}

/// A way of fitting a [`BiasCorrectionModel`] from `(chronological, predicted)` pairs.
pub trait BiasCorrectionStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, pairs: &[(f64, f64)]) -> Result<BiasCorrectionModel>;
}

fn age_range(pairs: &[(f64, f64)]) -> [f64; 2] {
    let lo = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    [lo, hi]
}

fn check_pairs(pairs: &[(f64, f64)]) -> Result<()> {
    if pairs.len() < 2 {
        return Err(Error::Fit(format!("need at least 2 calibration pairs, got {}", pairs.len())));
    }
    if pairs.iter().any(|(a, p)| !a.is_finite() || !p.is_finite()) {
        return Err(Error::Fit("calibration pairs must be finite".into()));
    }
    Ok(())
}

/// Least-squares line of prediction on age.
pub struct RegressionCorrection;

impl BiasCorrectionStrategy for RegressionCorrection {
    fn name(&self) -> &'static str {
        "regression"
    }

    fn fit(&self, pairs: &[(f64, f64)]) -> Result<BiasCorrectionModel> {
        check_pairs(pairs)?;
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx <= 1e-12 * (1.0 + mx * mx) {
            return Err(Error::Fit("all calibration ages are equal; the slope is undefined".into()));
        }
        let slope = sxy / sxx;
        if slope.abs() < 1e-9 {
            return Err(Error::Fit("fitted slope is zero; the correction cannot be inverted".into()));
        }
        Ok(BiasCorrectionModel::Regression {
            slope,
            intercept: my - slope * mx,
            calibration_n: pairs.len(),
            age_range: age_range(pairs),
        })
    }
}

/// Mean PAD per fixed-width age bin.
pub struct AgeBinCorrection {
    pub low: f64,
    pub high: f64,
    pub width: f64,
}

impl Default for AgeBinCorrection {
    fn default() -> Self {
        Self {
            low: AGE_MIN,
            high: AGE_MAX,
            width: 10.0,
        }
    }
}

impl BiasCorrectionStrategy for AgeBinCorrection {
    fn name(&self) -> &'static str {
        "age_bins"
    }

    fn fit(&self, pairs: &[(f64, f64)]) -> Result<BiasCorrectionModel> {
        check_pairs(pairs)?;
        if !(self.width > 0.0) || !(self.high > self.low) {
            return Err(Error::Fit("age bins need a positive width and low < high".into()));
        }
        let nbins = ((self.high - self.low) / self.width).ceil() as usize;
        let edges: Vec<f64> = (0..=nbins).map(|i| (self.low + i as f64 * self.width).min(self.high)).collect();
        let mut sums = vec![(0.0f64, 0usize); nbins];
        for &(age, pred) in pairs {
            let b = bin_of(&edges, age)
                .ok_or_else(|| Error::Fit(format!("calibration age {age} is outside [{}, {}]", self.low, self.high)))?;
            sums[b].0 += pred - age;
            sums[b].1 += 1;
        }
        Ok(BiasCorrectionModel::AgeBins {
            edges,
            offsets: sums.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect(),
            calibration_n: pairs.len(),
            age_range: age_range(pairs),
        })
    }
}

/// Bias-correction strategies by name.
pub struct BiasCorrectionRegistry {
    items: BTreeMap<&'static str, Box<dyn BiasCorrectionStrategy>>,
}

impl Default for BiasCorrectionRegistry {
    fn default() -> Self {
        let mut r = Self { items: BTreeMap::new() };
        r.register(Box::new(RegressionCorrection));
        r.register(Box::new(AgeBinCorrection::default()));
        r
    }
}

impl BiasCorrectionRegistry {
    pub fn register(&mut self, s: Box<dyn BiasCorrectionStrategy>) {
        self.items.insert(s.name(), s);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.items.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn BiasCorrectionStrategy> {
        self.items.get(name).map(|b| b.as_ref()).ok_or_else(|| Error::UnknownStrategy {
            kind: "bias correction",
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }
}

pub fn fit_bias_correction(pairs: &[(f64, f64)], mode: &str) -> Result<BiasCorrectionModel> {
    BiasCorrectionRegistry::default().get(mode)?.fit(pairs)
}

pub fn apply_bias_correction(bc: &BiasCorrectionModel, raw: f64, chronological_age: f64) -> Result<f64> {
    bc.apply(raw, chronological_age)
}

/// Sample mean and sample standard deviation (n−1 denominator; 0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `"5.30±3.29"`
pub fn format_mean_sd(mean: f64, sd: f64) -> String {
    format!("{mean:.2}±{sd:.2}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub age: f64,
    pub mae_voxel: f64,
    /// Mean predicted voxel age over the mask.
    pub mean_voxel_age: f64,
    pub global_age: Option<f64>,
    /// Hard foreground Dice of the arg-max segmentation.
    pub dice: Option<f64>,
    /// MAE after bias correction of the voxel grid.
    pub corrected_mae_voxel: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub label: String,
    pub rows: Vec<SampleResult>,
    pub mae_mean: f64,
    pub mae_sd: f64,
    pub dice_mean: Option<f64>,
    pub global_mae: Option<f64>,
    pub corrected: Option<(f64, f64)>,
}

impl TestReport {
    pub fn mae_cell(&self) -> String {
        format_mean_sd(self.mae_mean, self.mae_sd)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,age,mae_voxel,mean_voxel_age,global_age,dice,corrected_mae_voxel\n");
        let o = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{},{},{}",
                r.id,
                r.age,
                r.mae_voxel,
                r.mean_voxel_age,
                o(r.global_age),
                o(r.dice),
                o(r.corrected_mae_voxel)
            );
        }
        s
    }

    /// Aligned text table in the layout of a model-performance summary.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>4} {:>14} {:>10} {:>14}", "model", "n", "MAE_voxel", "Dice", "corrected*");
        let _ = writeln!(
            s,
            "{:<12} {:>4} {:>14} {:>10} {:>14}",
            self.label,
            self.rows.len(),
            self.mae_cell(),
            self.dice_mean.map(|d| format!("{d:.3}")).unwrap_or_else(|| "-".into()),
            self.corrected.map(|(m, sd)| format_mean_sd(m, sd)).unwrap_or_else(|| "-".into())
        );
        if self.corrected.is_some() {
            let _ = writeln!(s, "* bias-corrected; not used for comparisons");
        }
        s
    }
}

/// Per-sample MAE_voxel against chronological age over the whole volume, with mean±SD.
pub fn evaluate_testset(
    model: &mut UNet,
    samples: &[Sample],
    bias: Option<&BiasCorrectionModel>,
    label: &str,
) -> Result<TestReport> {
    if samples.is_empty() {
        return Err(Error::Validation("test set is empty".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let out = predict_full_volume(model, &s.image)?;
        let pad = compute_pad(&out.voxel_age, s.age, &s.mask)?;
        let mean_voxel_age = pad.mask_mean() + s.age;
        let dice = match out.seg_labels() {
            Some(l) => Some(hard_dice(&l, s.tissues.data(), out.seg_logits.as_ref().unwrap().len())?),
            None => None,
        };
        let corrected_mae_voxel = match bias {
            Some(bc) => Some(compute_pad(&bc.apply_volume(&out.voxel_age, s.age)?, s.age, &s.mask)?.sample_mae),
            None => None,
        };
        rows.push(SampleResult {
            id: s.id.clone(),
            age: s.age,
            mae_voxel: pad.sample_mae,
            mean_voxel_age,
            global_age: out.global_age,
            dice,
            corrected_mae_voxel,
        });
    }
    let maes: Vec<f64> = rows.iter().map(|r| r.mae_voxel).collect();
    let (mae_mean, mae_sd) = mean_sd(&maes);
    let dices: Vec<f64> = rows.iter().filter_map(|r| r.dice).collect();
    let globals: Vec<f64> = rows.iter().filter_map(|r| r.global_age.map(|g| (g - r.age).abs())).collect();
    let corrected: Vec<f64> = rows.iter().filter_map(|r| r.corrected_mae_voxel).collect();
    Ok(TestReport {
        label: label.to_string(),
        mae_mean,
        mae_sd,
        dice_mean: (!dices.is_empty()).then(|| mean_sd(&dices).0),
        global_mae: (!globals.is_empty()).then(|| mean_sd(&globals).0),
        corrected: (!corrected.is_empty()).then(|| mean_sd(&corrected)),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_round_trip_is_identity() {
        let v = Volume::from_fn([5, 3, 6], |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap();
        let (g, p, b) = pad_to_multiple(&v, 4);
        assert_eq!(p, [8, 4, 8]);
        assert_eq!(b, [1, 0, 1]);
        assert_eq!(unpad(&g, p, b, v.dims()), v.data());
    }

    #[test]
    fn bins_cover_closed_top() {
        let edges = vec![18.0, 28.0, 38.0];
        assert_eq!(bin_of(&edges, 18.0), Some(0));
        assert_eq!(bin_of(&edges, 28.0), Some(1));
        assert_eq!(bin_of(&edges, 38.0), Some(1));
        assert_eq!(bin_of(&edges, 38.5), None);
    }

    #[test]
    fn format_matches_table_cells() {
        assert_eq!(format_mean_sd(5.3, 3.29), "5.30±3.29");
        assert_eq!(format_mean_sd(-1.32, 6.66), "-1.32±6.66");
    }
}
