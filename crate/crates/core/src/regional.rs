//! Regional PAD: per-region statistics of voxelwise PAD maps, cohort summaries and atlas volumes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmaps::{format_mean_sd, mean_sd, PADMap};
use crate::phantom::PhantomSpec;
use crate::volume::{load_labels, save_labels, LabelVolume, Volume};

/// Names of the nine standard regions, in code order 1..=9.
pub const STANDARD_REGIONS: [&str; 9] = [
    "Caudate",
    "Cerebellum",
    "Frontal Lobe",
    "Insula",
    "Occipital Lobe",
    "Parietal Lobe",
    "Putamen",
    "Temporal Lobe",
    "Thalamus",
];

/// Label grid of disjoint regions; code 0 is outside every region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionAtlas {
    labels: LabelVolume,
    regions: BTreeMap<u8, String>,
}

impl RegionAtlas {
    pub fn new(labels: LabelVolume) -> Result<Self> {
        let regions: BTreeMap<u8, String> = labels
            .label_map()
            .iter()
            .filter(|(&c, _)| c != 0)
            .map(|(&c, n)| (c, n.clone()))
            .collect();
        if regions.is_empty() {
            return Err(Error::Validation("atlas defines no regions".into()));
        }
        Ok(Self { labels, regions })
    }

    /// Requires exactly the nine standard region names.
    pub fn new_standard(labels: LabelVolume) -> Result<Self> {
        let a = Self::new(labels)?;
        let mut names: Vec<&str> = a.regions.values().map(String::as_str).collect();
        names.sort_unstable();
        if names != STANDARD_REGIONS {
            return Err(Error::Validation(format!(
                "standard atlas must name exactly {STANDARD_REGIONS:?}, found {names:?}"
            )));
        }
        Ok(a)
    }

    pub fn load(path: impl AsRef<Path>, format: &str) -> Result<Self> {
        Self::new(load_labels(path, format)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, format: &str) -> Result<()> {
        save_labels(&self.labels, path, format)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.labels.dims()
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    /// Region code → name, excluding code 0.
    pub fn regions(&self) -> &BTreeMap<u8, String> {
        &self.regions
    }

    /// Nine-region concentric atlas in the common phantom space.
    ///
    /// Deep structures sit near the centre; lobes split the outer shell by direction.
    pub fn phantom(dims: [usize; 3]) -> Result<Self> {
        let spec = PhantomSpec::scaled(dims, 50.0, 0);
        let outer = spec.brain_radius + spec.radius_jitter + spec.center_jitter * 3f64.sqrt();
        let code = |name: &str| STANDARD_REGIONS.iter().position(|n| *n == name).unwrap() as u8 + 1;
        let c: Vec<f64> = dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let (px, py, pz) = (x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]);
                    let r = (px * px + py * py + pz * pz).sqrt() / outer;
                    let name = if r > 1.0 {
                        None
                    } else if r < 0.2 {
                        Some("Thalamus")
                    } else if r < 0.4 {
                        Some(if px < 0.0 { "Caudate" } else { "Putamen" })
                    } else {
                        let norm = r * outer;
                        Some(if pz < -0.35 * outer && py < 0.0 {
                            "Cerebellum"
                        } else if px.abs() > 0.75 * norm {
                            "Insula"
                        } else if pz < 0.0 {
                            "Temporal Lobe"
                        } else if py > 0.2 * outer {
                            "Frontal Lobe"
                        } else if py < -0.2 * outer && pz < 0.3 * outer {
                            "Occipital Lobe"
                        } else {
                            "Parietal Lobe"
                        })
                    };
                    data.push(name.map_or(0, code));
                }
            }
        }
        let mut map: BTreeMap<u8, String> = STANDARD_REGIONS
            .iter()
            .enumerate()
            .map(|(i, n)| (i as u8 + 1, n.to_string()))
            .collect();
        map.insert(0, "outside".into());
        Self::new_standard(LabelVolume::new(dims, data, map)?)
    }
}

/// Statistics of one region in one PAD map. `mean` and `sd` are absent when no mask voxel falls in the region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStat {
    pub code: u8,
    pub name: String,
    pub count: usize,
    pub mean: Option<f64>,
    /// Sample SD (n−1); 0 for a single voxel.
    pub sd: Option<f64>,
}

/// Mean and SD of PAD over (region ∩ brain mask) for every atlas region.
pub fn regional_means(pad: &PADMap, atlas: &RegionAtlas) -> Result<Vec<RegionStat>> {
    if pad.dims != atlas.dims() {
        return Err(Error::Alignment(format!(
            "PAD map dims {:?} differ from atlas dims {:?}",
            pad.dims,
            atlas.dims()
        )));
    }
    let mut acc: BTreeMap<u8, (usize, f64)> = atlas.regions().keys().map(|&c| (c, (0, 0.0))).collect();
    let codes = atlas.labels().data();
    for ((&v, &m), &c) in pad.data.iter().zip(pad.mask.data()).zip(codes) {
        if m && c != 0 {
            if let Some(a) = acc.get_mut(&c) {
                a.0 += 1;
                a.1 += v;
            }
        }
    }
    let means: BTreeMap<u8, f64> = acc.iter().filter(|(_, a)| a.0 > 0).map(|(&c, a)| (c, a.1 / a.0 as f64)).collect();
    let mut ss: BTreeMap<u8, f64> = BTreeMap::new();
    for ((&v, &m), &c) in pad.data.iter().zip(pad.mask.data()).zip(codes) {
        if m {
            if let Some(mu) = means.get(&c) {
                *ss.entry(c).or_default() += (v - mu).powi(2);
            }
        }
    }
    Ok(atlas
        .regions()
        .iter()
        .map(|(&code, name)| {
            let n = acc[&code].0;
            RegionStat {
                code,
                name: name.clone(),
                count: n,
                mean: means.get(&code).copied(),
                sd: (n > 0).then(|| if n > 1 { (ss[&code] / (n - 1) as f64).sqrt() } else { 0.0 }),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionalRow {
    pub code: u8,
    pub name: String,
    /// Subjects in which the region had mask voxels.
    pub n: usize,
    /// Mean and SD across subjects of the per-subject regional mean PAD.
    pub pad_mean: f64,
    pub pad_sd: f64,
    /// Mean and SD across subjects of the per-subject regional SD.
    pub sd_mean: f64,
    pub sd_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionalReport {
    pub rows: Vec<RegionalRow>,
    pub cohort_n: usize,
    pub bias_corrected: bool,
}

impl RegionalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,n,pad_mean,pad_sd,sd_mean,sd_sd,avg_regional_pad,regional_sd\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.name,
                r.n,
                r.pad_mean,
                r.pad_sd,
                r.sd_mean,
                r.sd_sd,
                format_mean_sd(r.pad_mean, r.pad_sd),
                format_mean_sd(r.sd_mean, r.sd_sd)
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16} {:>16} {:>16}\n", "Region", "Avg regional PAD", "Regional SD");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>16} {:>16}",
                r.name,
                format_mean_sd(r.pad_mean, r.pad_sd),
                format_mean_sd(r.sd_mean, r.sd_sd)
            );
        }
        let _ = writeln!(
            s,
            "n = {}{}",
            self.cohort_n,
            if self.bias_corrected { ", bias-corrected" } else { "" }
        );
        s
    }

    pub fn row(&self, name: &str) -> Option<&RegionalRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Across-subject summary of regional means and SDs. Regions absent in every subject are dropped.
pub fn cohort_regional_report(pads: &[PADMap], atlas: &RegionAtlas) -> Result<RegionalReport> {
    if pads.is_empty() {
        return Err(Error::Validation("cohort is empty".into()));
    }
    let corrected = pads[0].corrected;
    let per: Vec<Vec<RegionStat>> = pads.iter().map(|p| regional_means(p, atlas)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, (&code, name)) in atlas.regions().iter().enumerate() {
        let means: Vec<f64> = per.iter().filter_map(|s| s[i].mean).collect();
        let sds: Vec<f64> = per.iter().filter_map(|s| s[i].sd).collect();
        if means.is_empty() {
            continue;
        }
        let (pad_mean, pad_sd) = mean_sd(&means);
        let (sd_mean, sd_sd) = mean_sd(&sds);
        rows.push(RegionalRow {
            code,
            name: name.clone(),
            n: means.len(),
            pad_mean,
            pad_sd,
            sd_mean,
            sd_sd,
        });
    }
    Ok(RegionalReport {
        rows,
        cohort_n: pads.len(),
        bias_corrected: corrected,
    })
}

/// Fills every region with its cohort mean PAD; voxels outside all regions are NaN.
pub fn build_regional_atlas_volume(report: &RegionalReport, atlas: &RegionAtlas) -> Result<Volume> {
    let mut value: BTreeMap<u8, f32> = BTreeMap::new();
    for (&code, name) in atlas.regions() {
        let row = report
            .rows
            .iter()
            .find(|r| r.code == code && &r.name == name)
            .ok_or_else(|| Error::Validation(format!("report has no row for atlas region '{name}'")))?;
        value.insert(code, row.pad_mean as f32);
    }
    let data = atlas
        .labels()
        .data()
        .iter()
        .map(|c| value.get(c).copied().unwrap_or(f32::NAN))
        .collect();
    Volume::with_nan_allowed(atlas.dims(), [1.0; 3], data)
}
