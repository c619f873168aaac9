//! 3-D grids (images, masks, label maps), patches, and file IO.
//!
//! All grids are stored x-fastest: voxel `(x, y, z)` lives at
//! `x + dx * (y + dy * z)`.

mod format;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{
    label_map_from_sidecar, load_labels, save_labels, FormatRegistry, Nifti1Format, RawSidecarFormat, VolumeFormat,
};

/// Axis-direction tag such as `RAS` or `LAS`. Only axis-aligned orientations are representable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Orientation([u8; 3]);

impl Orientation {
    pub const RAS: Orientation = Orientation(*b"RAS");

    /// Parses a three-letter tag; axis order must be x, y, z (R/L, A/P, S/I).
    pub fn parse(tag: &str) -> Result<Self> {
        let b = tag.as_bytes();
        if b.len() != 3
            || !matches!(b[0], b'R' | b'L')
            || !matches!(b[1], b'A' | b'P')
            || !matches!(b[2], b'S' | b'I')
        {
            return Err(Error::Validation(format!(
                "orientation '{tag}' is not canonical; reorient the image to x/y/z axis order first"
            )));
        }
        Ok(Orientation([b[0], b[1], b[2]]))
    }

    /// Sign of each axis in world space (+1 for R, A, S).
    pub fn signs(&self) -> [f32; 3] {
        [
            if self.0[0] == b'R' { 1.0 } else { -1.0 },
            if self.0[1] == b'A' { 1.0 } else { -1.0 },
            if self.0[2] == b'S' { 1.0 } else { -1.0 },
        ]
    }

    pub fn from_signs(signs: [f32; 3]) -> Self {
        Orientation([
            if signs[0] >= 0.0 { b'R' } else { b'L' },
            if signs[1] >= 0.0 { b'A' } else { b'P' },
            if signs[2] >= 0.0 { b'S' } else { b'I' },
        ])
    }
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation::RAS
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(std::str::from_utf8(&self.0).unwrap_or("???"))
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("dimensions must be >= 1, got {dims:?}")));
    }
    Ok(())
}

#[inline]
pub fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Scalar 32-bit image with voxel spacing (mm) and orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    orientation: Orientation,
    data: Vec<f32>,
}

impl Volume {
    /// Validates dimensions, spacing and finiteness.
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let (x, y, z) = unravel(dims, i);
            return Err(Error::Validation(format!("non-finite value at voxel ({x}, {y}, {z})")));
        }
        Ok(Self {
            dims,
            spacing,
            orientation: Orientation::RAS,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, 0.0)
    }

    /// Panics on zero dimensions or non-finite fill.
    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Self::new(dims, [1.0; 3], vec![value; dims.iter().product()]).expect("valid constant volume")
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, [1.0; 3], data)
    }

    /// Like [`Volume::new`] but allows NaN (used for no-data sentinels in atlas maps).
    pub fn with_nan_allowed(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("data length {} does not match dims {dims:?}", data.len())));
        }
        Ok(Self {
            dims,
            spacing,
            orientation: Orientation::RAS,
            data,
        })
    }

    pub fn with_orientation(mut self, o: Orientation) -> Self {
        self.orientation = o;
        self
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    /// Builds a volume with the same geometry and new (finite) data.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Same geometry, replaced data. Panics on length mismatch.
    pub fn with_data(&self, data: Vec<f32>) -> Volume {
        assert_eq!(data.len(), self.data.len(), "with_data length mismatch");
        Volume { data, ..self.clone() }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .filter(|v| v.is_finite())
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

fn unravel(dims: [usize; 3], i: usize) -> (usize, usize, usize) {
    (i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1]))
}

pub const BACKGROUND: u8 = 0;
pub const GM: u8 = 1;
pub const WM: u8 = 2;
pub const CSF: u8 = 3;

/// Integer label grid with a code → name table.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<u8>,
    label_map: BTreeMap<u8, String>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>, label_map: BTreeMap<u8, String>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("label data length {} does not match dims {dims:?}", data.len())));
        }
        if let Some(bad) = data.iter().find(|c| !label_map.contains_key(c)) {
            return Err(Error::Validation(format!("label code {bad} missing from label map")));
        }
        Ok(Self { dims, data, label_map })
    }

    /// Tissue labels with the standard coding 0=background, 1=GM, 2=WM, 3=CSF.
    pub fn tissues(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        Self::new(dims, data, tissue_label_map())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn label_map(&self) -> &BTreeMap<u8, String> {
        &self.label_map
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn count(&self, code: u8) -> usize {
        self.data.iter().filter(|&&c| c == code).count()
    }

    pub fn crop(&self, p: &Patch) -> Result<LabelVolume> {
        p.check(self.dims)?;
        Ok(LabelVolume {
            dims: p.size,
            data: crop_grid(&self.data, self.dims, p),
            label_map: self.label_map.clone(),
        })
    }
}

pub fn tissue_label_map() -> BTreeMap<u8, String> {
    [(BACKGROUND, "background"), (GM, "GM"), (WM, "WM"), (CSF, "CSF")]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect()
}

/// Binary brain mask with a nonzero voxel count.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainMask {
    dims: [usize; 3],
    data: Vec<bool>,
    count: usize,
}

impl BrainMask {
    /// Rejects empty masks.
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let m = Self::new_allow_empty(dims, data)?;
        if m.count == 0 {
            return Err(Error::Validation("brain mask has no voxels".into()));
        }
        Ok(m)
    }

    /// A mask that may be empty, e.g. a patch that misses the brain.
    pub fn new_allow_empty(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("mask length {} does not match dims {dims:?}", data.len())));
        }
        let count = data.iter().filter(|&&b| b).count();
        Ok(Self { dims, data, count })
    }

    /// Interprets any nonzero value as brain; values other than 0/1 are rejected.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        if let Some(bad) = v.data().iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(Error::Validation(format!("mask is not binary: found value {bad}")));
        }
        Self::new(v.dims(), v.data().iter().map(|&x| x != 0.0).collect())
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self::new(dims, vec![true; dims.iter().product()]).expect("full mask is valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Number of brain voxels.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.dims, [1.0; 3], self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .expect("mask volume is finite")
    }

    pub fn crop(&self, p: &Patch) -> Result<BrainMask> {
        p.check(self.dims)?;
        BrainMask::new_allow_empty(p.size, crop_grid(&self.data, self.dims, p))
    }
}

/// Axis-aligned sub-box of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl Patch {
    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            origin: [0; 3],
            size: dims,
        }
    }

    pub fn check(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.size[a] == 0 || self.origin[a] + self.size[a] > dims[a] {
                return Err(Error::Shape(format!(
                    "patch origin {:?} size {:?} does not fit volume dims {dims:?}",
                    self.origin, self.size
                )));
            }
        }
        Ok(())
    }
}

fn crop_grid<T: Copy>(data: &[T], dims: [usize; 3], p: &Patch) -> Vec<T> {
    let [sx, sy, sz] = p.size;
    let [ox, oy, oz] = p.origin;
    let mut out = Vec::with_capacity(sx * sy * sz);
    for z in 0..sz {
        for y in 0..sy {
            let start = linear_index(dims, ox, oy + y, oz + z);
            out.extend_from_slice(&data[start..start + sx]);
        }
    }
    out
}

/// Zeroes every voxel outside the mask.
pub fn apply_mask(v: &Volume, m: &BrainMask) -> Result<Volume> {
    if v.dims() != m.dims() {
        return Err(Error::Shape(format!(
            "volume dims {:?} do not match mask dims {:?}",
            v.dims(),
            m.dims()
        )));
    }
    let data = v
        .data()
        .iter()
        .zip(m.data())
        .map(|(&x, &keep)| if keep { x } else { 0.0 })
        .collect();
    Ok(v.with_data(data))
}

/// Uniformly random patch origin; `size` must fit inside `dims`.
pub fn sample_random_patch<R: Rng + ?Sized>(dims: [usize; 3], size: [usize; 3], rng: &mut R) -> Result<Patch> {
    for a in 0..3 {
        if size[a] == 0 || size[a] > dims[a] {
            return Err(Error::Shape(format!("patch size {size:?} exceeds volume dims {dims:?}")));
        }
    }
    let mut origin = [0usize; 3];
    for a in 0..3 {
        origin[a] = rng.gen_range(0..=dims[a] - size[a]);
    }
    Ok(Patch { origin, size })
}

/// Sub-grid copy; spacing and orientation are preserved.
pub fn crop(v: &Volume, p: &Patch) -> Result<Volume> {
    p.check(v.dims())?;
    Ok(Volume {
        dims: p.size,
        spacing: v.spacing,
        orientation: v.orientation,
        data: crop_grid(&v.data, v.dims, p),
    })
}

/// Loads a volume using the named format (`nifti1` or `raw`).
pub fn load_volume(path: impl AsRef<Path>, format: &str) -> Result<Volume> {
    FormatRegistry::default().get(format)?.read(path.as_ref())
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>, format: &str) -> Result<()> {
    FormatRegistry::default().get(format)?.write(v, path.as_ref())
}

/// Picks a format from the file extension.
pub fn format_for_path(path: impl AsRef<Path>) -> Result<&'static str> {
    FormatRegistry::default().detect(path.as_ref()).map(|f| f.name())
}
