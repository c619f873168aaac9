//! On-disk volume formats behind a name-keyed registry.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{LabelVolume, Orientation, Volume};
use crate::error::{Error, Result};

/// A file format that can read and write [`Volume`]s.
pub trait VolumeFormat: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether the path has an extension this format owns.
    fn matches(&self, path: &Path) -> bool;
    fn read(&self, path: &Path) -> Result<Volume>;
    fn write(&self, v: &Volume, path: &Path) -> Result<()>;
}

/// Formats registered by name.
pub struct FormatRegistry {
    formats: Vec<Box<dyn VolumeFormat>>,
}

impl Default for FormatRegistry {
    fn default() -> Self {
        let mut r = Self { formats: Vec::new() };
        r.register(Box::new(Nifti1Format));
        r.register(Box::new(RawSidecarFormat));
        r
    }
}

impl FormatRegistry {
    pub fn register(&mut self, f: Box<dyn VolumeFormat>) {
        self.formats.retain(|g| g.name() != f.name());
        self.formats.push(f);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.formats.iter().map(|f| f.name()).collect()
    }

    /// Looks up a format and wraps it so the path extension is checked first.
    pub fn get(&self, name: &str) -> Result<Checked<'_>> {
        let name = if name == "raw-with-sidecar" { "raw" } else { name };
        self.formats
            .iter()
            .find(|f| f.name() == name)
            .map(|f| Checked(f.as_ref()))
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "volume format",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn detect(&self, path: &Path) -> Result<&dyn VolumeFormat> {
        self.formats
            .iter()
            .find(|f| f.matches(path))
            .map(|f| f.as_ref())
            .ok_or_else(|| Error::Validation(format!("cannot infer a volume format from '{}'", path.display())))
    }
}

pub struct Checked<'a>(&'a dyn VolumeFormat);

impl Checked<'_> {
    fn check(&self, path: &Path) -> Result<()> {
        if !self.0.matches(path) {
            return Err(Error::Validation(format!(
                "file '{}' does not have an extension of format '{}'",
                path.display(),
                self.0.name()
            )));
        }
        Ok(())
    }

    pub fn read(&self, path: &Path) -> Result<Volume> {
        self.check(path)?;
        self.0.read(path)
    }

    pub fn write(&self, v: &Volume, path: &Path) -> Result<()> {
        self.check(path)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.0.write(v, path)
    }
}

fn finish(path: &Path, dims: [usize; 3], spacing: [f32; 3], o: Orientation, data: Vec<f32>) -> Result<Volume> {
    match Volume::new(dims, spacing, data) {
        Ok(v) => Ok(v.with_orientation(o)),
        Err(e) => Err(Error::ingest(path, e.to_string())),
    }
}

/// NIfTI-1 single-file images (`.nii`, `.nii.gz`).
pub struct Nifti1Format;

impl Nifti1Format {
    /// Orientation and spacing from the header; anything but an axis-aligned,
    /// unpermuted grid is rejected.
    fn geometry(path: &Path, h: &NiftiHeader) -> Result<([f32; 3], Orientation)> {
        let m: [[f64; 3]; 3] = if h.sform_code > 0 {
            let rows = [h.srow_x, h.srow_y, h.srow_z];
            let mut m = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] = rows[r][c] as f64;
                }
            }
            m
        } else if h.qform_code > 0 {
            let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let r = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ];
            let s = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64 * qfac];
            let mut m = [[0.0; 3]; 3];
            for row in 0..3 {
                for col in 0..3 {
                    m[row][col] = r[row][col] * s[col];
                }
            }
            m
        } else {
            let mut m = [[0.0; 3]; 3];
            for a in 0..3 {
                m[a][a] = h.pixdim[a + 1] as f64;
            }
            m
        };
        let scale = m.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
        for r in 0..3 {
            for c in 0..3 {
                if r != c && m[r][c].abs() > 1e-4 * scale {
                    return Err(Error::ingest(
                        path,
                        "voxel axes are permuted or oblique; reorient to standard axis order before ingestion",
                    ));
                }
            }
        }
        let mut spacing = [0.0f32; 3];
        let mut signs = [1.0f32; 3];
        for a in 0..3 {
            if m[a][a] == 0.0 {
                return Err(Error::ingest(path, format!("missing voxel spacing for axis {a}")));
            }
            spacing[a] = m[a][a].abs() as f32;
            signs[a] = m[a][a].signum() as f32;
        }
        Ok((spacing, Orientation::from_signs(signs)))
    }
}

impl VolumeFormat for Nifti1Format {
    fn name(&self) -> &'static str {
        "nifti1"
    }

    fn matches(&self, path: &Path) -> bool {
        let s = path.to_string_lossy();
        s.ends_with(".nii") || s.ends_with(".nii.gz")
    }

    fn read(&self, path: &Path) -> Result<Volume> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let obj = ReaderOptions::new()
            .read_file(path)
            .map_err(|e| Error::ingest(path, e.to_string()))?;
        let h = obj.header().clone();
        let rank = h.dim[0] as usize;
        if !(1..=7).contains(&rank) {
            return Err(Error::ingest(path, "header field 'dim' is missing or invalid"));
        }
        let mut dims = [1usize; 3];
        for (a, d) in dims.iter_mut().enumerate().take(rank.min(3)) {
            *d = h.dim[a + 1] as usize;
        }
        if h.dim[4..=rank.max(3)].iter().any(|&d| d > 1) {
            return Err(Error::ingest(path, "only single-frame 3-D images are supported"));
        }
        let (spacing, orientation) = Self::geometry(path, &h)?;
        let arr = obj
            .into_volume()
            .into_ndarray::<f32>()
            .map_err(|e| Error::ingest(path, e.to_string()))?;
        // transposed iteration visits x fastest
        let data: Vec<f32> = arr.t().iter().copied().collect();
        finish(path, dims, spacing, orientation, data)
    }

    fn write(&self, v: &Volume, path: &Path) -> Result<()> {
        let [dx, dy, dz] = v.dims();
        let arr = Array3::from_shape_vec((dx, dy, dz).f(), v.data().to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let signs = v.orientation().signs();
        let sp = v.spacing();
        let mut h = NiftiHeader {
            qform_code: 0,
            sform_code: 2,
            xyzt_units: 2,
            ..NiftiHeader::default()
        };
        h.pixdim[1..4].copy_from_slice(&sp);
        h.srow_x = [signs[0] * sp[0], 0.0, 0.0, 0.0];
        h.srow_y = [0.0, signs[1] * sp[1], 0.0, 0.0];
        h.srow_z = [0.0, 0.0, signs[2] * sp[2], 0.0];
        WriterOptions::new(path)
            .reference_header(&h)
            .write_nifti(&arr)
            .map_err(|e| match e {
                nifti::NiftiError::Io(io) => Error::io(path, io),
                other => Error::ingest(path, other.to_string()),
            })
    }
}

/// Little-endian f32 data (`.raw`, x fastest) plus a `key = value` text sidecar at `<path>.txt`.
pub struct RawSidecarFormat;

impl RawSidecarFormat {
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".txt");
        PathBuf::from(s)
    }
}

fn parse_triple<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = v.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
    if parts.len() != 3 {
        return Err(Error::ingest(path, format!("field '{key}' needs three values, got '{v}'")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| Error::ingest(path, format!("field '{key}' has bad value '{p}'")))?);
    }
    let mut it = out.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

impl VolumeFormat for RawSidecarFormat {
    fn name(&self) -> &'static str {
        "raw"
    }

    fn matches(&self, path: &Path) -> bool {
        path.extension().is_some_and(|e| e == "raw")
    }

    fn read(&self, path: &Path) -> Result<Volume> {
        let side = Self::sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let mut fields = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::ingest(&side, format!("malformed sidecar line '{line}'")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let field = |k: &str| fields.get(k).ok_or_else(|| Error::ingest(&side, format!("missing field '{k}'")));
        let dims: [usize; 3] = parse_triple(&side, "dims", field("dims")?)?;
        let spacing: [f32; 3] = parse_triple(&side, "spacing", field("spacing")?)?;
        let dtype = fields.get("dtype").map(String::as_str).unwrap_or("f32le");
        if dtype != "f32le" {
            return Err(Error::ingest(&side, format!("unsupported dtype '{dtype}'")));
        }
        let orientation = match fields.get("orientation") {
            Some(t) => Orientation::parse(t).map_err(|e| Error::ingest(&side, e.to_string()))?,
            None => Orientation::RAS,
        };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let n: usize = dims.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::ingest(
                path,
                format!("expected {} bytes for dims {dims:?}, found {}", n * 4, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        finish(path, dims, spacing, orientation, data)
    }

    fn write(&self, v: &Volume, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(v.len() * 4);
        for x in v.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let [dx, dy, dz] = v.dims();
        let [sx, sy, sz] = v.spacing();
        let side = Self::sidecar_path(path);
        let text = format!(
            "dims = {dx} {dy} {dz}\nspacing = {sx} {sy} {sz}\ndtype = f32le\norientation = {}\n",
            v.orientation()
        );
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }
}

fn labels_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels.txt");
    PathBuf::from(s)
}

/// Parses `code name` lines (name may contain spaces).
pub fn label_map_from_sidecar(path: &Path) -> Result<BTreeMap<u8, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (code, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::ingest(path, format!("malformed label line '{line}'")))?;
        let code: u8 = code
            .parse()
            .map_err(|_| Error::ingest(path, format!("bad label code '{code}'")))?;
        map.insert(code, name.trim().to_string());
    }
    Ok(map)
}

/// Writes the label grid as a volume plus a `<path>.labels.txt` name table.
pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>, format: &str) -> Result<()> {
    let path = path.as_ref();
    let v = Volume::new(l.dims(), [1.0; 3], l.data().iter().map(|&c| c as f32).collect())?;
    FormatRegistry::default().get(format)?.write(&v, path)?;
    let text: String = l.label_map().iter().map(|(k, n)| format!("{k} {n}\n")).collect();
    let side = labels_sidecar(path);
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Reads a label grid; without a name sidecar every code present is named by its number.
pub fn load_labels(path: impl AsRef<Path>, format: &str) -> Result<LabelVolume> {
    let path = path.as_ref();
    let v = FormatRegistry::default().get(format)?.read(path)?;
    let mut codes = Vec::with_capacity(v.len());
    for &x in v.data() {
        if x < 0.0 || x > 255.0 || x.fract() != 0.0 {
            return Err(Error::ingest(path, format!("label value {x} is not an integer code in 0..=255")));
        }
        codes.push(x as u8);
    }
    let side = labels_sidecar(path);
    let map = if side.exists() {
        label_map_from_sidecar(&side)?
    } else {
        let mut m: BTreeMap<u8, String> = codes.iter().map(|&c| (c, c.to_string())).collect();
        m.entry(0).or_insert_with(|| "0".into());
        m
    };
    LabelVolume::new(v.dims(), codes, map).map_err(|e| Error::ingest(path, e.to_string()))
}
