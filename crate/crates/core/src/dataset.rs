//! Samples and the CSV manifest that lists them on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{load_labels, load_volume, save_labels, save_volume, BrainMask, LabelVolume, Volume};

/// One subject: image, brain mask, tissue labels and chronological age.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Volume,
    pub mask: BrainMask,
    pub tissues: LabelVolume,
    pub age: f64,
}

impl Sample {
    pub fn dims(&self) -> [usize; 3] {
        self.image.dims()
    }

    pub fn check(&self) -> Result<()> {
        if self.mask.dims() != self.image.dims() || self.tissues.dims() != self.image.dims() {
            return Err(Error::Shape(format!(
                "sample {}: image {:?}, mask {:?}, labels {:?} differ",
                self.id,
                self.image.dims(),
                self.mask.dims(),
                self.tissues.dims()
            )));
        }
        Ok(())
    }
}

/// One manifest line; paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub age: f64,
    pub image: String,
    pub mask: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

fn extension(format: &str) -> Result<&'static str> {
    match format {
        "nifti1" => Ok("nii.gz"),
        "raw" | "raw-with-sidecar" => Ok("raw"),
        other => Err(Error::UnknownStrategy {
            kind: "volume format",
            name: other.to_string(),
            available: "nifti1, raw".into(),
        }),
    }
}

fn format_of(path: &Path) -> Result<&'static str> {
    crate::volume::format_for_path(path)
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
        let rows = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()
            .map_err(|e| Error::ingest(path, e.to_string()))?;
        if rows.is_empty() {
            return Err(Error::InsufficientData(format!("manifest {} lists no samples", path.display())));
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::ingest(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.id.clone()).collect()
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_row(&self, row: &ManifestRow) -> Result<Sample> {
        let img = self.resolve(&row.image);
        let image = load_volume(&img, format_of(&img)?)?;
        let mp = self.resolve(&row.mask);
        let mask = BrainMask::from_volume(&load_volume(&mp, format_of(&mp)?)?)
            .map_err(|e| Error::ingest(&mp, e.to_string()))?;
        let lp = self.resolve(&row.labels);
        let tissues = load_labels(&lp, format_of(&lp)?)?;
        let s = Sample {
            id: row.id.clone(),
            image,
            mask,
            tissues,
            age: row.age,
        };
        s.check()?;
        Ok(s)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.rows.iter().map(|r| self.load_row(r)).collect()
    }
}

/// Writes each sample as `<id>_image`, `<id>_mask`, `<id>_labels` plus `manifest.csv`.
pub fn write_samples(samples: &[Sample], dir: impl AsRef<Path>, format: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = extension(format)?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let image = format!("{}_image.{ext}", s.id);
        let mask = format!("{}_mask.{ext}", s.id);
        let labels = format!("{}_labels.{ext}", s.id);
        save_volume(&s.image, dir.join(&image), format)?;
        save_volume(&s.mask.to_volume(), dir.join(&mask), format)?;
        save_labels(&s.tissues, dir.join(&labels), format)?;
        rows.push(ManifestRow {
            id: s.id.clone(),
            age: s.age,
            image,
            mask,
            labels,
        });
    }
    let path = dir.join("manifest.csv");
    Manifest {
        root: dir.to_path_buf(),
        rows,
    }
    .write(&path)?;
    Ok(path)
}
