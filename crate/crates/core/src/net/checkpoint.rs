//! Binary checkpoint: magic, version, JSON header, then little-endian f32 tensors.

use std::fs;
use std::io::Write;
use std::path::Path;

use nn3d::Parameterized;
use serde::{Deserialize, Serialize};

use super::{GlobalRegressor, NetConfig, RegressorConfig, UNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BAGECKPT";
const VERSION: u32 = 1;

/// Models that can be written to and restored from a checkpoint.
pub trait Checkpointable: Parameterized + Sized {
    const KIND: &'static str;
    fn config_json(&self) -> serde_json::Value;
    fn from_config_json(v: &serde_json::Value) -> Result<Self>;
}

impl Checkpointable for UNet {
    const KIND: &'static str = "unet";

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self.config()).expect("config serializes")
    }

    fn from_config_json(v: &serde_json::Value) -> Result<Self> {
        let cfg: NetConfig = serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        UNet::new(cfg, 0)
    }
}

impl Checkpointable for GlobalRegressor {
    const KIND: &'static str = "regressor";

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self.config()).expect("config serializes")
    }

    fn from_config_json(v: &serde_json::Value) -> Result<Self> {
        let cfg: RegressorConfig = serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        GlobalRegressor::new(cfg, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub params: Vec<usize>,
    pub buffers: Vec<usize>,
}

/// Writes atomically via a temporary sibling file and rename.
pub fn save_checkpoint<M: Checkpointable>(path: impl AsRef<Path>, model: &mut M, epoch: usize) -> Result<()> {
    let path = path.as_ref();
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let mut body = Vec::new();
    model.visit_params(&mut |p| {
        params.push(p.len());
        for v in &p.value {
            body.extend_from_slice(&v.to_le_bytes());
        }
    });
    model.visit_buffers(&mut |b| {
        buffers.push(b.len());
        for v in b.iter() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        kind: M::KIND.to_string(),
        config: model.config_json(),
        epoch,
        params,
        buffers,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + body.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&body);

    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_raw(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::Checkpoint(format!("{}: truncated header", path.display())));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((header, bytes[16 + hlen..].to_vec()))
}

pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    read_raw(path.as_ref()).map(|(h, _)| h)
}

/// Restores parameters into an existing model; the stored config must match exactly.
pub fn load_checkpoint_into<M: Checkpointable>(path: impl AsRef<Path>, model: &mut M) -> Result<usize> {
    let path = path.as_ref();
    let (header, body) = read_raw(path)?;
    if header.kind != M::KIND {
        return Err(Error::Checkpoint(format!(
            "{} holds a '{}' model, expected '{}'",
            path.display(),
            header.kind,
            M::KIND
        )));
    }
    let want = model.config_json();
    if header.config != want {
        return Err(Error::Checkpoint(format!(
            "{}: config mismatch; checkpoint has {}, model has {}",
            path.display(),
            header.config,
            want
        )));
    }
    fill(path, &header, &body, model)?;
    Ok(header.epoch)
}

fn fill<M: Checkpointable>(path: &Path, header: &CheckpointHeader, body: &[u8], model: &mut M) -> Result<()> {
    let total: usize = header.params.iter().chain(&header.buffers).sum();
    if body.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} bytes of tensor data, found {}",
            path.display(),
            total * 4,
            body.len()
        )));
    }
    let mut floats = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut err = None;
    let mut i = 0;
    model.visit_params(&mut |p| {
        if header.params.get(i) != Some(&p.len()) {
            err.get_or_insert_with(|| format!("parameter tensor {i} has the wrong length"));
        } else {
            for v in p.value.iter_mut() {
                *v = floats.next().unwrap();
            }
        }
        i += 1;
    });
    if i != header.params.len() {
        err.get_or_insert_with(|| "parameter tensor count differs".into());
    }
    let mut j = 0;
    model.visit_buffers(&mut |b| {
        if header.buffers.get(j) != Some(&b.len()) {
            err.get_or_insert_with(|| format!("buffer {j} has the wrong length"));
        } else {
            for v in b.iter_mut() {
                *v = floats.next().unwrap();
            }
        }
        j += 1;
    });
    match err {
        Some(e) => Err(Error::Checkpoint(format!("{}: {e}", path.display()))),
        None => Ok(()),
    }
}

impl UNet {
    /// Builds the model recorded in a checkpoint; returns it with the stored epoch.
    pub fn load(path: impl AsRef<Path>) -> Result<(UNet, usize)> {
        load_any(path.as_ref())
    }
}

impl GlobalRegressor {
    pub fn load(path: impl AsRef<Path>) -> Result<(GlobalRegressor, usize)> {
        load_any(path.as_ref())
    }
}

fn load_any<M: Checkpointable>(path: &Path) -> Result<(M, usize)> {
    let (header, body) = read_raw(path)?;
    if header.kind != M::KIND {
        return Err(Error::Checkpoint(format!(
            "{} holds a '{}' model, expected '{}'",
            path.display(),
            header.kind,
            M::KIND
        )));
    }
    let mut m = M::from_config_json(&header.config)?;
    fill(path, &header, &body, &mut m)?;
    Ok((m, header.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{param_checksum, TaskSet};

    fn small(ts: TaskSet) -> NetConfig {
        NetConfig {
            base_channels: 2,
            depth: 2,
            task_set: ts,
            global_hidden: 3,
            age_offset: 50.0,
            ..NetConfig::default()
        }
    }

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut a = UNet::new(small(TaskSet::SGV), 7).unwrap();
        a.visit_buffers(&mut |b| b[0] = 0.25);
        save_checkpoint(&p, &mut a, 12).unwrap();
        let (mut b, epoch) = UNet::load(&p).unwrap();
        assert_eq!(epoch, 12);
        assert_eq!(param_checksum(&mut a), param_checksum(&mut b));

        let mut other = UNet::new(small(TaskSet::V), 7).unwrap();
        let err = load_checkpoint_into(&p, &mut other).unwrap_err();
        assert!(err.to_string().contains("config mismatch"), "{err}");
        assert!(GlobalRegressor::load(&p).is_err());
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }
}
