//! Model checkpointing: a single binary file holding a named parameter
//! table (name → shape → float32 payload) plus a JSON sidecar carrying the
//! hyperparameters needed to rebuild the owning model.
//!
//! The binary layout is little-endian throughout:
//!
//! ```text
//! magic "VDCKPT01" | u32 record count
//! per record: u32 name len | name bytes (UTF-8)
//!             u32 group len | group bytes (UTF-8)
//!             u32 ndim | ndim × u64 dims
//!             Πdims × f32 values
//! ```
//!
//! Records are written in parameter-set order, so saving the same model
//! twice produces byte-identical files. Values are stored as `f32`;
//! restoring therefore rounds each weight to the nearest single-precision
//! value. Optimizer state and freeze flags are deliberately not stored —
//! both are properties of a training run, not of the model.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"VDCKPT01";

/// One entry of a parameter table as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Path of the JSON sidecar belonging to a binary checkpoint:
/// `model.ckpt` → `model.ckpt.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let name = checkpoint
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    checkpoint.with_file_name(format!("{name}.json"))
}

/// Write every parameter of `params` to `path` in table order.
pub fn save_param_table(path: &Path, params: &ParamSet) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let count = u32::try_from(params.len())
        .map_err(|_| Error::InvalidArgument("too many parameters for checkpoint".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for i in 0..params.len() {
        let p = params.get(i);
        write_str(&mut buf, &p.name)?;
        write_str(&mut buf, &p.group)?;
        let ndim = u32::try_from(p.tensor.shape.len())
            .map_err(|_| Error::InvalidArgument("tensor rank too large for checkpoint".into()))?;
        buf.extend_from_slice(&ndim.to_le_bytes());
        for &d in &p.tensor.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.tensor.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Read a parameter table written by [`save_param_table`].
pub fn load_param_table(path: &Path) -> Result<Vec<ParamRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;

    let magic = take(&bytes, &mut cursor, MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Parse(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let count = read_u32(&bytes, &mut cursor)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&bytes, &mut cursor)?;
        let group = read_str(&bytes, &mut cursor)?;
        let ndim = read_u32(&bytes, &mut cursor)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = read_u64(&bytes, &mut cursor)?;
            shape.push(usize::try_from(d).map_err(|_| {
                Error::Parse(format!("checkpoint dimension {d} overflows usize"))
            })?);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let raw = take(&bytes, &mut cursor, 4)?;
            data.push(f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64);
        }
        if records.iter().any(|r: &ParamRecord| r.name == name) {
            return Err(Error::Parse(format!(
                "checkpoint contains duplicate parameter {name}"
            )));
        }
        records.push(ParamRecord { name, group, shape, data });
    }
    if cursor != bytes.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - cursor
        )));
    }
    Ok(records)
}

/// Overwrite the tensors of `params` from `records`.
///
/// The match is strict in both directions: every record must name an
/// existing parameter with the same group and shape, and every parameter
/// must be covered by exactly one record. Freeze flags are left untouched.
pub fn restore_params(params: &mut ParamSet, records: &[ParamRecord]) -> Result<()> {
    if records.len() != params.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {} parameters, model expects {}",
            records.len(),
            params.len()
        )));
    }
    for record in records {
        let index = params.index_of(&record.name)?;
        let p = params.get(index);
        if p.group != record.group {
            return Err(Error::Parse(format!(
                "parameter {} belongs to group {} in the checkpoint but {} in the model",
                record.name, record.group, p.group
            )));
        }
        if p.tensor.shape != record.shape {
            return Err(Error::Parse(format!(
                "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                record.name, record.shape, p.tensor.shape
            )));
        }
        let tensor = Tensor::new(record.shape.clone(), record.data.clone())?;
        params.get_mut(index).tensor = tensor;
    }
    Ok(())
}

/// Serialize `config` as pretty JSON next to the binary checkpoint.
pub fn save_sidecar<T: Serialize>(checkpoint: &Path, config: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(config)?;
    let path = sidecar_path(checkpoint);
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Read the JSON sidecar belonging to `checkpoint`.
pub fn load_sidecar<T: DeserializeOwned>(checkpoint: &Path) -> Result<T> {
    let path = sidecar_path(checkpoint);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len())
        .map_err(|_| Error::InvalidArgument("string too long for checkpoint".into()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn take<'a>(bytes: &'a [u8], cursor: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = cursor
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Parse("checkpoint truncated".into()))?;
    let out = &bytes[*cursor..end];
    *cursor = end;
    Ok(out)
}

fn read_u32(bytes: &[u8], cursor: &mut usize) -> Result<u32> {
    let raw = take(bytes, cursor, 4)?;
    Ok(u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]))
}

fn read_u64(bytes: &[u8], cursor: &mut usize) -> Result<u64> {
    let raw = take(bytes, cursor, 8)?;
    Ok(u64::from_le_bytes(raw.try_into().expect("take returned 8 bytes")))
}

fn read_str(bytes: &[u8], cursor: &mut usize) -> Result<String> {
    let len = read_u32(bytes, cursor)? as usize;
    let raw = take(bytes, cursor, len)?;
    String::from_utf8(raw.to_vec())
        .map_err(|_| Error::Parse("checkpoint string is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::{VlmConfig, VlmModel};
    use tempfile::tempdir;

    fn sample_model() -> VlmModel {
        VlmModel::new(VlmConfig::micro(), 11).unwrap()
    }

    #[test]
    fn round_trip_preserves_structure_and_f32_rounded_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = sample_model();
        save_param_table(&path, &model.params).unwrap();
        let records = load_param_table(&path).unwrap();

        assert_eq!(records.len(), model.params.len());
        for (i, record) in records.iter().enumerate() {
            let p = model.params.get(i);
            assert_eq!(record.name, p.name);
            assert_eq!(record.group, p.group);
            assert_eq!(record.shape, p.tensor.shape);
            for (a, b) in record.data.iter().zip(&p.tensor.data) {
                assert_eq!(*a, (*b as f32) as f64, "value should be f32-rounded");
            }
        }
    }

    #[test]
    fn restore_overwrites_a_differently_seeded_model() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = sample_model();
        save_param_table(&path, &model.params).unwrap();

        let mut other = VlmModel::new(VlmConfig::micro(), 999).unwrap();
        let records = load_param_table(&path).unwrap();
        restore_params(&mut other.params, &records).unwrap();
        for i in 0..model.params.len() {
            let want: Vec<f64> = model.params.get(i).tensor.data.iter()
                .map(|&v| (v as f32) as f64)
                .collect();
            assert_eq!(other.params.get(i).tensor.data, want);
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let model = sample_model();
        save_param_table(&a, &model.params).unwrap();
        save_param_table(&b, &model.params).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn restore_rejects_missing_extra_reshaped_and_regrouped_params() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = sample_model();
        save_param_table(&path, &model.params).unwrap();
        let records = load_param_table(&path).unwrap();

        let mut target = sample_model();

        let mut missing = records.clone();
        missing.pop();
        assert!(restore_params(&mut target.params, &missing).is_err());

        let mut extra = records.clone();
        extra.push(ParamRecord {
            name: "bogus".into(),
            group: "visual".into(),
            shape: vec![1, 1],
            data: vec![0.0],
        });
        assert!(restore_params(&mut target.params, &extra).is_err());

        let mut reshaped = records.clone();
        reshaped[0].shape = vec![1, reshaped[0].data.len()];
        reshaped[0].shape.insert(0, 1);
        assert!(restore_params(&mut target.params, &reshaped).is_err());

        let mut regrouped = records.clone();
        regrouped[0].group = "elsewhere".into();
        assert!(restore_params(&mut target.params, &regrouped).is_err());

        // The pristine records still restore fine afterwards.
        restore_params(&mut target.params, &records).unwrap();
    }

    #[test]
    fn rejects_bad_magic_truncation_and_trailing_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = sample_model();
        save_param_table(&path, &model.params).unwrap();
        let good = fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] ^= 0xff;
            b
        };
        fs::write(&path, &bad_magic).unwrap();
        assert!(load_param_table(&path).is_err());

        fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(load_param_table(&path).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        fs::write(&path, &trailing).unwrap();
        assert!(load_param_table(&path).is_err());
    }

    #[test]
    fn model_save_load_round_trips_config_and_weights() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vlm.ckpt");
        let model = sample_model();
        model.save(&path).unwrap();
        assert!(sidecar_path(&path).exists());

        let loaded = VlmModel::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params.len(), model.params.len());
        for i in 0..model.params.len() {
            let want: Vec<f64> = model.params.get(i).tensor.data.iter()
                .map(|&v| (v as f32) as f64)
                .collect();
            assert_eq!(loaded.params.get(i).tensor.data, want);
        }
    }

    #[test]
    fn sidecar_path_appends_json_suffix() {
        assert_eq!(
            sidecar_path(Path::new("/tmp/run/model.ckpt")),
            PathBuf::from("/tmp/run/model.ckpt.json")
        );
    }
}
