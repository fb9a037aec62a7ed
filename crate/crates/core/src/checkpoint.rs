//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every tensor as raw little-endian `f64`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::param::{Param, Parameterized};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PersonSearchModel, DET_PREFIX, INPUT_PREFIX};

const MAGIC: &[u8; 8] = b"PSCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Input layer and detection side-net only (end of stage 1).
    Detector,
    /// Everything, including batch-norm statistics and OIM memory.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub oim_queue_head: usize,
    /// Free-form provenance: regime, epoch, seed, metrics.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn collect(model: &PersonSearchModel, kind: CheckpointKind) -> Vec<(String, Param)> {
    let keep = |name: &str| kind == CheckpointKind::Full || name.starts_with(INPUT_PREFIX) || name.starts_with(DET_PREFIX);
    let mut out = Vec::new();
    model.visit_params("", &mut |name, p| {
        if keep(name) {
            out.push((name.to_string(), p.clone()));
        }
    });
    if kind == CheckpointKind::Full {
        model.visit_buffers("", &mut |name, p| out.push((name.to_string(), p.clone())));
    }
    out
}

pub fn save(model: &PersonSearchModel, kind: CheckpointKind, meta: serde_json::Value, path: &Path) -> Result<()> {
    let tensors = collect(model, kind);
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, p)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: p.shape.clone(),
                offset,
            };
            offset += p.numel();
            e
        })
        .collect();
    let header = CheckpointHeader {
        kind,
        config: model.cfg.clone(),
        oim_queue_head: model.oim.queue_head,
        meta,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for (_, p) in &tensors {
        for v in &p.value {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint into its header and a name-indexed tensor table.
pub fn read(path: &Path) -> Result<(CheckpointHeader, BTreeMap<String, Param>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| Error::json("checkpoint header", e))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() % 8 != 0 {
        return Err(Error::Checkpoint("tensor payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut table = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the file", e.name)))?;
        table.insert(e.name.clone(), Param::from_vec(&e.shape, slice.to_vec()));
    }
    Ok((header, table))
}

fn assign(target: &mut Param, name: &str, table: &BTreeMap<String, Param>, missing: &mut Vec<String>) -> Result<()> {
    match table.get(name) {
        Some(src) if src.shape == target.shape => {
            target.value.copy_from_slice(&src.value);
            target.grad = None;
            Ok(())
        }
        Some(src) => Err(Error::config(format!(
            "checkpoint tensor {name} has shape {:?}, model expects {:?}",
            src.shape, target.shape
        ))),
        None => {
            missing.push(name.to_string());
            Ok(())
        }
    }
}

/// Rebuilds a complete model from a full checkpoint.
pub fn load_model(path: &Path) -> Result<(PersonSearchModel, CheckpointHeader)> {
    let (header, table) = read(path)?;
    if header.kind != CheckpointKind::Full {
        return Err(Error::config(format!(
            "{} holds only a detector; a full checkpoint is needed",
            path.display()
        )));
    }
    let mut model = PersonSearchModel::new(header.config.clone(), 0)?;
    let mut missing = Vec::new();
    let mut result = Ok(());
    model.visit_params_mut("", &mut |name, p| {
        if result.is_ok() {
            result = assign(p, name, &table, &mut missing);
        }
    });
    model.visit_buffers_mut("", &mut |name, p| {
        if result.is_ok() {
            result = assign(p, name, &table, &mut missing);
        }
    });
    result?;
    if !missing.is_empty() {
        return Err(Error::config(format!("checkpoint lacks tensors: {}", missing.join(", "))));
    }
    if header.oim_queue_head >= model.oim.queue_size().max(1) {
        return Err(Error::Checkpoint("OIM queue head out of range".into()));
    }
    model.oim.queue_head = header.oim_queue_head;
    Ok((model, header))
}

/// Copies the input layer and detector out of a checkpoint into `model`.
/// The architectures must agree.
pub fn load_detector_into(model: &mut PersonSearchModel, path: &Path) -> Result<CheckpointHeader> {
    let (header, table) = read(path)?;
    if !model.cfg.detector_compatible(&header.config) {
        return Err(Error::config(format!(
            "detector checkpoint {} was trained with a different input layer or detector architecture",
            path.display()
        )));
    }
    let mut missing = Vec::new();
    let mut result = Ok(());
    model.visit_params_mut("", &mut |name, p| {
        if result.is_ok() && (name.starts_with(INPUT_PREFIX) || name.starts_with(DET_PREFIX)) {
            result = assign(p, name, &table, &mut missing);
        }
    });
    result?;
    if !missing.is_empty() {
        return Err(Error::config(format!("checkpoint lacks tensors: {}", missing.join(", "))));
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::FeatureMap;
    use crate::model::REID_PREFIX;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_width: 64,
            image_height: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn full_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = PersonSearchModel::new(cfg(), 5).unwrap();
        m.oim.push_unlabeled(&vec![1.0; 128]);
        m.reid.head.bn.running_mean.value[3] = 0.25;
        save(&m, CheckpointKind::Full, serde_json::json!({"epoch": 1}), &path).unwrap();
        let (back, header) = load_model(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.meta["epoch"], 1);
        let img = FeatureMap::filled(3, 64, 64, 1, 0.7).unwrap();
        assert_eq!(back.detect(&img).unwrap(), m.detect(&img).unwrap());
    }

    #[test]
    fn detector_checkpoint_carries_only_the_detector() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let a = PersonSearchModel::new(cfg(), 1).unwrap();
        save(&a, CheckpointKind::Detector, serde_json::Value::Null, &path).unwrap();
        let mut b = PersonSearchModel::new(cfg(), 2).unwrap();
        let reid_before = b.checksum(&[REID_PREFIX]);
        load_detector_into(&mut b, &path).unwrap();
        assert_eq!(a.detector_checksum(), b.detector_checksum());
        assert_eq!(b.checksum(&[REID_PREFIX]), reid_before);
        assert!(matches!(load_model(&path), Err(Error::Config(_))));
    }

    #[test]
    fn architecture_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let a = PersonSearchModel::new(cfg(), 1).unwrap();
        save(&a, CheckpointKind::Detector, serde_json::Value::Null, &path).unwrap();
        let mut other = cfg();
        other.detector.head_channels = 16;
        let mut b = PersonSearchModel::new(other, 1).unwrap();
        assert!(matches!(load_detector_into(&mut b, &path), Err(Error::Config(_))));
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(read(&path), Err(Error::Checkpoint(_))));
    }
}
