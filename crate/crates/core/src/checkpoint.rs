//! Checkpoint format: the magic bytes `DEGTA1\n`, one JSON header holding
//! the config and an ordered parameter manifest (name, shape, byte offset),
//! then a little-endian `f64` blob in manifest order. Round-trips are
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DegtaError, Result};
use crate::linalg::Matrix;
use crate::model::{DeGTAConfig, DeGTAModel, Task};

const MAGIC: &[u8] = b"DEGTA1\n";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: DeGTAConfig,
    d_raw: usize,
    num_outputs: usize,
    task: Task,
    params: Vec<ManifestEntry>,
}

pub fn save_checkpoint(path: &Path, model: &DeGTAModel) -> Result<()> {
    let mut manifest = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    model.params.visit(&mut |name, m: &Matrix| {
        manifest.push(ManifestEntry {
            name,
            shape: [m.rows(), m.cols()],
            offset: blob.len(),
        });
        for v in m.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        config: model.config.clone(),
        d_raw: model.d_raw,
        num_outputs: model.num_outputs,
        task: model.task,
        params: manifest,
    };
    let mut bytes = Vec::with_capacity(MAGIC.len() + blob.len() + 512);
    bytes.extend_from_slice(MAGIC);
    serde_json::to_writer(&mut bytes, &header)?;
    bytes.extend_from_slice(&blob);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DeGTAModel> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(DegtaError::Checkpoint(format!(
            "{}: missing DEGTA1 magic",
            path.display()
        )));
    }
    let rest = &bytes[MAGIC.len()..];
    let mut stream = serde_json::Deserializer::from_slice(rest).into_iter::<Header>();
    let header = stream
        .next()
        .ok_or_else(|| DegtaError::Checkpoint("empty header".into()))?
        .map_err(|e| DegtaError::Checkpoint(format!("bad header: {e}")))?;
    let blob = &rest[stream.byte_offset()..];

    let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(header.config.seed);
    let mut model = DeGTAModel::new(
        header.config,
        header.d_raw,
        header.num_outputs,
        header.task,
        &mut rng,
    )?;

    let mut idx = 0usize;
    let mut err: Option<DegtaError> = None;
    model.params.visit_mut(&mut |name, m: &mut Matrix| {
        if err.is_some() {
            return;
        }
        let Some(entry) = header.params.get(idx) else {
            err = Some(DegtaError::Checkpoint(format!(
                "manifest too short at '{name}'"
            )));
            return;
        };
        if entry.name != name || entry.shape != [m.rows(), m.cols()] {
            err = Some(DegtaError::Checkpoint(format!(
                "manifest mismatch: expected '{name}' {:?}, found '{}' {:?}",
                (m.rows(), m.cols()),
                entry.name,
                entry.shape
            )));
            return;
        }
        let len = m.rows() * m.cols() * 8;
        let Some(chunk) = blob.get(entry.offset..entry.offset + len) else {
            err = Some(DegtaError::Checkpoint(format!(
                "blob too short for '{name}'"
            )));
            return;
        };
        for (k, v) in m.data_mut().iter_mut().enumerate() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&chunk[k * 8..k * 8 + 8]);
            *v = f64::from_le_bytes(b);
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != header.params.len() {
        return Err(DegtaError::Checkpoint(format!(
            "manifest has {} extra entries",
            header.params.len() - idx
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn model() -> DeGTAModel {
        let cfg = DeGTAConfig {
            d: 6,
            d_hidden: 4,
            d_attr_hidden: 5,
            ..DeGTAConfig::with_k(3)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        DeGTAModel::new(cfg, 4, 3, Task::NodeClassification, &mut rng).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &m).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let mut a = Vec::new();
        m.params.visit(&mut |n, p| a.push((n, p.data().to_vec())));
        let mut b = Vec::new();
        loaded.params.visit(&mut |n, p| b.push((n, p.data().to_vec())));
        assert_eq!(a.len(), b.len());
        for ((na, da), (nb, db)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(da.len(), db.len());
            for (x, y) in da.iter().zip(db) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {na}");
            }
        }

        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTDEGTA").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(DegtaError::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_blob_rejected() {
        let m = model();
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
