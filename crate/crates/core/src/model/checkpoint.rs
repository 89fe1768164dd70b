//! Binary checkpoint serialization.
//!
//! Layout: 4-byte magic `CLAB`, u32 LE format version, u64 LE header length,
//! a JSON header (format version, model config, training step, tensor
//! shapes), then every tensor's data as f32 little-endian in enumeration
//! order. Weights of any precision save as f32; loading widens losslessly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tensor_specs, ModelConfig, TensorSpec, Weights};
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::util;

const MAGIC: &[u8; 4] = b"CLAB";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    step: u64,
    tensors: Vec<TensorSpec>,
}

/// Saves weights (plus the training step that produced them) to `path`.
pub fn save_checkpoint<F: Real>(path: &Path, w: &Weights<F>, step: u64) -> Result<()> {
    let specs = tensor_specs(&w.config);
    let header = Header {
        version: FORMAT_VERSION,
        config: w.config.clone(),
        step,
        tensors: specs,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header encode: {e}")))?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    for (_, data) in w.tensors() {
        for &x in data {
            out.write_all(&(x.to_f64() as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Loads a checkpoint, converting the stored f32 payload to `F`.
/// Returns the weights and the training step recorded at save time.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(Weights<F>, u64)> {
    let mut input = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint format version {version}",
            path.display()
        )));
    }
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf)?;
    let header_len = u64::from_le_bytes(u64buf) as usize;
    let mut header_json = vec![0u8; header_len];
    input.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Format(format!("{}: checkpoint header: {e}", path.display())))?;

    let expected = tensor_specs(&header.config);
    if header.tensors != expected {
        return Err(Error::Format(format!(
            "{}: tensor table does not match the stored config",
            path.display()
        )));
    }

    let mut w = Weights::<F>::zeros(&header.config);
    for (spec, (_, data)) in expected.iter().zip(w.tensors_mut()) {
        debug_assert_eq!(spec.len(), data.len());
        let mut bytes = vec![0u8; spec.len() * 4];
        input.read_exact(&mut bytes).map_err(|_| {
            Error::Format(format!(
                "{}: truncated payload in tensor {}",
                path.display(),
                spec.name
            ))
        })?;
        for (x, chunk) in data.iter_mut().zip(bytes.chunks_exact(4)) {
            let raw = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            *x = F::from_f64(raw as f64);
        }
    }
    let mut tail = [0u8; 1];
    if input.read(&mut tail)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    Ok((w, header.step))
}

/// Content hash of a checkpoint file, for artifact provenance.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:016x}", util::fnv1a64(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VisionConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 32,
            max_seq_len: 32,
            vocab_size: 20,
            norm_eps: 1e-6,
            seed: 3,
            vision: Some(VisionConfig { n_encoder_layers: 1, grid_size: 3 }),
        }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpts/model.bin");
        let w = Weights::<f32>::init(&cfg());
        save_checkpoint(&path, &w, 42).unwrap();

        let (loaded, step) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(step, 42);
        assert_eq!(loaded.config, w.config);
        for ((name_a, a), (name_b, b)) in w.tensors().iter().zip(loaded.tensors().iter()) {
            assert_eq!(name_a, name_b);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {name_a} changed");
            }
        }
    }

    #[test]
    fn loading_as_f64_widens_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let w = Weights::<f32>::init(&cfg());
        save_checkpoint(&path, &w, 0).unwrap();
        let (wide, _) = load_checkpoint::<f64>(&path).unwrap();
        for ((_, a), (_, b)) in w.tensors().iter().zip(wide.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f64, *y);
            }
        }
    }

    #[test]
    fn rejects_foreign_and_damaged_files() {
        let dir = tempfile::tempdir().unwrap();

        let garbage = dir.path().join("garbage.bin");
        std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&garbage), Err(Error::Format(_))));

        let path = dir.path().join("model.bin");
        let w = Weights::<f32>::init(&cfg());
        save_checkpoint(&path, &w, 7).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("truncated.bin");
        std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&truncated), Err(Error::Format(_))));

        let padded = dir.path().join("padded.bin");
        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&padded, &longer).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&padded), Err(Error::Format(_))));

        let wrong_version = dir.path().join("version.bin");
        let mut v = bytes.clone();
        v[4] = 99;
        std::fs::write(&wrong_version, &v).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&wrong_version), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_ids_identify_content() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let w = Weights::<f32>::init(&cfg());
        save_checkpoint(&a, &w, 1).unwrap();
        save_checkpoint(&b, &w, 2).unwrap();
        let ida = checkpoint_id(&a).unwrap();
        assert_eq!(ida.len(), 16);
        assert_eq!(ida, checkpoint_id(&a).unwrap());
        assert_ne!(ida, checkpoint_id(&b).unwrap(), "step is part of the content");
    }
}
