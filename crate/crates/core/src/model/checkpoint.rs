//! Checkpoint file: one JSON manifest line, then raw little-endian f32 data.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "tracformer-ckpt-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: usize,
    numel: usize,
}

/// Serializes a model to checkpoint bytes.
pub fn write_checkpoint(model: &Model<f32>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, _, t) in model.params.named() {
        tensors.push(Entry { name, shape: t.shape().to_vec(), offset, numel: t.numel() });
        offset += t.numel();
    }
    let manifest = Manifest { format: CHECKPOINT_FORMAT.into(), config: model.config.clone(), tensors };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.reserve(offset * 4);
    for (_, _, t) in model.params.named() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes produced by [`write_checkpoint`].
pub fn read_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Data("checkpoint has no manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..split])?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!("unsupported checkpoint format `{}`", manifest.format)));
    }
    let data = &bytes[split + 1..];
    if !data.len().is_multiple_of(4) {
        return Err(Error::Data("checkpoint data is not a whole number of f32 values".into()));
    }
    let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut model = Model::<f32>::zeros(manifest.config)?;
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _, _)| n).collect();
    if names.len() != manifest.tensors.len() {
        return Err(Error::Data(format!("checkpoint lists {} tensors, model has {}", manifest.tensors.len(), names.len())));
    }
    for ((name, slot), entry) in names.iter().zip(model.params.slots_mut()).zip(&manifest.tensors) {
        if *name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(Error::Data(format!("checkpoint tensor `{}` does not match model slot `{name}`", entry.name)));
        }
        let chunk = values
            .get(entry.offset..entry.offset + entry.numel)
            .ok_or_else(|| Error::Data(format!("checkpoint tensor `{name}` runs past the data")))?;
        *slot = Tensor::new(entry.shape.clone(), chunk.to_vec())?;
    }
    let expected: usize = manifest.tensors.iter().map(|e| e.numel).sum();
    if expected != values.len() {
        return Err(Error::Data(format!("checkpoint has {} values, manifest describes {expected}", values.len())));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(format!("checkpoint {} not found", path.display())),
        _ => e.into(),
    })?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        let cfg = ModelConfig {
            max_len: 8,
            layers: 3,
            d_model: 16,
            heads: 2,
            n_max: 2,
            vocab_size: 9,
            mask_token: 1,
            dropout: 0.0,
            allow_shallow: false,
        };
        Model::init(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let bytes = write_checkpoint(&m).unwrap();
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let bytes = write_checkpoint(&tiny()).unwrap();
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 4]), Err(Error::Data(_))));
        assert!(read_checkpoint(b"no newline").is_err());
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).to_string();
        let renamed = text.replace(CHECKPOINT_FORMAT, "other");
        let mut bad = renamed.into_bytes();
        bad.extend_from_slice(&bytes[text.len()..]);
        assert!(matches!(read_checkpoint(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn missing_file_is_missing_input() {
        let err = load_checkpoint(Path::new("/nonexistent/ckpt.bin")).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
    }
}
