//! Binary tensor-table files: the checkpoint and fixture container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "MMFX"
//! version  u32
//! doc_len  u32      length of the UTF-8 JSON config document
//! doc      doc_len bytes
//! record*  one per tensor, to exact end of file:
//!   name_len  u16
//!   name      name_len bytes, UTF-8
//!   rank      u8
//!   extents   rank × u32
//!   data      prod(extents) × f32
//! ```
//!
//! Values are stored in 32-bit floating point; loading promotes back to the
//! engine's 64-bit working precision. A value that has been through one
//! save/load cycle survives further cycles bit-exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModelConfig};
use crate::lora::LoraConfig;

pub const MAGIC: [u8; 4] = *b"MMFX";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors as plain rows: (name, shape, values).
pub type StateEntries = Vec<(String, Vec<usize>, Vec<f64>)>;

/// Everything needed to rebuild a model around its tensor table.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointDoc {
    pub model: ModelConfig,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    /// Vocabulary words in id order (id = position + reserved count), so an
    /// evaluation run needs no separate vocabulary file.
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
}

// ----------------------------------------------------------------------
// Raw container
// ----------------------------------------------------------------------

/// Serialize a config document and tensor table into the container bytes.
pub fn encode(doc: &str, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let doc_bytes = doc.as_bytes();
    let doc_len = u32::try_from(doc_bytes.len())
        .map_err(|_| Error::Checkpoint("config document exceeds u32 length".to_string()))?;
    out.extend_from_slice(&doc_len.to_le_bytes());
    out.extend_from_slice(doc_bytes);
    for (name, shape, values) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len()).map_err(|_| {
            Error::Checkpoint(format!("tensor name {name:?} exceeds u16 length"))
        })?;
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::Checkpoint(format!("tensor {name} rank exceeds u8")))?;
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {shape:?} disagrees with {} values",
                values.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(rank);
        for &e in shape {
            let e = u32::try_from(e)
                .map_err(|_| Error::Checkpoint(format!("tensor {name} extent exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse container bytes into the config document and tensor table.
pub fn decode(bytes: &[u8]) -> Result<(String, StateEntries)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not an MMFX file (bad magic)".to_string()));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let doc_len = c.u32("config length")? as usize;
    let doc = std::str::from_utf8(c.take(doc_len, "config document")?)
        .map_err(|_| Error::Checkpoint("config document is not UTF-8".to_string()))?
        .to_string();
    let mut entries = Vec::new();
    while c.at < bytes.len() {
        let name_len = c.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".to_string()))?
            .to_string();
        let rank = c.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("tensor extent")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = c.take(count * 4, "tensor data")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        entries.push((name, shape, values));
    }
    // The loop exits exactly at EOF by construction; a malformed record
    // inside surfaces as a truncation error above.
    Ok((doc, entries))
}

pub fn save_file(path: &Path, doc: &str, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    let bytes = encode(doc, entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_file(path: &Path) -> Result<(String, StateEntries)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

// ----------------------------------------------------------------------
// Model-level wrappers
// ----------------------------------------------------------------------

/// Write a model (config, adapter setup, vocabulary, all parameters) to one
/// self-contained file.
pub fn save_model(path: &Path, model: &FusionModel, vocab: Option<&[String]>) -> Result<()> {
    let doc = CheckpointDoc {
        model: model.cfg.clone(),
        lora: model.lora.clone(),
        vocab: vocab.map(|w| w.to_vec()),
    };
    let doc = serde_json::to_string(&doc)
        .map_err(|e| Error::Checkpoint(format!("config document serialization: {e}")))?;
    save_file(path, &doc, &model.to_state())
}

/// Rebuild a model from a file written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(FusionModel, CheckpointDoc)> {
    let (doc_text, entries) = load_file(path)?;
    let doc: CheckpointDoc = serde_json::from_str(&doc_text).map_err(|e| {
        Error::Checkpoint(format!("{}: config document: {e}", path.display()))
    })?;
    let model = FusionModel::from_parts(&doc.model, doc.lora.as_ref(), &entries)
        .map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })?;
    Ok((model, doc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{build_model, FusionVariant};
    use crate::rng::Rng;

    fn sample_entries() -> StateEntries {
        vec![
            ("alpha.weight".to_string(), vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 2.5, -0.75]),
            ("beta.bias".to_string(), vec![2], vec![1.5, -2.0]),
            ("scalar".to_string(), vec![], vec![42.0]),
        ]
    }

    #[test]
    fn container_round_trips_f32_representable_values() {
        let entries = sample_entries();
        let bytes = encode("{\"k\":1}", &entries).unwrap();
        let (doc, got) = decode(&bytes).unwrap();
        assert_eq!(doc, "{\"k\":1}");
        assert_eq!(got, entries);
    }

    #[test]
    fn second_save_load_cycle_is_bit_exact() {
        // Arbitrary f64s lose precision once; the quantized values then
        // survive any number of further cycles unchanged.
        let entries = vec![("t".to_string(), vec![3], vec![0.1, 1.0 / 3.0, 2.0_f64.sqrt()])];
        let (_, once) = decode(&encode("{}", &entries).unwrap()).unwrap();
        let bytes1 = encode("{}", &once).unwrap();
        let (_, twice) = decode(&bytes1).unwrap();
        let bytes2 = encode("{}", &twice).unwrap();
        assert_eq!(once, twice);
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn bad_magic_version_and_truncation_are_rejected() {
        let good = encode("{}", &sample_entries()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = decode(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("magic"), "got: {err}");

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        let err = decode(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version 99"), "got: {err}");

        let err = decode(&good[..good.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {err}");

        let mut trailing = good.clone();
        trailing.push(0x01); // a lone byte cannot start a record
        let err = decode(&trailing).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {err}");
    }

    #[test]
    fn shape_and_value_count_disagreement_is_rejected_at_write_time() {
        let entries = vec![("t".to_string(), vec![2, 2], vec![1.0, 2.0, 3.0])];
        let err = encode("{}", &entries).unwrap_err();
        assert!(err.to_string().contains("disagrees"), "got: {err}");
    }

    #[test]
    fn model_file_round_trips_and_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mmfx");
        let cfg = crate::fusion::ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_levels: 1,
            hidden_dim: 16,
            head_hidden: 8,
            vocab_size: 10,
            text_seq_len: 5,
            image_side: 8,
            patch_size: 4,
            n_classes: 3,
            variant: FusionVariant::Mixed,
            ..Default::default()
        };
        let mut rng = Rng::seed_from(3);
        let mut model = build_model(&cfg, &mut rng).unwrap();
        crate::lora::wrap_model(&mut model, &crate::lora::LoraConfig::with_rank(2), &mut rng)
            .unwrap();
        let vocab = vec!["stable".to_string(), "opacity".to_string()];
        save_model(&path, &model, Some(&vocab)).unwrap();

        let (loaded, doc) = load_model(&path).unwrap();
        assert_eq!(doc.model, model.cfg);
        assert!(doc.lora.is_some());
        assert_eq!(doc.vocab.as_deref(), Some(&vocab[..]));

        // Saving the loaded model again must reproduce the bytes exactly:
        // the f32 quantization already happened on the first save.
        let path2 = dir.path().join("model2.mmfx");
        save_model(&path2, &loaded, doc.vocab.as_deref()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // And the loaded model computes: same outputs from both loads.
        let ids = vec![vec![2usize, 3, 4, 0, 0]];
        let images = vec![crate::tensor::Tensor::zeros(&[8, 8])];
        let (again, _) = load_model(&path2).unwrap();
        let mut r1 = Rng::seed_from(0);
        let mut c1 = crate::nn::ForwardCtx::eval(&mut r1);
        let a = loaded.forward(&ids, &images, &mut c1).unwrap().to_vec();
        let b = again.forward(&ids, &images, &mut c1).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_config_document_is_reported_with_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mmfx");
        save_file(&path, "not json", &[]).unwrap();
        let Err(err) = load_model(&path) else {
            panic!("a non-JSON config document must not load")
        };
        let msg = err.to_string();
        assert!(msg.contains("bad.mmfx") && msg.contains("config document"), "got: {msg}");
    }
}
