//! Versioned binary checkpoint: JSON header (config, vocabulary, manifest)
//! followed by raw little-endian f32 parameter data. See docs/checkpoint.md.

use super::{param_layout, MicroLm, ModelConfig, Tokenizer};
use crate::error::{KbError, Result};
use crate::tensor::DiffTensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub(crate) const MAGIC: &[u8; 8] = b"KBEDCKPT";
pub(crate) const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the parameter blob.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    config_hash: String,
    manifest: Vec<ManifestEntry>,
}

/// Hash of config + vocabulary; detects mismatched or corrupted headers.
fn config_hash(config: &ModelConfig, vocab: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update([0u8]);
    h.update(serde_json::to_vec(vocab).expect("vocab serializes"));
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic hash over config, vocabulary, and parameter values.
pub(crate) fn content_hash(model: &MicroLm) -> String {
    let mut h = Sha256::new();
    h.update(config_hash(model.config(), model.tokenizer().words()).as_bytes());
    for p in model.params() {
        for &v in p.values() {
            h.update((v as f32).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn save(model: &MicroLm, path: &Path) -> Result<()> {
    let mut manifest = Vec::with_capacity(model.params().len());
    let mut offset = 0u64;
    for (name, p) in model.param_names().iter().zip(model.params()) {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset,
        });
        offset += (p.numel() * 4) as u64;
    }
    let header = Header {
        config: model.config().clone(),
        vocab: model.tokenizer().words().to_vec(),
        config_hash: config_hash(model.config(), model.tokenizer().words()),
        manifest,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for p in model.params() {
        for &v in p.values() {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| KbError::Checkpoint(format!("truncated file while reading {what}")))
}

pub(crate) fn load(path: &Path) -> Result<MicroLm> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);

    let mut magic = [0u8; 8];
    read_exact(&mut file, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(KbError::Checkpoint(format!(
            "bad magic: expected {MAGIC:?}, found {magic:?}"
        )));
    }
    let mut word = [0u8; 4];
    read_exact(&mut file, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(KbError::Checkpoint(format!(
            "unsupported format version: expected {VERSION}, found {version}"
        )));
    }
    read_exact(&mut file, &mut word, "header length")?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut file, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| KbError::Checkpoint(format!("unreadable header: {e}")))?;

    header.config.validate()?;
    let expected_hash = config_hash(&header.config, &header.vocab);
    if header.config_hash != expected_hash {
        return Err(KbError::Checkpoint(format!(
            "config hash mismatch: expected {expected_hash}, found {}",
            header.config_hash
        )));
    }

    // The manifest must agree with the layout the config implies.
    let layout = param_layout(&header.config);
    if header.manifest.len() != layout.len() {
        return Err(KbError::Checkpoint(format!(
            "manifest lists {} tensors, config implies {}",
            header.manifest.len(),
            layout.len()
        )));
    }
    let mut expected_offset = 0u64;
    for (entry, (name, shape)) in header.manifest.iter().zip(&layout) {
        if &entry.name != name || &entry.shape != shape {
            return Err(KbError::Checkpoint(format!(
                "tensor mismatch: expected {name} {shape:?}, found {} {:?}",
                entry.name, entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(KbError::Checkpoint(format!(
                "offset mismatch for {name}: expected {expected_offset}, found {}",
                entry.offset
            )));
        }
        expected_offset += (shape.iter().product::<usize>() * 4) as u64;
    }

    let mut params = Vec::with_capacity(layout.len());
    let mut names = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        read_exact(&mut file, &mut bytes, &name)?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.push(DiffTensor::new(shape, values, true)?);
        names.push(name);
    }
    let mut rest = [0u8; 1];
    if file.read(&mut rest)? != 0 {
        return Err(KbError::Checkpoint("trailing bytes after parameter blob".into()));
    }

    let tokenizer = Tokenizer::from_words(header.vocab)?;
    if tokenizer.vocab_size() != header.config.vocab_size {
        return Err(KbError::Checkpoint(format!(
            "vocab size mismatch: expected {}, found {}",
            header.config.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    Ok(MicroLm::from_parts(header.config, tokenizer, params, names))
}
