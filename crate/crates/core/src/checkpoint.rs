//! On-disk model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.toml` and one raw blob per
//! tensor (little-endian `f64`, row-major). Pruned checkpoints also carry
//! the original weights and a mask bitset (LSB-first, bit set = pruned).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Dense, Mlp, TrainOptions, TrainReport};

pub const MANIFEST: &str = "manifest.toml";
const FORMAT: &str = "icbs-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub file: String,
    pub bytes: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub relu: bool,
    pub weight: BlobRef,
    pub bias: BlobRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original: Option<BlobRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub file: String,
    pub bytes: u64,
    /// Number of bits (prunable weights).
    pub len: usize,
    pub pruned: usize,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub options: TrainOptions,
    pub epochs_run: usize,
    pub final_loss: f64,
}

impl TrainingMeta {
    pub fn new(options: &TrainOptions, report: &TrainReport) -> Self {
        Self {
            options: options.clone(),
            epochs_run: report.epochs_run,
            final_loss: report.final_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dims: Vec<usize>,
    /// Seed of the weight initialization.
    pub init_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskEntry>,
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Mlp,
    pub init_seed: u64,
    pub training: Option<TrainingMeta>,
    pub mask: Option<Vec<bool>>,
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, &b) in mask.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_mask(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn write_blob(dir: &Path, file: &str, bytes: &[u8]) -> Result<u64> {
    let path = dir.join(file);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(bytes.len() as u64)
}

fn read_blob(dir: &Path, file: &str, expected: u64) -> Result<Vec<u8>> {
    if file.contains('/') || file.contains('\\') || file == ".." {
        return Err(Error::Checkpoint(format!("blob name `{file}` must be a plain file name")));
    }
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Checkpoint(format!(
            "{file}: manifest says {expected} bytes, found {}",
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn matrix_blob(dir: &Path, name: &str, m: &Matrix) -> Result<BlobRef> {
    let file = format!("{name}.f64");
    let bytes = write_blob(dir, &file, &f64s_to_bytes(m.as_slice()))?;
    Ok(BlobRef {
        file,
        bytes,
        shape: vec![m.rows(), m.cols()],
    })
}

fn load_matrix(dir: &Path, blob: &BlobRef) -> Result<Matrix> {
    let [rows, cols] = blob.shape[..] else {
        return Err(Error::Checkpoint(format!("{}: expected a 2-d shape", blob.file)));
    };
    if blob.bytes != (rows * cols * 8) as u64 {
        return Err(Error::Checkpoint(format!("{}: shape and byte length disagree", blob.file)));
    }
    let data = bytes_to_f64s(&read_blob(dir, &blob.file, blob.bytes)?);
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Writes a checkpoint into `dir`, which is created if missing.
/// Originals are stored only when they differ from the current weights.
pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = &ck.model;
    let mut layers = Vec::new();
    for (l, (layer, w0)) in model.layers().iter().zip(model.original_weights()).enumerate() {
        let weight = matrix_blob(dir, &format!("layer{l}.weight"), &layer.weight)?;
        let bias_file = format!("layer{l}.bias.f64");
        let bias = BlobRef {
            bytes: write_blob(dir, &bias_file, &f64s_to_bytes(&layer.bias))?,
            file: bias_file,
            shape: vec![layer.bias.len()],
        };
        let original = if w0 != &layer.weight {
            Some(matrix_blob(dir, &format!("layer{l}.original"), w0)?)
        } else {
            None
        };
        layers.push(LayerEntry {
            relu: layer.relu,
            weight,
            bias,
            original,
        });
    }
    let mask = match &ck.mask {
        Some(bits) => {
            let file = "mask.bits".to_string();
            let pruned = bits.iter().filter(|&&b| b).count();
            Some(MaskEntry {
                bytes: write_blob(dir, &file, &pack_mask(bits))?,
                file,
                len: bits.len(),
                pruned,
                density: 1.0 - pruned as f64 / bits.len() as f64,
            })
        }
        None => None,
    };
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        dims: model.dims(),
        init_seed: ck.init_seed,
        training: ck.training.clone(),
        mask,
        layers,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dims.len() != manifest.layers.len() + 1 {
        return Err(Error::Checkpoint("dims do not match layer count".into()));
    }
    let mut layers = Vec::new();
    let mut originals = Vec::new();
    for (l, entry) in manifest.layers.iter().enumerate() {
        let weight = load_matrix(dir, &entry.weight)?;
        if weight.rows() != manifest.dims[l + 1] || weight.cols() != manifest.dims[l] {
            return Err(Error::Checkpoint(format!("layer {l}: shape disagrees with dims")));
        }
        let bias = bytes_to_f64s(&read_blob(dir, &entry.bias.file, entry.bias.bytes)?);
        if bias.len() != weight.rows() {
            return Err(Error::Checkpoint(format!("layer {l}: bias length")));
        }
        let original = match &entry.original {
            Some(b) => load_matrix(dir, b)?,
            None => weight.clone(),
        };
        if original.rows() != weight.rows() || original.cols() != weight.cols() {
            return Err(Error::Checkpoint(format!("layer {l}: original shape")));
        }
        layers.push(Dense::new(weight, bias, entry.relu));
        originals.push(original);
    }
    let model = Mlp::with_original(layers, originals);
    let mask = match &manifest.mask {
        Some(m) => {
            if m.len != model.num_weights() || m.bytes != m.len.div_ceil(8) as u64 {
                return Err(Error::Checkpoint("mask length does not match the model".into()));
            }
            Some(unpack_mask(&read_blob(dir, &m.file, m.bytes)?, m.len))
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        init_seed: manifest.init_seed,
        training: manifest.training,
        mask,
    })
}
