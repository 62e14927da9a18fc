use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::inference::EmbeddingBank;
use crate::numerics::{Dtype, Matrix, Scalar};

pub const FORMAT_VERSION: u32 = 1;

/// Tensor name used by embedding banks.
pub const BANK_TENSOR: &str = "embeddings";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

/// Free-form metadata. Known keys are typed; anything else is kept verbatim
/// in `extra` so foreign writers can attach provenance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(rename = "B", skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[serde(rename = "P", skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Metadata {
    fn model_config(&self) -> Result<ModelConfig> {
        let need = |v: Option<usize>, key: &str| {
            v.ok_or_else(|| Error::Format(format!("model metadata is missing `{key}`")))
        };
        Ok(ModelConfig {
            dim: need(self.d, "d")?,
            blocks: need(self.blocks, "B")?,
            heads: need(self.heads, "heads")?,
            mlp_ratio: need(self.mlp_ratio, "mlp_ratio")?,
            patch_size: need(self.patch_size, "P")?,
            levels: need(self.levels, "L")?,
            out_dim: need(self.d_out, "d_out")?,
        })
    }

    fn from_config(cfg: &ModelConfig) -> Self {
        Metadata {
            d: Some(cfg.dim),
            blocks: Some(cfg.blocks),
            heads: Some(cfg.heads),
            mlp_ratio: Some(cfg.mlp_ratio),
            patch_size: Some(cfg.patch_size),
            levels: Some(cfg.levels),
            d_out: Some(cfg.out_dim),
            ..Default::default()
        }
    }
}

/// JSON half of the container; the tensors live in a companion blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub version: u32,
    pub dtype: Dtype,
    pub tensors: Vec<TensorEntry>,
    pub metadata: Metadata,
}

impl TensorManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Checks the layout against a blob of `blob_len` bytes.
    pub fn validate_layout(&self, blob_len: u64) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        let size = self.dtype.size() as u64;
        let mut seen = HashSet::new();
        let mut end = 0u64;
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor `{}`", t.name)));
            }
            let expect = t.shape.iter().product::<usize>() as u64 * size;
            if t.byte_len != expect {
                return Err(Error::Format(format!(
                    "tensor `{}`: byte_len {} but shape {:?} of {} needs {expect}",
                    t.name,
                    t.byte_len,
                    t.shape,
                    self.dtype.as_str()
                )));
            }
            if t.byte_offset < end {
                return Err(Error::Format(format!(
                    "tensor `{}` at offset {} overlaps or precedes the previous tensor ending at {end}",
                    t.name, t.byte_offset
                )));
            }
            end = t.byte_offset + t.byte_len;
            if end > blob_len {
                return Err(Error::Format(format!(
                    "blob truncated: tensor `{}` ends at {end}, blob has {blob_len} bytes",
                    t.name
                )));
            }
        }
        Ok(())
    }

    fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

fn read_values<T: Scalar>(dtype: Dtype, bytes: &[u8]) -> Vec<T> {
    let size = dtype.size();
    bytes
        .chunks_exact(size)
        .map(|c| {
            if dtype == T::DTYPE {
                T::get_le(c)
            } else {
                match dtype {
                    Dtype::F32 => T::of(f32::get_le(c) as f64),
                    Dtype::F64 => T::of(f64::get_le(c)),
                }
            }
        })
        .collect()
}

/// Lays tensors out back to back in the order given.
pub fn encode_tensors<'a, T: Scalar>(
    tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [T])>,
    metadata: Metadata,
) -> Result<(TensorManifest, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "tensor `{name}` has {} values for shape {shape:?}",
                data.len()
            )));
        }
        let offset = blob.len() as u64;
        for &v in data {
            v.put_le(&mut blob);
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            byte_offset: offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    Ok((
        TensorManifest {
            version: FORMAT_VERSION,
            dtype: T::DTYPE,
            tensors: entries,
            metadata,
        },
        blob,
    ))
}

/// Every tensor, converted to `T` (bit-exact when the dtype matches).
pub fn decode_tensors<T: Scalar>(manifest: &TensorManifest, blob: &[u8]) -> Result<BTreeMap<String, (Vec<usize>, Vec<T>)>> {
    manifest.validate_layout(blob.len() as u64)?;
    Ok(manifest
        .tensors
        .iter()
        .map(|t| {
            let start = t.byte_offset as usize;
            let bytes = &blob[start..start + t.byte_len as usize];
            (t.name.clone(), (t.shape.clone(), read_values(manifest.dtype, bytes)))
        })
        .collect())
}

pub fn encode_model<T: Scalar>(params: &ModelParams<T>) -> Result<(TensorManifest, Vec<u8>)> {
    params.validate()?;
    let tensors = params.to_tensors();
    encode_tensors(
        tensors.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice())),
        Metadata::from_config(&params.config),
    )
}

pub fn decode_model<T: Scalar>(manifest: &TensorManifest, blob: &[u8]) -> Result<ModelParams<T>> {
    let config = manifest.metadata.model_config()?;
    config.validate()?;
    let tensors = decode_tensors::<T>(manifest, blob)?;
    for spec in config.tensor_specs() {
        if let Some((shape, _)) = tensors.get(&spec.name) {
            if *shape != spec.shape {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {shape:?}, metadata implies {:?}",
                    spec.name, spec.shape
                )));
            }
        }
    }
    ModelParams::from_tensors(config, tensors.into_iter().map(|(n, (_, d))| (n, d)).collect())
}

pub fn encode_bank<T: Scalar>(bank: &EmbeddingBank<T>) -> Result<(TensorManifest, Vec<u8>)> {
    let metadata = Metadata {
        d_out: Some(bank.dim()),
        temperature: Some(bank.temperature().as_f64()),
        labels: Some(bank.labels().to_vec()),
        ..Default::default()
    };
    let shape = [bank.len(), bank.dim()];
    encode_tensors([(BANK_TENSOR, &shape[..], bank.embeddings().data())], metadata)
}

pub fn decode_bank<T: Scalar>(manifest: &TensorManifest, blob: &[u8]) -> Result<EmbeddingBank<T>> {
    let entry = manifest
        .entry(BANK_TENSOR)
        .ok_or_else(|| Error::Format(format!("bank manifest has no `{BANK_TENSOR}` tensor")))?;
    if manifest.tensors.len() != 1 {
        let extra: Vec<&str> = manifest
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .filter(|n| *n != BANK_TENSOR)
            .collect();
        return Err(Error::Format(format!("unexpected tensors in bank: [{}]", extra.join(", "))));
    }
    if entry.shape.len() != 2 {
        return Err(Error::Format(format!("bank tensor must be 2-D, got {:?}", entry.shape)));
    }
    let (m, d) = (entry.shape[0], entry.shape[1]);
    let md = &manifest.metadata;
    if let Some(d_out) = md.d_out {
        if d_out != d {
            return Err(Error::Format(format!("metadata d_out {d_out} but tensor width {d}")));
        }
    }
    let temperature = md
        .temperature
        .ok_or_else(|| Error::Format("bank metadata is missing `temperature`".into()))?;
    let labels = md
        .labels
        .clone()
        .unwrap_or_else(|| (0..m).map(|i| format!("class_{i}")).collect());
    let mut tensors = decode_tensors::<T>(manifest, blob)?;
    let (_, data) = tensors.remove(BANK_TENSOR).expect("checked above");
    EmbeddingBank::new(Matrix::from_vec(m, d, data)?, labels, T::of(temperature))
}

/// Blob path paired with a manifest path: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write_pair(path: &Path, manifest: &TensorManifest, blob: &[u8]) -> Result<()> {
    fs::write(path, manifest.to_json()?).map_err(|e| Error::io(path, e))?;
    let bp = blob_path(path);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))
}

fn read_pair(path: &Path) -> Result<(TensorManifest, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = TensorManifest::from_json(&text)?;
    let bp = blob_path(path);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    Ok((manifest, blob))
}

pub fn save_model<T: Scalar>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let (m, b) = encode_model(params)?;
    write_pair(path, &m, &b)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let (m, b) = read_pair(path)?;
    decode_model(&m, &b)
}

pub fn save_bank<T: Scalar>(path: &Path, bank: &EmbeddingBank<T>) -> Result<()> {
    let (m, b) = encode_bank(bank)?;
    write_pair(path, &m, &b)
}

pub fn load_bank<T: Scalar>(path: &Path) -> Result<EmbeddingBank<T>> {
    let (m, b) = read_pair(path)?;
    decode_bank(&m, &b)
}
