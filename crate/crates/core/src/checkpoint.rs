//! Binary checkpoint container and parameter import.
//!
//! One file holds a JSON header (format version, model config, dtype,
//! tokenizer hash, step count, parameter manifest) followed by named
//! little-endian tensor blobs in canonical parameter order. Save →
//! load → save is byte-identical.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, OcrModel};
use crate::tensor::{Dtype, Element, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LINEOCR\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub dtype: Dtype,
    /// SHA-256 (hex) of the tokenizer file this model was trained
    /// against; empty when unknown.
    pub tokenizer_sha256: String,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub params: Vec<ParamInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Blob {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decode payload values, converting precision if needed.
    pub fn values<T: Element>(&self) -> Vec<T> {
        let size = self.dtype.size_bytes();
        self.payload
            .chunks_exact(size)
            .map(|chunk| match self.dtype {
                Dtype::F32 => T::from_f32(f32::from_le_bytes(chunk.try_into().unwrap())),
                Dtype::F64 => T::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())),
            })
            .collect()
    }
}

/// Parsed checkpoint: header plus raw blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blobs: Vec<Blob>,
}

/// Hex SHA-256 of a tokenizer's file serialization.
pub fn tokenizer_hash(tok: &crate::tokenizer::Tokenizer) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tok.to_file_string().as_bytes());
    hex_string(&hasher.finalize())
}

/// Hex SHA-256 of raw bytes (for verifying tokenizer files).
pub fn bytes_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Snapshot a model into a container.
    pub fn from_model<T: Element>(model: &OcrModel<T>, tokenizer_sha256: &str) -> Self {
        let mut params = Vec::with_capacity(model.params.len());
        let mut blobs = Vec::with_capacity(model.params.len());
        for (name, tensor) in model.params.iter() {
            params.push(ParamInfo {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
            });
            let mut payload = Vec::with_capacity(tensor.numel() * T::DTYPE.size_bytes());
            for &v in tensor.data() {
                v.write_le(&mut payload);
            }
            blobs.push(Blob {
                name: name.to_string(),
                dtype: T::DTYPE,
                shape: tensor.shape().to_vec(),
                payload,
            });
        }
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: model.config.clone(),
                dtype: T::DTYPE,
                tokenizer_sha256: tokenizer_sha256.to_string(),
                step: model.step,
                params,
            },
            blobs,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header_json = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for blob in &self.blobs {
            out.extend_from_slice(&(blob.name.len() as u32).to_le_bytes());
            out.extend_from_slice(blob.name.as_bytes());
            out.push(blob.dtype.tag());
            out.push(blob.shape.len() as u8);
            for &d in &blob.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(blob.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CheckpointTruncated("bad magic".into()));
        }
        let version = r.read_u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let header_len = r.read_u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::CheckpointTruncated(format!("header json: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let count = r.read_u32()? as usize;
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CheckpointTruncated("blob name not utf-8".into()))?;
            let dtype = Dtype::from_tag(r.read_u8()?)
                .ok_or_else(|| Error::CheckpointTruncated(format!("bad dtype tag in `{name}`")))?;
            let ndim = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64()? as usize);
            }
            let payload_len = r.read_u64()? as usize;
            let numel: usize = shape.iter().product();
            if payload_len != numel * dtype.size_bytes() {
                return Err(Error::CheckpointTruncated(format!(
                    "blob `{name}` payload {payload_len} bytes, shape {shape:?} needs {}",
                    numel * dtype.size_bytes()
                )));
            }
            let payload = r.take(payload_len)?.to_vec();
            blobs.push(Blob {
                name,
                dtype,
                shape,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointTruncated(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        // header/blob reconciliation
        if header.params.len() != blobs.len() {
            return Err(Error::CheckpointTruncated(format!(
                "header lists {} params, file has {} blobs",
                header.params.len(),
                blobs.len()
            )));
        }
        for (info, blob) in header.params.iter().zip(&blobs) {
            if info.name != blob.name {
                return Err(Error::CheckpointTruncated(format!(
                    "blob order mismatch: header `{}` vs blob `{}`",
                    info.name, blob.name
                )));
            }
            if info.shape != blob.shape {
                return Err(Error::CheckpointShape {
                    name: blob.name.clone(),
                    header: info.shape.clone(),
                    blob: blob.shape.clone(),
                });
            }
            if blob.dtype != header.dtype {
                return Err(Error::CheckpointTruncated(format!(
                    "blob `{}` dtype {} differs from header {}",
                    blob.name, blob.dtype, header.dtype
                )));
            }
        }
        Ok(Checkpoint { header, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::image::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    /// Rebuild a model at the stored precision. The element type must
    /// match the header dtype; callers dispatch on `header.dtype`.
    pub fn into_model<T: Element>(&self) -> Result<OcrModel<T>> {
        if T::DTYPE != self.header.dtype {
            return Err(Error::Config(format!(
                "checkpoint dtype is {}, model element type is {}",
                self.header.dtype,
                T::DTYPE
            )));
        }
        self.header.model.validate()?;
        let expected = self.header.model.param_shapes();
        let mut params = crate::tensor::ParamSet::new();
        let mut problems = Vec::new();
        for (name, shape) in &expected {
            match self.blob(name) {
                Some(blob) if &blob.shape == shape => {
                    params.insert(
                        name.clone(),
                        Tensor::new(shape.clone(), blob.values::<T>())?,
                    );
                }
                Some(blob) => {
                    return Err(Error::CheckpointShape {
                        name: name.clone(),
                        header: shape.clone(),
                        blob: blob.shape.clone(),
                    });
                }
                None => problems.push(format!("missing `{name}`")),
            }
        }
        for blob in &self.blobs {
            if !expected.iter().any(|(n, _)| n == &blob.name) {
                problems.push(format!("unexpected `{}`", blob.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Import(problems.join(", ")));
        }
        Ok(OcrModel {
            config: self.header.model.clone(),
            params,
            step: self.header.step,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// ── parameter import ─────────────────────────────────────────────────

/// Source-to-destination name mapping. `{layer}` in `from` captures a
/// layer index; `layers` remaps captured indices (identity when
/// absent) and names without a matching entry are skipped. Patterns
/// match as prefixes: the tail after the pattern carries over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingRule {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<(usize, usize)>>,
}

impl MappingRule {
    /// Identity rule: import every parameter under its own name.
    pub fn identity() -> Self {
        MappingRule {
            from: String::new(),
            to: String::new(),
            layers: None,
        }
    }

    /// Destination name for a source parameter, if this rule matches.
    pub fn expand(&self, name: &str) -> Option<String> {
        if let Some((pre, post)) = self.from.split_once("{layer}") {
            let rest = name.strip_prefix(pre)?;
            let digits = rest.chars().take_while(char::is_ascii_digit).count();
            if digits == 0 {
                return None;
            }
            let layer: usize = rest[..digits].parse().ok()?;
            let tail = rest[digits..].strip_prefix(post)?;
            let dest_layer = match &self.layers {
                Some(map) => map.iter().find(|(s, _)| *s == layer)?.1,
                None => layer,
            };
            Some(format!(
                "{}{}",
                self.to.replace("{layer}", &dest_layer.to_string()),
                tail
            ))
        } else {
            let tail = name.strip_prefix(self.from.as_str())?;
            Some(format!("{}{}", self.to, tail))
        }
    }
}

/// Outcome of a partial import: which destination parameters were
/// copied and which were (re-)randomly initialized. The two lists
/// together cover every model parameter exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportReport {
    pub loaded: Vec<String>,
    pub randomly_initialized: Vec<String>,
}

/// Copy parameters from `source` into `model` under `rules` (later
/// rules override earlier ones). Matched parameters must agree in
/// shape; unmatched destinations are re-initialized with the init
/// scheme, seeded by `reinit_seed`.
pub fn import_partial<T: Element>(
    source: &Checkpoint,
    model: &mut OcrModel<T>,
    rules: &[MappingRule],
    reinit_seed: u64,
) -> Result<ImportReport> {
    let mut assigned: std::collections::HashMap<String, &Blob> = std::collections::HashMap::new();
    for rule in rules {
        for blob in &source.blobs {
            if let Some(dest) = rule.expand(&blob.name) {
                assigned.insert(dest, blob);
            }
        }
    }
    let mut rng = crate::rng::rng_from(reinit_seed, &[0x494d_504f]);
    let mut loaded = Vec::new();
    let mut randomly_initialized = Vec::new();
    for (name, shape) in model.config.param_shapes() {
        match assigned.get(&name) {
            Some(blob) => {
                if blob.shape != shape {
                    return Err(Error::Import(format!(
                        "`{}` (from `{}`): source shape {:?} vs destination {:?}",
                        name, blob.name, blob.shape, shape
                    )));
                }
                *model
                    .params
                    .get_mut(&name)
                    .expect("canonical names exist in params") =
                    Tensor::new(shape.clone(), blob.values::<T>())?;
                loaded.push(name);
            }
            None => {
                model.reinit_param(&name, &mut rng)?;
                randomly_initialized.push(name);
            }
        }
    }
    Ok(ImportReport {
        loaded,
        randomly_initialized,
    })
}

/// Strict whole-model load for stage chaining: every model parameter
/// must be present with a matching shape, and the source must contain
/// nothing else.
pub fn apply_full<T: Element>(source: &Checkpoint, model: &mut OcrModel<T>) -> Result<()> {
    let expected = model.config.param_shapes();
    let mut problems = Vec::new();
    for (name, shape) in &expected {
        match source.blob(name) {
            Some(blob) if &blob.shape == shape => {}
            Some(blob) => problems.push(format!(
                "`{name}`: shape {:?} vs expected {:?}",
                blob.shape, shape
            )),
            None => problems.push(format!("`{name}`: missing")),
        }
    }
    for blob in &source.blobs {
        if !expected.iter().any(|(n, _)| n == &blob.name) {
            problems.push(format!("`{}`: unexpected", blob.name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Import(problems.join(", ")));
    }
    for (name, shape) in &expected {
        let blob = source.blob(name).expect("checked above");
        *model.params.get_mut(name).expect("canonical name") =
            Tensor::new(shape.clone(), blob.values::<T>())?;
    }
    Ok(())
}
