//! Single-file container of named parameter arrays plus a metadata record.
//!
//! Arrays are little-endian `f32` or `f64` matrices; the metadata record is
//! JSON carrying the format version, the encoder configuration and the
//! creation time, with room for caller-specific fields.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::encoder::Encoder;
use crate::autograd::Matrix;
use crate::error::{Error, Result, StageMismatch};
use crate::nn::Parameterized;

pub const FORMAT_VERSION: u32 = 1;

const VERSION_KEY: &str = "format_version";
const METADATA_KEY: &str = "metadata";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMetadata {
    pub format_version: u32,
    pub encoder_config: EncoderConfig,
    pub creation_time: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl ContainerMetadata {
    pub fn new(encoder_config: EncoderConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            encoder_config,
            creation_time: chrono::Utc::now().to_rfc3339(),
            extra: serde_json::Value::Null,
        }
    }
}

pub fn write_container(
    path: &Path,
    arrays: &[(String, &Matrix)],
    metadata: &ContainerMetadata,
    precision: Precision,
) -> Result<()> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(name, m)| {
            let bytes = match precision {
                Precision::F32 => m.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
                Precision::F64 => m.iter().flat_map(|&v| v.to_le_bytes()).collect(),
            };
            (name.clone(), vec![m.nrows(), m.ncols()], bytes)
        })
        .collect();
    let dtype = match precision {
        Precision::F32 => Dtype::F32,
        Precision::F64 => Dtype::F64,
    };
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert(VERSION_KEY.to_string(), metadata.format_version.to_string());
    info.insert(
        METADATA_KEY.to_string(),
        serde_json::to_string(metadata).expect("metadata serializes"),
    );
    let bytes = safetensors::serialize(views, &Some(info)).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a container, checking only that it is well formed.
pub fn read_container(path: &Path) -> Result<(ContainerMetadata, BTreeMap<String, Matrix>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| malformed(e.to_string()))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| malformed("no metadata record".into()))?;
    let version: u32 = info
        .get(VERSION_KEY)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| malformed("no format version".into()))?;
    let metadata: ContainerMetadata = info
        .get(METADATA_KEY)
        .ok_or_else(|| malformed("no metadata record".into()))
        .and_then(|s| serde_json::from_str(s).map_err(|e| malformed(e.to_string())))?;
    if metadata.format_version != version {
        return Err(malformed("inconsistent format versions".into()));
    }
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| malformed(e.to_string()))?;
    let mut arrays = BTreeMap::new();
    for (name, view) in tensors.tensors() {
        let shape = view.shape();
        if shape.len() != 2 {
            return Err(malformed(format!("array {name} is not two-dimensional")));
        }
        let values: Vec<f64> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => {
                return Err(malformed(format!(
                    "array {name} has unsupported dtype {other:?}"
                )))
            }
        };
        let m = Array2::from_shape_vec((shape[0], shape[1]), values)
            .map_err(|e| malformed(e.to_string()))?;
        arrays.insert(name, m);
    }
    Ok((metadata, arrays))
}

/// Copies `arrays` into `target` by name. Every target parameter must be
/// present with the right shape; with `strict`, extra arrays under `prefix`
/// are rejected too.
pub(crate) fn assign_parameters<P: Parameterized>(
    target: &mut P,
    arrays: &BTreeMap<String, Matrix>,
    prefix: &str,
    strict: bool,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut wrong_shape = Vec::new();
    let mut expected = std::collections::BTreeSet::new();
    for (name, _) in target.parameters() {
        expected.insert(name);
    }
    let unexpected: Vec<String> = if strict {
        arrays
            .keys()
            .filter(|k| k.starts_with(prefix) && !expected.contains(*k))
            .cloned()
            .collect()
    } else {
        Vec::new()
    };
    for (name, m) in target.parameters() {
        match arrays.get(&name) {
            None => missing.push(name),
            Some(a) if a.dim() != m.dim() => {
                wrong_shape.push(format!("{name} {:?} vs {:?}", a.dim(), m.dim()))
            }
            Some(_) => {}
        }
    }
    if !missing.is_empty() || !unexpected.is_empty() || !wrong_shape.is_empty() {
        return Err(Error::Parameters {
            missing,
            unexpected,
            wrong_shape,
        });
    }
    for (name, m) in target.parameters_mut() {
        m.assign(&arrays[&name]);
    }
    Ok(())
}

pub fn save_encoder(encoder: &Encoder, path: &Path, precision: Precision) -> Result<()> {
    let meta = ContainerMetadata::new(encoder.config().clone());
    write_container(path, &encoder.parameters(), &meta, precision)
}

/// Loads encoder weights saved with [`save_encoder`] (or converted into the
/// same layout) and checks them against the expected configuration.
pub fn load_pretrained_encoder(
    path: &Path,
    format_version: u32,
    expected: &EncoderConfig,
) -> Result<Encoder> {
    let (meta, arrays) = read_container(path)?;
    if meta.format_version != format_version {
        return Err(Error::Version {
            expected: format_version,
            found: meta.format_version,
        });
    }
    let found = &meta.encoder_config;
    let stages = expected.num_stages.max(found.num_stages);
    let mismatched: Vec<StageMismatch> = (0..stages)
        .filter_map(|s| {
            let e = expected.stage_widths.get(s).copied().unwrap_or(0);
            let f = found.stage_widths.get(s).copied().unwrap_or(0);
            (e != f).then_some(StageMismatch {
                stage: s,
                expected: e,
                found: f,
            })
        })
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::StageWidths(mismatched));
    }
    if found != expected {
        return Err(Error::Config(format!(
            "encoder file declares {found:?}, expected {expected:?}"
        )));
    }
    let mut encoder = Encoder::random(expected.clone(), 0)?;
    assign_parameters(&mut encoder, &arrays, "encoder.", true)?;
    Ok(encoder)
}
