//! Versioned weight archives.
//!
//! Layout: `DKCK` magic, u32 format version, u64 header length, JSON header,
//! then raw little-endian tensor data. The header records the architecture,
//! class count, creation time, framework version, and a tensor manifest, so
//! a checkpoint is self-describing. Optimizer state is never stored.

use crate::error::{Error, Result};
use crate::model_zoo::{cnn::CnnClassifier, resnet::ResNetModel, ImageClassifier, ModelArch};
use crate::nn::NamedTensor;
use crate::scalar::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DKCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// "param" or "buffer" (e.g. batch-norm running statistics).
    pub kind: String,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub framework_version: String,
    pub created_at: String,
    pub arch_spec: ModelArch,
    pub num_classes: usize,
    pub scalar: String,
    pub tensors: Vec<TensorEntry>,
    /// Names of the relation-fusion tensors stored alongside the model, if
    /// the checkpoint came from a relation-distillation run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fusion_params: Vec<String>,
}

/// A group of auxiliary tensors saved next to the model (fusion block,
/// feature projections). Group names become name prefixes in the archive.
pub struct ExtraGroup<'a, F: Scalar> {
    pub prefix: &'a str,
    pub tensors: Vec<NamedTensor<'a, F>>,
    /// Whether the group is listed in the header's `fusion_params` manifest.
    pub is_fusion: bool,
}

fn scalar_to_bytes<F: Scalar>(values: &[F], out: &mut Vec<u8>) {
    if F::dtype_name() == "f32" {
        for &v in values {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    } else {
        for &v in values {
            out.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
}

fn scalar_from_bytes<F: Scalar>(bytes: &[u8]) -> Vec<F> {
    if F::dtype_name() == "f32" {
        bytes
            .chunks_exact(4)
            .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|c| F::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    }
}

fn scalar_width<F: Scalar>() -> usize {
    if F::dtype_name() == "f32" {
        4
    } else {
        8
    }
}

/// Serialize a model (weights and buffers only) plus any extra groups.
pub fn encode_to_vec<F: Scalar>(
    model: &dyn ImageClassifier<F>,
    extras: &[ExtraGroup<'_, F>],
) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut fusion_params = Vec::new();
    let width = scalar_width::<F>() as u64;

    let mut push = |name: String, kind: &str, view: &ndarray::ArrayViewD<'_, F>,
                    entries: &mut Vec<TensorEntry>,
                    blob: &mut Vec<u8>| {
        let offset = blob.len() as u64;
        let owned;
        let slice = match view.as_slice() {
            Some(s) => s,
            None => {
                owned = view.to_owned();
                owned.as_slice().unwrap()
            }
        };
        scalar_to_bytes(slice, blob);
        entries.push(TensorEntry {
            name,
            shape: view.shape().to_vec(),
            kind: kind.to_string(),
            offset,
            byte_len: view.len() as u64 * width,
        });
    };

    for t in model.named_tensors() {
        let kind = if t.is_param { "param" } else { "buffer" };
        push(t.name.clone(), kind, &t.view, &mut entries, &mut blob);
    }
    for group in extras {
        for t in &group.tensors {
            let name = format!("{}.{}", group.prefix, t.name);
            if group.is_fusion {
                fusion_params.push(name.clone());
            }
            push(name, "param", &t.view, &mut entries, &mut blob);
        }
    }

    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        framework_version: env!("CARGO_PKG_VERSION").to_string(),
        created_at: chrono::Utc::now().to_rfc3339(),
        arch_spec: model.arch(),
        num_classes: model.num_classes(),
        scalar: F::dtype_name().to_string(),
        tensors: entries,
        fusion_params,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_model<F: Scalar>(
    path: &Path,
    model: &dyn ImageClassifier<F>,
    extras: &[ExtraGroup<'_, F>],
) -> Result<()> {
    let bytes = encode_to_vec(model, extras)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct RawCheckpoint {
    header: CheckpointHeader,
    blob: Vec<u8>,
}

fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::resource(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::resource(format!(
            "{} is not a distillkit checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::resource(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::resource("truncated checkpoint header".to_string()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen])?;
    let blob = bytes[16 + hlen..].to_vec();
    Ok(RawCheckpoint { header, blob })
}

/// Read just the header (cheap validation / inspection).
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(read_raw(path)?.header)
}

fn tensor_data<F: Scalar>(raw: &RawCheckpoint, entry: &TensorEntry) -> Result<Vec<F>> {
    let start = entry.offset as usize;
    let end = start + entry.byte_len as usize;
    if end > raw.blob.len() {
        return Err(Error::resource(format!("tensor {} out of bounds", entry.name)));
    }
    Ok(scalar_from_bytes(&raw.blob[start..end]))
}

/// Load weights into an already-built model. The checkpoint's architecture
/// and scalar type must match exactly.
pub fn load_weights_into<F: Scalar>(path: &Path, model: &mut dyn ImageClassifier<F>) -> Result<()> {
    let raw = read_raw(path)?;
    if raw.header.scalar != F::dtype_name() {
        return Err(Error::resource(format!(
            "checkpoint scalar type {} does not match requested {}",
            raw.header.scalar,
            F::dtype_name()
        )));
    }
    if raw.header.arch_spec != model.arch() {
        return Err(Error::resource(format!(
            "checkpoint architecture does not match the target model ({})",
            path.display()
        )));
    }
    let by_name: HashMap<&str, &TensorEntry> =
        raw.header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for mut t in model.named_tensors_mut() {
        let entry = by_name
            .get(t.name.as_str())
            .ok_or_else(|| Error::resource(format!("checkpoint is missing tensor {}", t.name)))?;
        if entry.shape != t.view.shape() {
            return Err(Error::resource(format!(
                "tensor {} shape mismatch: checkpoint {:?} vs model {:?}",
                t.name,
                entry.shape,
                t.view.shape()
            )));
        }
        let data = tensor_data::<F>(&raw, entry)?;
        for (dst, src) in t.view.iter_mut().zip(data) {
            *dst = src;
        }
    }
    Ok(())
}

/// Build a model from a checkpoint's embedded architecture and load its
/// weights. Extra tensors (fusion block, projections) are returned by name.
#[allow(clippy::type_complexity)]
pub fn load_model<F: Scalar>(
    path: &Path,
) -> Result<(Box<dyn ImageClassifier<F>>, CheckpointHeader, HashMap<String, ArrayD<F>>)> {
    let raw = read_raw(path)?;
    if raw.header.scalar != F::dtype_name() {
        return Err(Error::resource(format!(
            "checkpoint scalar type {} does not match requested {}",
            raw.header.scalar,
            F::dtype_name()
        )));
    }
    let mut model = build_from_arch::<F>(&raw.header.arch_spec)?;
    let by_name: HashMap<&str, &TensorEntry> =
        raw.header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut consumed: Vec<String> = Vec::new();
    for mut t in model.named_tensors_mut() {
        let entry = by_name
            .get(t.name.as_str())
            .ok_or_else(|| Error::resource(format!("checkpoint is missing tensor {}", t.name)))?;
        let data = tensor_data::<F>(&raw, entry)?;
        for (dst, src) in t.view.iter_mut().zip(data) {
            *dst = src;
        }
        consumed.push(t.name.clone());
    }
    let consumed: std::collections::HashSet<String> = consumed.into_iter().collect();
    let mut extras = HashMap::new();
    for entry in &raw.header.tensors {
        if consumed.contains(&entry.name) {
            continue;
        }
        let data = tensor_data::<F>(&raw, entry)?;
        let arr = ArrayD::from_shape_vec(entry.shape.clone(), data)
            .map_err(|e| Error::resource(format!("tensor {}: {e}", entry.name)))?;
        extras.insert(entry.name.clone(), arr);
    }
    Ok((model, raw.header, extras))
}

/// Instantiate a model (random init) from an architecture descriptor.
pub fn build_from_arch<F: Scalar>(arch: &ModelArch) -> Result<Box<dyn ImageClassifier<F>>> {
    match arch {
        ModelArch::Cnn { spec } => {
            spec.validate()?;
            Ok(Box::new(CnnClassifier::<F>::new(spec.clone(), 0)))
        }
        ModelArch::Resnet { variant, num_classes } => {
            Ok(Box::new(ResNetModel::<F>::new(*variant, *num_classes, 0)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::{build_student, StudentArchSpec};

    #[test]
    fn roundtrip_preserves_weights_and_header() {
        let spec = StudentArchSpec::default_recipe(4);
        let model = build_student::<f32>(&spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &model, &[]).unwrap();

        let header = read_header(&path).unwrap();
        assert_eq!(header.num_classes, 4);
        assert_eq!(header.scalar, "f32");
        assert!(!header.created_at.is_empty());
        assert!(!header.framework_version.is_empty());
        assert_eq!(header.arch_spec, model.arch());

        let (loaded, _, extras) = load_model::<f32>(&path).unwrap();
        assert!(extras.is_empty());
        for (a, b) in model.named_tensors().iter().zip(loaded.named_tensors().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.view, b.view);
        }
    }

    #[test]
    fn wrong_scalar_type_is_a_resource_error() {
        let spec = StudentArchSpec::default_recipe(4);
        let model = build_student::<f32>(&spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &model, &[]).unwrap();
        assert!(matches!(load_model::<f64>(&path), Err(Error::Resource(_))));
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(read_header(&path), Err(Error::Resource(_))));
    }
}
