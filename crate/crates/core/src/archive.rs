//! Checkpoint container: named tensors in a safetensors file, with a JSON
//! manifest stored in the header metadata under `manifest`.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde_json::Value;

use crate::error::{Error, IoContext, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MANIFEST_KEY: &str = "manifest";

#[derive(Clone, Debug)]
pub struct Archive {
    pub tensors: ParamStore,
    pub manifest: Value,
}

/// Writes `tensors` as little-endian `f64` plus `manifest`. The file is
/// written beside the target and renamed into place.
pub fn write_archive(path: &Path, tensors: &ParamStore, manifest: &Value) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), raw, t.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, shape)| {
            TensorView::new(Dtype::F64, shape.clone(), raw)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::format(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), manifest.to_string())]);
    let buf = safetensors::serialize(views, Some(meta)).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, buf).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let buf = read_file(path)?;
    let (_, meta) = SafeTensors::read_metadata(&buf).map_err(|e| Error::format(path, e.to_string()))?;
    let manifest = match meta.metadata().as_ref().and_then(|m| m.get(MANIFEST_KEY)) {
        Some(s) => serde_json::from_str(s)
            .map_err(|e| Error::format(path, format!("manifest is not valid JSON: {e}")))?,
        None => Value::Null,
    };
    Ok(Archive {
        tensors: decode_tensors(path, &buf)?,
        manifest,
    })
}

/// Reads every floating-point tensor of a safetensors file as `f64`.
/// Integer tensors (e.g. batch-norm step counters) are skipped.
pub fn read_tensors(path: &Path) -> Result<ParamStore> {
    let buf = read_file(path)?;
    decode_tensors(path, &buf)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::data(path, "file not found"));
    }
    std::fs::read(path).at(path)
}

fn decode_tensors(path: &Path, buf: &[u8]) -> Result<ParamStore> {
    let st = SafeTensors::deserialize(buf)
        .map_err(|e| Error::format(path, format!("not a safetensors file: {e}")))?;
    let mut out = ParamStore::new();
    for (name, view) in st.tensors() {
        let raw = view.data();
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            Dtype::BF16 => raw
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            _ => continue,
        };
        let shape = view.shape().to_vec();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::format(path, format!("tensor `{name}` has inconsistent size")));
        }
        out.insert(name, Tensor::from_vec(shape, data));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::from_vec([2, 2], vec![0.1, -2.5e-300, f64::MAX, 3.0]));
        ps.insert("s", Tensor::scalar(std::f64::consts::PI));
        let manifest = serde_json::json!({"epoch": 3, "name": "x"});
        write_archive(&path, &ps, &manifest).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back.tensors, ps);
        assert_eq!(back.manifest, manifest);
    }

    #[test]
    fn reduced_precision_tensors_are_widened() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.safetensors");
        let f32s: Vec<u8> = [1.5f32, -0.25].iter().flat_map(|v| v.to_le_bytes()).collect();
        let f16s: Vec<u8> = [half::f16::from_f64(0.5)].iter().flat_map(|v| v.to_le_bytes()).collect();
        let ints: Vec<u8> = 7i64.to_le_bytes().to_vec();
        let views = vec![
            ("a", TensorView::new(Dtype::F32, vec![2], &f32s).unwrap()),
            ("b", TensorView::new(Dtype::F16, vec![1], &f16s).unwrap()),
            ("n", TensorView::new(Dtype::I64, vec![], &ints).unwrap()),
        ];
        std::fs::write(&path, safetensors::serialize(views, None).unwrap()).unwrap();
        let ps = read_tensors(&path).unwrap();
        assert_eq!(ps.get("a").data(), &[1.5, -0.25]);
        assert_eq!(ps.get("b").data(), &[0.5]);
        assert!(!ps.contains("n"));
    }

    #[test]
    fn garbage_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, b"not a tensor file").unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Format { .. })));
        assert!(matches!(read_archive(&dir.path().join("none")), Err(Error::Data { .. })));
    }
}
