//! On-disk checkpoints: `manifest.json` plus `params.bin`, a flat run of
//! little-endian f32 tensors in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UliError};
use crate::model::{Model, ModelConfig};
use crate::params::{LrGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the params file.
    pub offset: usize,
    pub decay: bool,
    /// Layer index, or `None` for parameters outside the stack.
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub iteration: usize,
    /// Category names per task (short name), so vocabularies can be rebuilt.
    #[serde(default)]
    pub categories: BTreeMap<String, Vec<String>>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    iteration: usize,
    categories: BTreeMap<String, Vec<String>>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(model.params.numel() * 4);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: [p.value.rows, p.value.cols],
            dtype: "f32".into(),
            offset: bytes.len(),
            decay: p.decay,
            layer: match p.group {
                LrGroup::Layer(i) => Some(i),
                LrGroup::Other => None,
            },
        });
        for v in &p.value.data {
            bytes.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let manifest = Manifest { model: model.config.clone(), iteration, categories, tensors };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| UliError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json)?;
    fs::write(dir.join(PARAMS), bytes)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    serde_json::from_str(&text).map_err(|e| UliError::ParseError { line: e.line(), column: e.column(), message: e.to_string() })
}

pub fn load<T: Scalar>(dir: &Path) -> Result<(Model<T>, Manifest)> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(PARAMS))?;
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(UliError::Checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
        }
        let n = t.shape[0] * t.shape[1];
        let end = t.offset + 4 * n;
        let raw = bytes
            .get(t.offset..end)
            .ok_or_else(|| UliError::Checkpoint(format!("{} runs past the end of {PARAMS}", t.name)))?;
        let data: Vec<T> = raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        let group = t.layer.map_or(LrGroup::Other, LrGroup::Layer);
        store.add(t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], data), t.decay, group);
    }
    let model = Model::from_params(manifest.model.clone(), store)?;
    Ok((model, manifest))
}
