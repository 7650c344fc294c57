//! Checkpoints: `manifest.json` plus one raw little-endian, row-major f64
//! file per tensor.

use std::collections::BTreeMap;
use std::path::Path;

use kqprune_core::mixers::{HeadParams, LayerParams, Variant};
use kqprune_core::tasks::ToyModel;
use kqprune_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "kqprune-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_order: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub num_layers: usize,
    pub heads_per_layer: Vec<usize>,
    pub rms_eps: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// Tensors of a model in manifest order.
pub fn named_tensors(model: &ToyModel) -> Vec<(String, &Matrix)> {
    let mut out = vec![("embedding".to_string(), &model.embedding)];
    for (l, layer) in model.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            for (field, m) in HeadParams::FIELDS.iter().zip(head.tensors()) {
                out.push((format!("layers.{l}.heads.{h}.{field}"), m));
            }
        }
        out.push((format!("layers.{l}.w_o"), &layer.w_o));
    }
    out.push(("lm_head".to_string(), &model.lm_head));
    out
}

fn encode(m: &Matrix) -> Vec<u8> {
    m.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save(model: &ToyModel, dir: &Path) -> CliResult<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, m) in named_tensors(model) {
        let file = format!("{name}.f64");
        let path = dir.join(&file);
        std::fs::write(&path, encode(m)).map_err(|e| CliError::io(&path, e))?;
        tensors.push(TensorEntry {
            name,
            shape: vec![m.rows(), m.cols()],
            dtype: "f64".into(),
            file,
            byte_order: "little".into(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        variant: model.variant,
        num_layers: model.layers.len(),
        heads_per_layer: model.layers.iter().map(|l| l.heads.len()).collect(),
        rms_eps: model.layers.iter().map(|l| l.rms_eps).collect(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("plain data");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> CliResult<Matrix> {
    let path = dir.join(&entry.file);
    let bad = |msg: String| CliError::parse(&path, msg);
    if entry.dtype != "f64" || entry.byte_order != "little" {
        return Err(bad(format!(
            "unsupported dtype {} / byte order {}",
            entry.dtype, entry.byte_order
        )));
    }
    if entry.shape.len() != 2 {
        return Err(bad(format!("expected a 2-d shape, got {:?}", entry.shape)));
    }
    let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    let expected = 8 * entry.shape[0] * entry.shape[1];
    if bytes.len() != expected {
        return Err(bad(format!(
            "file has {} bytes, shape needs {expected}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::new(entry.shape[0], entry.shape[1], data).map_err(|e| bad(e.to_string()))
}

pub fn load(dir: &Path) -> CliResult<ToyModel> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| CliError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::parse(&mpath, e))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(CliError::parse(
            &mpath,
            "not a version 1 checkpoint manifest",
        ));
    }
    if manifest.heads_per_layer.len() != manifest.num_layers
        || manifest.rms_eps.len() != manifest.num_layers
    {
        return Err(CliError::parse(
            &mpath,
            "per-layer lists disagree with numLayers",
        ));
    }
    let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
    for entry in &manifest.tensors {
        if tensors
            .insert(entry.name.clone(), read_tensor(dir, entry)?)
            .is_some()
        {
            return Err(CliError::parse(
                &mpath,
                format!("duplicate tensor {}", entry.name),
            ));
        }
    }
    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| CliError::parse(&mpath, format!("missing tensor {name}")))
    };
    let embedding = take("embedding".into())?;
    let mut layers = Vec::with_capacity(manifest.num_layers);
    for l in 0..manifest.num_layers {
        let mut heads = Vec::with_capacity(manifest.heads_per_layer[l]);
        for h in 0..manifest.heads_per_layer[l] {
            let mut f = |field: &str| take(format!("layers.{l}.heads.{h}.{field}"));
            heads.push(HeadParams {
                w_q: f("w_q")?,
                w_k: f("w_k")?,
                w_v: f("w_v")?,
                w_beta: f("w_beta")?,
                w_alpha: f("w_alpha")?,
                conv_q: f("conv_q")?,
                conv_k: f("conv_k")?,
                conv_v: f("conv_v")?,
            });
        }
        layers.push(LayerParams {
            heads,
            w_o: take(format!("layers.{l}.w_o"))?,
            rms_eps: manifest.rms_eps[l],
        });
    }
    let lm_head = take("lm_head".into())?;
    if let Some(extra) = tensors.keys().next() {
        return Err(CliError::parse(
            &mpath,
            format!("unexpected tensor {extra}"),
        ));
    }
    let model = ToyModel {
        embedding,
        layers,
        lm_head,
        variant: manifest.variant,
    };
    model.validate().map_err(|e| CliError::parse(&mpath, e))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kqprune_core::tasks::ToyConfig;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let model = ToyModel::init(&ToyConfig::default(), 3).unwrap();
        let manifest = save(&model, dir.path()).unwrap();
        for e in &manifest.tensors {
            let len = std::fs::metadata(dir.path().join(&e.file)).unwrap().len();
            assert_eq!(len as usize, 8 * e.shape.iter().product::<usize>());
        }
        let back = load(dir.path()).unwrap();
        for ((_, a), (_, b)) in named_tensors(&model).iter().zip(named_tensors(&back)) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back, model);
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = ToyModel::init(&ToyConfig::default(), 3).unwrap();
        save(&model, dir.path()).unwrap();
        let f = dir.path().join("lm_head.f64");
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..bytes.len() - 8]).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("lm_head.f64"), "{err}");
    }
}
