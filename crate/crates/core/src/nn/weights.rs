//! Tensor files in the safetensors format: pretrained imports and
//! per-fold checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::zoo::{build_model, Model, ModelConfig};
use crate::{fsutil, Backbone, Error, Result};

pub fn pretrained_path(weights_dir: &Path, backbone: Backbone) -> PathBuf {
    weights_dir.join(format!("{backbone}.safetensors"))
}

/// How to produce the expected weight file offline with the reference
/// Python packages.
pub fn export_instructions(backbone: Backbone, path: &Path) -> String {
    let ctor = match backbone {
        Backbone::ResNet50 => "torchvision.models.resnet50(weights='IMAGENET1K_V1')",
        Backbone::ResNet101 => "torchvision.models.resnet101(weights='IMAGENET1K_V1')",
        Backbone::ResNet152 => "torchvision.models.resnet152(weights='IMAGENET1K_V1')",
        Backbone::InceptionV3 => "torchvision.models.inception_v3(weights='IMAGENET1K_V1')",
        Backbone::InceptionResNetV2 => "timm.create_model('inception_resnet_v2', pretrained=True)",
        Backbone::TinyCnn => return "tiny_cnn is always trained from scratch".into(),
    };
    format!(
        "export ImageNet weights once on a machine with network access, e.g.\n  \
         python3 scripts/export_weights.py {backbone} {dir}\n\
         which runs {ctor} and saves its state dict with safetensors.torch.save_file \
         to {path}; or rerun with pretrained = false.",
        dir = path.parent().unwrap_or(Path::new(".")).display(),
        path = path.display(),
    )
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

fn bad(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

fn decode(path: &Path, view: &TensorView<'_>) -> Result<Option<ArrayD<f64>>> {
    let data = view.data();
    let values: Vec<f64> = match view.dtype() {
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        // integer counters such as num_batches_tracked carry no weights
        _ => return Ok(None),
    };
    ArrayD::from_shape_vec(IxDyn(view.shape()), values)
        .map(Some)
        .map_err(|e| bad(path, e))
}

/// All floating-point tensors of a safetensors file, widened to f64.
pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let bytes = read_bytes(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(path, e))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if let Some(t) = decode(path, &view)? {
            out.insert(name, t);
        }
    }
    Ok(out)
}

fn read_metadata(path: &Path, bytes: &[u8]) -> Result<HashMap<String, String>> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(path, e))?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

/// Writes f64 tensors plus string metadata, atomically.
pub fn save_tensors(
    path: &Path,
    tensors: &BTreeMap<String, ArrayD<f64>>,
    metadata: HashMap<String, String>,
) -> Result<()> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(k, v)| {
            let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            (k.clone(), v.shape().to_vec(), bytes)
        })
        .collect();
    let views = raw
        .iter()
        .map(|(k, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (k.as_str(), v))
                .map_err(|e| bad(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let buf = safetensors::serialize(views, &Some(metadata)).map_err(|e| bad(path, e))?;
    fsutil::write_atomic(path, &buf)
}

/// What a checkpoint records besides weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub dataset: String,
    pub fold: u8,
    pub seed: u64,
    pub tool: String,
    /// Free-form extras, e.g. the training configuration echo.
    #[serde(default)]
    pub extra: serde_json::Value,
}

const META_KEY: &str = "checkpoint";

pub fn checkpoint_name(backbone: Backbone, dataset: &str, fold: u8) -> String {
    format!("{backbone}_{dataset}_fold{fold}.safetensors")
}

pub fn save_checkpoint(model: &mut Model, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let mut md = HashMap::new();
    md.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    save_tensors(path, &model.state(), md)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = read_bytes(path)?;
    let md = read_metadata(path, &bytes)?;
    let text = md.get(META_KEY).ok_or_else(|| bad(path, "no checkpoint metadata"))?;
    Ok(serde_json::from_str(text)?)
}

/// Rebuilds the model recorded in a checkpoint and loads every tensor.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    let cfg = ModelConfig {
        pretrained: false,
        ..meta.model.clone()
    };
    let mut model = build_model(&cfg, Path::new(""))?;
    model.load_state(&load_tensors(path)?, false)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use ndarray::Array4;

    fn tiny(seed: u64) -> Model {
        let cfg = ModelConfig {
            init_seed: seed,
            ..ModelConfig::new(Backbone::TinyCnn)
        };
        build_model(&cfg, Path::new("")).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(checkpoint_name(Backbone::TinyCnn, "dataset2", 3));
        let mut m = tiny(7);
        let meta = CheckpointMeta {
            model: m.config().clone(),
            dataset: "dataset2".into(),
            fold: 3,
            seed: 42,
            tool: crate::TOOL_VERSION.into(),
            extra: serde_json::json!({"lr": 1e-5}),
        };
        save_checkpoint(&mut m, &path, &meta).unwrap();
        let (mut back, meta_back) = load_checkpoint(&path).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.state(), m.state());
        let x = Array4::from_elem((1, 224, 224, 3), 0.3);
        assert_eq!(
            back.forward(&x, Mode::Eval).unwrap(),
            m.forward(&x, Mode::Eval).unwrap()
        );
    }

    #[test]
    fn pretrained_import_fills_backbone_keeps_head() {
        let dir = tempfile::tempdir().unwrap();
        let mut donor = tiny(1);
        // f32 export without the head, plus an unrelated extra tensor
        let mut views = Vec::new();
        let state = donor.state();
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = state
            .iter()
            .filter(|(k, _)| !k.starts_with("head"))
            .map(|(k, v)| {
                (
                    k.clone(),
                    v.shape().to_vec(),
                    v.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect(),
                )
            })
            .chain(std::iter::once((
                "fc.weight".to_string(),
                vec![1],
                0f32.to_le_bytes().to_vec(),
            )))
            .collect();
        for (k, s, b) in &raw {
            views.push((k.as_str(), TensorView::new(Dtype::F32, s.clone(), b).unwrap()));
        }
        let bytes = safetensors::serialize(views, &None).unwrap();
        std::fs::write(dir.path().join("x.safetensors"), bytes).unwrap();
        let loaded = load_tensors(&dir.path().join("x.safetensors")).unwrap();

        let mut m = tiny(2);
        let head_before = m.state()["head.fc.weight"].clone();
        m.load_state(&loaded, true).unwrap();
        let after = m.state();
        assert_eq!(after["head.fc.weight"], head_before);
        let w = &after["conv1.weight"];
        let expect = state["conv1.weight"].mapv(|v| v as f32 as f64);
        assert_eq!(w, &expect);
        // without the head allowance the same file is rejected
        assert!(matches!(m.load_state(&loaded, false), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_reported() {
        assert!(matches!(
            load_tensors(Path::new("/nonexistent.safetensors")),
            Err(Error::MissingFile(_))
        ));
    }
}
