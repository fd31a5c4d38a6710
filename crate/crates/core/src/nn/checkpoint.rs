//! Model checkpoints: a JSON header next to a little-endian f32 blob.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{make_model, Model, ModelSpec};
use super::tensor::Scalar;
use crate::dataset::{read_f32_le, read_json, write_f32_le, write_json, FORMAT_VERSION};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub seed: u64,
    /// Epoch whose weights were kept.
    pub epoch: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub config_hash: Option<String>,
    /// Layout of the weight blob, in order.
    pub tensors: Vec<TensorEntry>,
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("f32"))
}

/// Writes `<stem>.json` and `<stem>.f32`.
pub fn save<T: Scalar>(
    stem: &Path,
    model: &Model<T>,
    seed: u64,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
    config_hash: Option<String>,
) -> Result<()> {
    let state = model.state();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        spec: model.spec.clone(),
        seed,
        epoch,
        metrics,
        config_hash,
        tensors: state
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let blob: Vec<f32> = state.iter().flat_map(|(_, _, v)| v.iter().map(|x| x.f64() as f32)).collect();
    let (json, bin) = checkpoint_paths(stem);
    write_json(&json, &header)?;
    write_f32_le(&bin, &blob)
}

pub fn load<T: Scalar>(stem: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let (json, bin) = checkpoint_paths(stem);
    let header: CheckpointHeader = read_json(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let mut model = make_model::<T>(&header.spec, header.seed)?;
    let layout: Vec<TensorEntry> = model
        .state()
        .into_iter()
        .map(|(name, shape, _)| TensorEntry { name, shape })
        .collect();
    if layout != header.tensors {
        return Err(Error::Corrupt {
            path: json,
            reason: "tensor layout does not match the model spec".into(),
        });
    }
    let blob = read_f32_le(&bin)?;
    let values: Vec<T> = blob.iter().map(|&x| T::of(x as f64)).collect();
    model.load_state_vector(&values).map_err(|e| Error::Corrupt {
        path: bin,
        reason: e.to_string(),
    })?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ModelSpec;

    #[test]
    fn round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("byte03");
        let mut m = make_model::<f32>(&ModelSpec::cnn(8, 8), 9).unwrap();
        let x: Vec<f32> = (0..5 * 64).map(|i| (i as f32 * 0.13).sin()).collect();
        m.fit_standardizer(&x);
        let mut metrics = BTreeMap::new();
        metrics.insert("val_loss".to_string(), 5.5);
        save(&stem, &m, 9, 12, metrics, Some("abc".into())).unwrap();
        let (back, header) = load::<f32>(&stem).unwrap();
        assert_eq!(header.epoch, 12);
        assert_eq!(header.metrics["val_loss"], 5.5);
        assert_eq!(back.state_vector(), m.state_vector());
        assert_eq!(back.predict_many(&x).unwrap(), m.predict_many(&x).unwrap());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let m = make_model::<f32>(&ModelSpec::mlp(6), 1).unwrap();
        save(&stem, &m, 1, 1, BTreeMap::new(), None).unwrap();
        let (_, bin) = checkpoint_paths(&stem);
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load::<f32>(&stem), Err(Error::Corrupt { .. })));
        std::fs::remove_file(&bin).unwrap();
        assert!(matches!(load::<f32>(&stem), Err(Error::MissingComponent(_))));
    }
}
