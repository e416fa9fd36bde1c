//! Versioned JSON checkpoints. Every value is stored as a hexadecimal float
//! literal so a save/load round trip is bit exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::hexfloat::{format_hex, parse_hex};
use crate::model::{build_model, Model, ModelConfig};
use crate::skeleton::{SkeletonTopology, TopologyFile};

pub const CHECKPOINT_FORMAT: &str = "skelgnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    topology: TopologyFile,
    params: Vec<ParamRecord>,
    batch_norm: Vec<BufferRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct BufferRecord {
    running_mean: Vec<String>,
    running_var: Vec<String>,
}

fn hex_vec(v: &[f64]) -> Vec<String> {
    v.iter().map(|&x| format_hex(x)).collect()
}

fn parse_vec(v: &[String], what: &str) -> Result<Vec<f64>, ModelError> {
    v.iter()
        .map(|s| parse_hex(s).ok_or_else(|| ModelError::Parse(format!("bad value `{s}` in {what}"))))
        .collect()
}

/// Serializes a model to a JSON string.
pub fn checkpoint_to_string(model: &Model) -> String {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        topology: model.topology.to_file_repr(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: hex_vec(p.value.data()),
            })
            .collect(),
        batch_norm: model
            .state
            .bn
            .iter()
            .map(|b| BufferRecord {
                running_mean: hex_vec(&b.running_mean),
                running_var: hex_vec(&b.running_var),
            })
            .collect(),
    };
    let mut s = serde_json::to_string(&file).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    fs::write(path, checkpoint_to_string(model)).map_err(|source| ModelError::IoFailure {
        path: path.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> Result<CheckpointFile, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text)
}

fn parse(text: &str) -> Result<CheckpointFile, ModelError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(ModelError::Parse("not a skelgnn checkpoint".into()));
    }
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| ModelError::Parse(e.to_string()))
}

/// Builds a model from `config` and `topo` and fills it from the
/// checkpoint. Every parameter must be present with the same shape.
pub fn load_checkpoint(path: &Path, config: &ModelConfig, topo: &SkeletonTopology) -> Result<Model, ModelError> {
    let file = read(path)?;
    restore(file, config, topo)
}

/// Rebuilds a model from the configuration and topology stored in the
/// checkpoint itself.
pub fn load_checkpoint_standalone(path: &Path) -> Result<Model, ModelError> {
    let file = read(path)?;
    checkpoint_from_file(file)
}

/// Parses a checkpoint held in memory.
pub fn checkpoint_from_str(text: &str) -> Result<Model, ModelError> {
    checkpoint_from_file(parse(text)?)
}

fn checkpoint_from_file(file: CheckpointFile) -> Result<Model, ModelError> {
    let topo = SkeletonTopology::from_file_repr(file.topology.clone())?;
    let config = file.config.clone();
    restore(file, &config, &topo)
}

fn restore(file: CheckpointFile, config: &ModelConfig, topo: &SkeletonTopology) -> Result<Model, ModelError> {
    let mut model = build_model(config, topo)?;
    if model.params.len() != file.params.len() {
        let stored: std::collections::HashSet<&str> = file.params.iter().map(|p| p.name.as_str()).collect();
        let missing = model
            .params
            .iter()
            .map(|(_, p)| p.name.as_str())
            .find(|n| !stored.contains(n));
        let msg = match missing {
            Some(n) => format!("parameter `{n}` is missing from the checkpoint"),
            None => format!(
                "checkpoint has {} parameters, model expects {}",
                file.params.len(),
                model.params.len()
            ),
        };
        return Err(ModelError::ShapeConflict(msg));
    }
    for rec in &file.params {
        let id = model
            .params
            .id(&rec.name)
            .ok_or_else(|| ModelError::ShapeConflict(format!("unexpected parameter `{}`", rec.name)))?;
        let p = model.params.get_mut(id);
        if p.value.shape() != rec.shape.as_slice() || rec.values.len() != p.value.numel() {
            return Err(ModelError::ShapeConflict(format!(
                "parameter `{}` has shape {:?} in the checkpoint, model expects {:?}",
                rec.name,
                rec.shape,
                p.value.shape()
            )));
        }
        let values = parse_vec(&rec.values, &rec.name)?;
        p.value.data_mut().copy_from_slice(&values);
    }
    if file.batch_norm.len() != model.state.bn.len() {
        return Err(ModelError::ShapeConflict(format!(
            "checkpoint has {} batch-norm layers, model expects {}",
            file.batch_norm.len(),
            model.state.bn.len()
        )));
    }
    for (b, rec) in model.state.bn.iter_mut().zip(&file.batch_norm) {
        let mean = parse_vec(&rec.running_mean, "batch-norm mean")?;
        let var = parse_vec(&rec.running_var, "batch-norm variance")?;
        if mean.len() != b.running_mean.len() || var.len() != b.running_var.len() {
            return Err(ModelError::ShapeConflict(
                "batch-norm statistics have the wrong length".into(),
            ));
        }
        b.running_mean = mean;
        b.running_var = var;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::GraphMode;
    use crate::rng;

    fn cfg(mode: GraphMode) -> ModelConfig {
        ModelConfig {
            channels: 8,
            graph_mode: mode,
            ..ModelConfig::default()
        }
    }

    fn perturbed(config: &ModelConfig) -> Model {
        let topo = SkeletonTopology::h36m17();
        let mut m = build_model(config, &topo).unwrap();
        let mut r = rng::stream(1, "perturb");
        for id in m.params.ids().collect::<Vec<_>>() {
            for v in m.params.get_mut(id).value.data_mut() {
                *v += r.random_range(-0.1..0.1);
            }
        }
        for b in &mut m.state.bn {
            b.running_var.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
        }
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let config = cfg(GraphMode::HcsfDynamic);
        let m = perturbed(&config);
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path, &config, &m.topology).unwrap();
        assert_eq!(back.params, m.params);
        let x = Tensor::full(&[2, 17, 2], 0.3);
        assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
        let alone = load_checkpoint_standalone(&path).unwrap();
        assert_eq!(alone.predict(&x).unwrap(), m.predict(&x).unwrap());
        assert_eq!(checkpoint_to_string(&alone), checkpoint_to_string(&m));
    }

    #[test]
    fn mismatches_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let config = cfg(GraphMode::HcsfDynamic);
        let m = perturbed(&config);
        save_checkpoint(&m, &path).unwrap();
        let topo = SkeletonTopology::h36m17();
        let wider = ModelConfig {
            channels: 16,
            ..config.clone()
        };
        assert!(matches!(
            load_checkpoint(&path, &wider, &topo),
            Err(ModelError::ShapeConflict(_))
        ));
        let stat = cfg(GraphMode::HcsfStatic);
        assert!(matches!(
            load_checkpoint(&path, &stat, &topo),
            Err(ModelError::ShapeConflict(_))
        ));
        assert!(matches!(
            load_checkpoint(&dir.path().join("none.json"), &config, &topo),
            Err(ModelError::IoFailure { .. })
        ));
        let text = fs::read_to_string(&path)
            .unwrap()
            .replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(
            checkpoint_from_str(&text),
            Err(ModelError::VersionMismatch { found: 7, expected: 1 })
        ));
        assert!(matches!(checkpoint_from_str("{}"), Err(ModelError::Parse(_))));
    }
}
