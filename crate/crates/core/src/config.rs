//! Run configuration: a TOML document with `topology`, `model`, `training`,
//! `data`, `metrics` and `output` sections, plus `a.b.c=value` overrides.
//!
//! ```toml
//! [topology]
//! source = "h36m17"        # preset name or topology file
//!
//! [data]
//! train = "train.jsonl"    # relative to the config file
//! test = "test.jsonl"
//!
//! [model]
//! channels = 64
//!
//! [training]
//! epochs = 80
//!
//! [output]
//! dir = "demo"             # relative to $SKELGNN_OUTPUT_ROOT, default ./runs
//! checkpoint_every = 1
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsConfig;
use crate::model::ModelConfig;
use crate::skeleton::SkeletonTopology;
use crate::train::TrainConfig;

/// Environment variable naming the directory relative output paths live in.
pub const OUTPUT_ROOT_ENV: &str = "SKELGNN_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key.path=value")]
    Override(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    pub source: String,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            source: crate::skeleton::H36M_PRESET.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Write a checkpoint every this many epochs; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub topology: TopologySection,
    pub data: DataSection,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub metrics: MetricsConfig,
    pub output: OutputSection,
}

/// Sets `key.path` in `table` to `value`, parsed as a TOML value when
/// possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(spec.to_string());
    let (key, raw) = spec.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad());
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, path) = parts.split_last().ok_or_else(bad)?;
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(bad)?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A validated run: every referenced file exists and every section checks
/// out. Nothing has been written yet.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub topology: SkeletonTopology,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    pub output_dir: PathBuf,
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Directory relative output paths resolve against.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Validates a config loaded from `config_path`. Data and topology paths are
/// relative to the config file's directory.
pub fn resolve(config: RunConfig, config_path: &Path) -> Result<ResolvedRun, ConfigError> {
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let invalid = |m: String| ConfigError::Invalid(m);
    let topology = match SkeletonTopology::preset(&config.topology.source) {
        Some(t) => t,
        None => {
            let p = resolve_path(&base, Path::new(&config.topology.source));
            if !p.exists() {
                return Err(invalid(format!(
                    "topology `{}` is neither a preset nor an existing file ({})",
                    config.topology.source,
                    p.display()
                )));
            }
            SkeletonTopology::load(&p).map_err(|e| invalid(format!("topology {}: {e:#}", p.display())))?
        }
    };
    let existing = |p: &Path, what: &str| {
        let full = resolve_path(&base, p);
        if full.is_file() {
            Ok(full)
        } else {
            Err(invalid(format!("{what} data file not found: {}", full.display())))
        }
    };
    let train = existing(
        config
            .data
            .train
            .as_deref()
            .ok_or_else(|| invalid("data.train is required".into()))?,
        "training",
    )?;
    let test = config.data.test.as_deref().map(|p| existing(p, "test")).transpose()?;
    config.model.validate(&topology).map_err(|e| invalid(e.to_string()))?;
    config.training.validate().map_err(|e| invalid(e.to_string()))?;
    validate_metrics(&config.metrics)?;
    let stem = config_path
        .file_stem()
        .map(PathBuf::from)
        .unwrap_or_else(|| "run".into());
    let output_dir = resolve_path(&output_root(), config.output.dir.as_deref().unwrap_or(&stem));
    Ok(ResolvedRun {
        config,
        topology,
        train,
        test,
        output_dir,
    })
}

pub fn validate_metrics(m: &MetricsConfig) -> Result<(), ConfigError> {
    let bad = |s: &str| Err(ConfigError::Invalid(format!("metrics: {s}")));
    if m.pck_threshold.is_nan() || m.pck_threshold <= 0.0 {
        return bad("pck_threshold must be positive");
    }
    if !(m.bin_width > 0.0 && m.bin_width.is_finite()) {
        return bad("bin_width must be positive");
    }
    if m.auc_thresholds.is_empty() || m.auc_thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return bad("auc_thresholds must be a nonempty ascending list");
    }
    if m.percentiles.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return bad("percentiles must lie in (0, 1]");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence() {
        let text = "[training]\nepochs = 5\n[model]\nchannels = 16\n";
        let cfg = RunConfig::from_toml(
            text,
            &[
                "training.epochs=1".into(),
                "model.graph_mode=hcsf_static".into(),
                "model.dynamic.variant = o_only".into(),
                "training.lr0=2e-4".into(),
                "output.dir=some/where".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.training.epochs, 1);
        assert_eq!(cfg.model.channels, 16);
        assert_eq!(cfg.model.graph_mode, crate::model::GraphMode::HcsfStatic);
        assert_eq!(cfg.model.dynamic.variant, crate::dynamic::DynamicVariant::OOnly);
        assert_eq!(cfg.training.lr0, 2e-4);
        assert_eq!(cfg.output.dir, Some(PathBuf::from("some/where")));
        assert!(matches!(
            RunConfig::from_toml("", &["nokey".into()]),
            Err(ConfigError::Override(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("", &["model..x=1".into()]),
            Err(ConfigError::Override(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("", &["model.bogus=1".into()]),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[training]\nepochs = 5\n", &["training.epochs.x=1".into()]),
            Err(ConfigError::Override(_))
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn resolve_checks_files_and_sections() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("exp.toml");
        let mut cfg = RunConfig::default();
        cfg.data.train = Some("train.jsonl".into());
        let err = resolve(cfg.clone(), &cfg_path).unwrap_err().to_string();
        assert!(err.contains("train.jsonl"), "{err}");
        fs::write(dir.path().join("train.jsonl"), "").unwrap();
        let run = resolve(cfg.clone(), &cfg_path).unwrap();
        assert_eq!(run.train, dir.path().join("train.jsonl"));
        assert!(run.output_dir.ends_with("exp"));
        cfg.model.l_hop = 9;
        assert!(matches!(resolve(cfg.clone(), &cfg_path), Err(ConfigError::Invalid(_))));
        cfg.model.l_hop = 2;
        cfg.topology.source = "nope".into();
        assert!(matches!(resolve(cfg, &cfg_path), Err(ConfigError::Invalid(_))));
    }
}
