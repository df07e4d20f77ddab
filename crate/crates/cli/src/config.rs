//! JSON configuration schemas for each subcommand and the data sources
//! they reference. See `docs/config-schema.md`.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use fivo_core::models::{AnyModel, AnyProposal, SequentialModel};
use fivo_core::numerics::stream_role;
use fivo_core::objectives::ObjectiveSpec;
use fivo_core::smc::Fault;
use fivo_core::trainer::{TrainConfig, LR_GRID};
use fivo_core::verify::{Scale, Suite};
use fivo_core::RngStream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A configuration problem; the CLI exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(field: &str, msg: impl fmt::Display) -> anyhow::Error {
    ConfigError(format!("config field `{field}`: {msg}")).into()
}

/// Deserialize `text`, naming the offending field on failure.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| config_error(&e.path().to_string(), e.inner()))
}

fn bootstrap() -> AnyProposal {
    AnyProposal::Bootstrap
}

fn learned() -> AnyProposal {
    AnyProposal::learned()
}

/// One observation sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SequenceSource {
    /// Drawn from `model`, or from the config's model when absent.
    Synthetic {
        length: usize,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<AnyModel>,
    },
    Inline {
        values: Vec<f64>,
    },
    /// A JSON array of numbers.
    File {
        path: PathBuf,
    },
}

/// Training and validation sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        length: usize,
        train_sequences: usize,
        validation_sequences: usize,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<AnyModel>,
    },
    /// A JSON object `{"train": [[...], ...], "validation": [[...], ...]}`.
    File { path: PathBuf },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    train: Vec<Vec<f64>>,
    #[serde(default)]
    validation: Vec<Vec<f64>>,
}

pub struct Dataset {
    pub train: Vec<Vec<f64>>,
    pub validation: Vec<Vec<f64>>,
}

fn absolute(path: &Path, base: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn read_input(path: &Path, field: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| config_error(field, format!("cannot read {}: {e}", path.display())))
}

fn check_model(model: &AnyModel, field: &str) -> Result<()> {
    model.validate().map_err(|e| config_error(field, e))
}

fn synthetic(model: &AnyModel, length: usize, seed: u64, count: usize) -> Vec<Vec<f64>> {
    let root = RngStream::new(seed, 0);
    (0..count as u64)
        .map(|k| model.sample(length, &mut root.derive(stream_role::DATA, k)).0)
        .collect()
}

fn check_sequences(seqs: &[Vec<f64>], field: &str) -> Result<()> {
    if seqs.iter().any(|s| s.is_empty()) {
        return Err(config_error(field, "sequences must be non-empty"));
    }
    if seqs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(config_error(field, "observations must be finite"));
    }
    Ok(())
}

impl SequenceSource {
    fn resolve(&mut self, base: &Path) {
        if let SequenceSource::File { path } = self {
            *path = absolute(path, base);
        }
    }

    pub fn input_file(&self) -> Option<&Path> {
        match self {
            SequenceSource::File { path } => Some(path),
            _ => None,
        }
    }

    pub fn load(&self, config_model: &AnyModel) -> Result<Vec<f64>> {
        let x = match self {
            SequenceSource::Synthetic { length, seed, model } => {
                if let Some(m) = model {
                    check_model(m, "data.model")?;
                }
                synthetic(model.as_ref().unwrap_or(config_model), *length, *seed, 1).remove(0)
            }
            SequenceSource::Inline { values } => values.clone(),
            SequenceSource::File { path } => {
                parse(&read_input(path, "data.path")?).map_err(|e| config_error("data.path", e))?
            }
        };
        check_sequences(std::slice::from_ref(&x), "data")?;
        Ok(x)
    }
}

impl DatasetSource {
    fn resolve(&mut self, base: &Path) {
        if let DatasetSource::File { path } = self {
            *path = absolute(path, base);
        }
    }

    pub fn input_file(&self) -> Option<&Path> {
        match self {
            DatasetSource::File { path } => Some(path),
            _ => None,
        }
    }

    pub fn load(&self, config_model: &AnyModel) -> Result<Dataset> {
        let data = match self {
            DatasetSource::Synthetic {
                length,
                train_sequences,
                validation_sequences,
                seed,
                model,
            } => {
                if let Some(m) = model {
                    check_model(m, "data.model")?;
                }
                let mut all = synthetic(
                    model.as_ref().unwrap_or(config_model),
                    *length,
                    *seed,
                    train_sequences + validation_sequences,
                );
                let validation = all.split_off(*train_sequences);
                Dataset { train: all, validation }
            }
            DatasetSource::File { path } => {
                let f: DatasetFile =
                    parse(&read_input(path, "data.path")?).map_err(|e| config_error("data.path", e))?;
                Dataset {
                    train: f.train,
                    validation: f.validation,
                }
            }
        };
        if data.train.is_empty() {
            return Err(config_error("data", "no training sequences"));
        }
        check_sequences(&data.train, "data.train")?;
        check_sequences(&data.validation, "data.validation")?;
        Ok(data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub model: AnyModel,
    #[serde(default = "bootstrap")]
    pub proposal: AnyProposal,
    pub data: SequenceSource,
    pub objectives: Vec<ObjectiveSpec>,
    /// Particle counts at which every ELBO, IWAE and FIVO objective is
    /// evaluated; empty keeps each objective's own count.
    #[serde(default)]
    pub particles: Vec<usize>,
    pub replicates: usize,
}

impl EstimateConfig {
    pub fn resolve(&mut self, base: &Path) -> Result<()> {
        self.data.resolve(base);
        check_model(&self.model, "model")?;
        if self.objectives.is_empty() {
            return Err(config_error("objectives", "at least one objective is required"));
        }
        for (i, o) in self.objectives.iter().enumerate() {
            o.validate().map_err(|e| config_error(&format!("objectives[{i}]"), e))?;
        }
        if let Some(i) = self.particles.iter().position(|&n| n == 0) {
            return Err(config_error(&format!("particles[{i}]"), "must be at least 1"));
        }
        if self.replicates < 2 {
            return Err(config_error(
                "replicates",
                "at least 2 replicates are needed for a standard error",
            ));
        }
        Ok(())
    }

    /// The (objective, N) cells in output order.
    pub fn cells(&self) -> Vec<ObjectiveSpec> {
        let mut out = Vec::new();
        for o in &self.objectives {
            match o {
                ObjectiveSpec::Ais { .. } | ObjectiveSpec::Mis { .. } => out.push(o.clone()),
                _ if self.particles.is_empty() => out.push(o.clone()),
                _ => out.extend(self.particles.iter().map(|&n| o.with_particles(n))),
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default)]
    pub suites: Vec<Suite>,
    #[serde(default)]
    pub scale: Scale,
    /// Fault injected into filter runs; used as a negative control.
    #[serde(default)]
    pub fault: Option<Fault>,
}

impl VerifyConfig {
    pub fn resolve(&mut self) -> Result<()> {
        if self.suites.is_empty() {
            return Err(config_error("suites", "no suite selected"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub model: AnyModel,
    #[serde(default = "learned")]
    pub proposal: AnyProposal,
    pub data: DatasetSource,
    pub train: TrainConfig,
}

impl TrainRunConfig {
    pub fn resolve(&mut self, base: &Path) -> Result<()> {
        self.data.resolve(base);
        check_model(&self.model, "model")?;
        self.train.validate().map_err(|e| config_error("train", e))
    }
}

fn default_grid() -> Vec<f64> {
    LR_GRID.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub model: AnyModel,
    #[serde(default = "learned")]
    pub proposal: AnyProposal,
    pub data: DatasetSource,
    /// Training settings; `learning_rate` is replaced by each grid entry.
    pub train: TrainConfig,
    #[serde(default = "default_grid")]
    pub learning_rates: Vec<f64>,
}

impl SweepConfig {
    /// Parse, filling `train.learning_rate` with the first grid entry when
    /// it is absent.
    pub fn parse(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = parse(text)?;
        let grid = match value.get("learning_rates") {
            Some(g) => parse::<Vec<f64>>(&g.to_string()).map_err(|e| config_error("learning_rates", e))?,
            None => default_grid(),
        };
        if let (Some(train), Some(&lr)) = (value.get_mut("train").and_then(|t| t.as_object_mut()), grid.first()) {
            train.entry("learning_rate").or_insert(lr.into());
        }
        parse(&value.to_string())
    }

    pub fn resolve(&mut self, base: &Path) -> Result<()> {
        if self.learning_rates.is_empty() {
            return Err(config_error("learning_rates", "grid is empty"));
        }
        if let Some(i) = self.learning_rates.iter().position(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(config_error(
                &format!("learning_rates[{i}]"),
                "must be finite and non-negative",
            ));
        }
        if self.train.validation_every == 0 {
            return Err(config_error(
                "train.validation_every",
                "grid search selects by validation; must be positive",
            ));
        }
        self.train.learning_rate = self.learning_rates[0];
        self.data.resolve(base);
        check_model(&self.model, "model")?;
        self.train.validate().map_err(|e| config_error("train", e))
    }

    /// The single-run config for grid entry `lr`.
    pub fn cell(&self, lr: f64) -> TrainRunConfig {
        TrainRunConfig {
            model: self.model.clone(),
            proposal: self.proposal.clone(),
            data: self.data.clone(),
            train: TrainConfig {
                learning_rate: lr,
                ..self.train.clone()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"kind": "lgssm", "a": 0.9, "c": 1.0, "var_z": 1.0, "var_x": 1.0, "var_0": 1.0},
        "data": {"kind": "synthetic", "length": 5, "seed": 3},
        "objectives": [{"kind": "iwae", "n_particles": 4}, {"kind": "ais", "intervals": 3, "kernel": {"step_std": 0.5, "sweeps": 1}}],
        "particles": [2, 8],
        "replicates": 10
    }"#;

    #[test]
    fn cells_expand_particle_counts_but_not_ais() {
        let mut c: EstimateConfig = parse(MINIMAL).unwrap();
        c.resolve(Path::new(".")).unwrap();
        let cells = c.cells();
        assert_eq!(
            cells.iter().map(|o| o.name()).collect::<Vec<_>>(),
            ["iwae", "iwae", "ais"]
        );
        assert_eq!(cells[1].n_particles(), 8);
    }

    #[test]
    fn unknown_objective_names_the_field() {
        let text = MINIMAL.replace("\"iwae\"", "\"vae\"");
        let err = parse::<EstimateConfig>(&text).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(err.to_string().contains("objectives[0]"), "{err}");
    }

    #[test]
    fn unknown_top_level_field_is_rejected() {
        let text = MINIMAL.replace("\"replicates\"", "\"replicatez\"");
        assert!(parse::<EstimateConfig>(&text).is_err());
    }

    #[test]
    fn synthetic_sequence_is_reproducible() {
        let c: EstimateConfig = parse(MINIMAL).unwrap();
        let a = c.data.load(&c.model).unwrap();
        let b = c.data.load(&c.model).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_fills_missing_learning_rate() {
        let text = r#"{
            "model": {"kind": "lgssm", "a": 0.9, "c": 1.0, "var_z": 1.0, "var_x": 1.0, "var_0": 1.0},
            "data": {"kind": "synthetic", "length": 4, "train_sequences": 2, "validation_sequences": 2, "seed": 1},
            "train": {"objective": {"kind": "elbo"}, "max_steps": 3, "validation_every": 1}
        }"#;
        let mut c = SweepConfig::parse(text).unwrap();
        c.resolve(Path::new(".")).unwrap();
        assert_eq!(c.learning_rates, LR_GRID.to_vec());
        assert_eq!(c.cell(1e-5).train.learning_rate, 1e-5);
    }
}
