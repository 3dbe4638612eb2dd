//! Layered experiment configuration: preset defaults, then the TOML file,
//! then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use dts_core::data::{
    build_mismatch_split, generate_synthetic, load_cifar10_binary, read_dataset_csv, MismatchSplit,
    SyntheticSpec,
};
use dts_core::{Benchmark, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Published hyperparameters.
    Standard,
    /// Small schedule for quick runs.
    Desk,
    /// Desk schedule with the synthetic benchmark's steps per epoch.
    Benchmark,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
    Cifar10,
}

/// Synthetic Gaussian classes; the generator seed is the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub k_seen: usize,
    pub k_unseen: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Defaults: `1..=k_seen` for synthetic data, the sidecar list for CSV,
    /// the six animal classes for CIFAR-10.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seen_class_ids: Option<Vec<usize>>,
    pub mismatch_ratio: f64,
    pub labeled_size: usize,
    pub unlabeled_size: usize,
    pub test_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_per_class: Option<usize>,
    pub synthetic: SyntheticParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub preset: Preset,
    /// Every run takes its training and data seed from this list;
    /// `train.seed` is overwritten per run.
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

const CIFAR_ANIMALS: [usize; 6] = [3, 4, 5, 6, 7, 8];

impl ExperimentConfig {
    pub fn defaults(preset: Preset) -> Self {
        let bench = Benchmark::desk(0);
        let s = &bench.synthetic;
        let train = match preset {
            Preset::Standard => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
            Preset::Benchmark => bench.config(dts_core::AblationMode::Full),
        };
        ExperimentConfig {
            name: "dts".into(),
            preset,
            seeds: vec![0],
            dataset: DatasetConfig {
                source: DataSource::Synthetic,
                path: None,
                seen_class_ids: None,
                mismatch_ratio: bench.mismatch_ratio,
                labeled_size: bench.labeled_size,
                unlabeled_size: bench.unlabeled_size,
                test_fraction: bench.test_fraction,
                max_per_class: None,
                synthetic: SyntheticParams {
                    k_seen: s.k_seen,
                    k_unseen: s.k_unseen,
                    dim: s.dim,
                    per_class: s.per_class,
                    separation: s.separation,
                    noise: s.noise,
                },
            },
            train,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Validation("seeds: at least one seed is required".into()));
        }
        self.train
            .validate()
            .map_err(|e| CliError::Validation(format!("train: {e}")))?;
        let d = &self.dataset;
        if !(0.0..=1.0).contains(&d.mismatch_ratio) {
            return Err(CliError::Validation(format!(
                "dataset.mismatch_ratio: must lie in [0, 1], got {}",
                d.mismatch_ratio
            )));
        }
        match (d.source, &d.path) {
            (DataSource::Synthetic, _) => {}
            (_, None) => {
                return Err(CliError::Validation(format!(
                    "dataset.path: required for {:?} data",
                    d.source
                )))
            }
            (_, Some(p)) if !p.exists() => {
                return Err(CliError::Validation(format!(
                    "dataset.path: {} does not exist",
                    p.display()
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Copy of this config for a single seed.
    pub fn for_seed(&self, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        c
    }

    /// SHA-256 over the canonical JSON form, excluding the seed list.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.train.seed = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn build_split(&self, seed: u64) -> CliResult<MismatchSplit> {
        let d = &self.dataset;
        let (dataset, sidecar_seen) = match d.source {
            DataSource::Synthetic => {
                let s = &d.synthetic;
                let ds = generate_synthetic(&SyntheticSpec {
                    k_seen: s.k_seen,
                    k_unseen: s.k_unseen,
                    dim: s.dim,
                    per_class: s.per_class,
                    separation: s.separation,
                    noise: s.noise,
                    seed,
                })?;
                (ds, Some((1..=s.k_seen).collect::<Vec<_>>()))
            }
            DataSource::Csv => {
                let (ds, meta) = read_dataset_csv(self.dataset_path()?)?;
                (ds, meta.seen_class_ids)
            }
            DataSource::Cifar10 => (
                load_cifar10_binary(self.dataset_path()?, d.max_per_class)?,
                Some(CIFAR_ANIMALS.to_vec()),
            ),
        };
        let seen = d
            .seen_class_ids
            .clone()
            .or(sidecar_seen)
            .ok_or_else(|| CliError::Validation("dataset.seen_class_ids: not set and not in the dataset metadata".into()))?;
        Ok(build_mismatch_split(
            &dataset,
            &seen,
            d.mismatch_ratio,
            d.labeled_size,
            d.unlabeled_size,
            d.test_fraction,
            seed,
        )?)
    }

    fn dataset_path(&self) -> CliResult<&Path> {
        self.dataset
            .path
            .as_deref()
            .ok_or_else(|| CliError::Validation("dataset.path: required".into()))
    }
}

/// One `key=value` override. Bare keys are looked up in `train`, then
/// `dataset`, then `dataset.synthetic`, then the top level. Optional fields
/// that are unset (`dataset.path`, `dataset.seen_class_ids`,
/// `train.steps_per_epoch`, ...) need the dotted form.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
}

impl std::str::FromStr for Override {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(format!("empty key in {s:?}"));
        }
        Ok(Override {
            key: key.to_string(),
            value: value.trim().to_string(),
        })
    }
}

fn parse_value(raw: &str) -> Value {
    // A TOML literal when it parses as one, otherwise a bare string.
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

const BARE_KEY_SECTIONS: [&[&str]; 4] = [&["train"], &["dataset"], &["dataset", "synthetic"], &[]];

fn lookup<'a>(root: &'a Table, path: &[&str]) -> Option<&'a Table> {
    path.iter()
        .try_fold(root, |t, k| t.get(*k).and_then(Value::as_table))
}

fn resolve_key(root: &Table, key: &str) -> CliResult<Vec<String>> {
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    if parts.len() > 1 {
        return Ok(parts);
    }
    for section in BARE_KEY_SECTIONS {
        if lookup(root, section).is_some_and(|t| t.contains_key(key)) {
            return Ok(section.iter().map(|s| s.to_string()).chain([key.to_string()]).collect());
        }
    }
    Err(CliError::Validation(format!("unknown configuration key {key:?}")))
}

fn set_path(root: &mut Table, path: &[String], value: Value) -> CliResult<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("{}: not a section", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves the effective configuration. `preset` on the command line wins
/// over the file's `preset` key.
pub fn load(
    file: Option<&Path>,
    preset: Option<Preset>,
    overrides: &[Override],
) -> CliResult<ExperimentConfig> {
    let file_table: Table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Validation(format!("cannot read config {}: {e}", path.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    let file_preset = match file_table.get("preset") {
        Some(v) => Some(
            Preset::deserialize(v.clone())
                .map_err(|e| CliError::Validation(format!("preset: {e}")))?,
        ),
        None => None,
    };
    let preset = preset.or(file_preset).unwrap_or(Preset::Standard);
    let mut root = Table::try_from(ExperimentConfig::defaults(preset))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    merge(&mut root, file_table);
    root.insert("preset".into(), Value::String(format!("{preset:?}").to_lowercase()));
    for o in overrides {
        let path = resolve_key(&root, &o.key)?;
        set_path(&mut root, &path, parse_value(&o.value))?;
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(Value::Table(root))
        .map_err(|e| CliError::Validation(format!("{}: {}", e.path(), e.inner())))?;
    config.validate()?;
    Ok(config)
}
