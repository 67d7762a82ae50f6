//! Run configuration: built-in profile defaults, then an optional TOML file,
//! then dotted-name overrides such as `train.total_iters = 200`.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use voxelrf_core::trainer::{default_upsample_iters, TrainConfig};
use voxelrf_core::ModelConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub preset: String,
    pub tx_modulation: f64,
    pub azimuths: usize,
    pub elevations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<String>,
    pub n_tx: usize,
    pub seed: u64,
    /// Reference renderer step; defaults to a sixteenth of the final voxel.
    pub fine_step: Option<f64>,
    pub rssi_offset_db: f64,
    pub rssi_noise_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub dims: [usize; 3],
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub pos_levels: usize,
    pub dir_levels: usize,
    pub density_bias: f64,
    pub deformation: bool,
    pub stages: usize,
    /// Defaults to `total_iters / 2^(stages - s)` for stage `s`.
    pub upsample_iters: Option<Vec<usize>>,
    pub total_iters: usize,
    pub batch_rays: usize,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    pub lr_decay_target: f64,
    pub skip_threshold: f64,
    pub bg_weight: f64,
    pub step: Option<f64>,
    pub seed: u64,
    pub log_interval: usize,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub checkpoint: Option<String>,
    /// Loss log CSV; defaults to the checkpoint path with `.loss.csv` appended.
    pub log: Option<String>,
    /// Spectrum file for `infer`, metrics directory for `eval`.
    pub out: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub tx: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Overrides the split seed stored in the checkpoint.
    pub split_seed: Option<u64>,
    pub rssi: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub scene: SceneSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub paths: PathsSection,
    pub infer: InferSection,
    pub eval: EvalSection,
}

/// Every accepted dotted key.
pub const KEYS: &[&str] = &[
    "profile",
    "scene.preset",
    "scene.tx_modulation",
    "scene.azimuths",
    "scene.elevations",
    "data.dir",
    "data.n_tx",
    "data.seed",
    "data.fine_step",
    "data.rssi_offset_db",
    "data.rssi_noise_db",
    "train.dims",
    "train.feature_dim",
    "train.hidden_width",
    "train.pos_levels",
    "train.dir_levels",
    "train.density_bias",
    "train.deformation",
    "train.stages",
    "train.upsample_iters",
    "train.total_iters",
    "train.batch_rays",
    "train.lr_grid",
    "train.lr_mlp",
    "train.lr_decay_target",
    "train.skip_threshold",
    "train.bg_weight",
    "train.step",
    "train.seed",
    "train.log_interval",
    "train.split_seed",
    "paths.checkpoint",
    "paths.log",
    "paths.out",
    "infer.tx",
    "eval.split_seed",
    "eval.rssi",
];

fn train_section(t: &TrainConfig) -> TrainSection {
    let m = &t.model;
    TrainSection {
        dims: m.dims,
        feature_dim: m.feature_dim,
        hidden_width: m.hidden_width,
        pos_levels: m.pos_levels,
        dir_levels: m.dir_levels,
        density_bias: m.density_bias,
        deformation: m.deformation,
        stages: t.stages,
        upsample_iters: None,
        total_iters: t.total_iters,
        batch_rays: t.batch_rays,
        lr_grid: t.lr_grid,
        lr_mlp: t.lr_mlp,
        lr_decay_target: t.lr_decay_target,
        skip_threshold: t.skip_threshold,
        bg_weight: t.bg_weight,
        step: t.step,
        seed: t.seed,
        log_interval: t.log_interval,
        split_seed: 0,
    }
}

impl RunConfig {
    /// Built-in defaults: `desk` (CPU-sized) or `paper` (full scale).
    pub fn profile(name: &str) -> Result<Self> {
        let train = match name {
            "desk" => TrainConfig::desk(),
            "paper" => TrainConfig::paper(),
            other => return Err(Error::Config(format!("unknown profile `{other}` (known: desk, paper)"))),
        };
        let (azimuths, elevations) = match name {
            "paper" => (360, 90),
            _ => (36, 9),
        };
        Ok(Self {
            profile: name.into(),
            scene: SceneSection {
                preset: "demo".into(),
                tx_modulation: 0.5,
                azimuths,
                elevations,
            },
            data: DataSection {
                dir: None,
                n_tx: 160,
                seed: 7,
                fine_step: None,
                rssi_offset_db: -50.0,
                rssi_noise_db: 1.0,
            },
            train: train_section(&train),
            paths: PathsSection {
                checkpoint: None,
                log: None,
                out: None,
            },
            infer: InferSection { tx: None },
            eval: EvalSection {
                split_seed: None,
                rssi: false,
            },
        })
    }

    /// Layers `file` (TOML text) and `overrides` over the profile they
    /// select. The profile comes from the overrides, else the file, else
    /// `desk`. All unknown keys are reported in one error.
    pub fn resolve(file: Option<&str>, overrides: &[(String, Value)]) -> Result<Self> {
        let file_table: Table = match file {
            Some(text) => text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => Table::new(),
        };
        let mut over_table = Table::new();
        for (key, value) in overrides {
            set_dotted(&mut over_table, key, value.clone())?;
        }
        let mut unknown: Vec<String> = Vec::new();
        collect_unknown(&file_table, "", &mut unknown);
        collect_unknown(&over_table, "", &mut unknown);
        if !unknown.is_empty() {
            unknown.sort();
            unknown.dedup();
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }

        let profile = [&over_table, &file_table]
            .iter()
            .find_map(|t| t.get("profile"))
            .map(|v| v.as_str().map(str::to_owned).ok_or_else(|| Error::Config("profile must be a string".into())))
            .transpose()?
            .unwrap_or_else(|| "desk".into());
        let defaults = Value::try_from(Self::profile(&profile)?).expect("config serializes");
        let Value::Table(mut merged) = defaults else {
            unreachable!("config serializes to a table")
        };
        merge(&mut merged, file_table);
        merge(&mut merged, over_table);
        Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    /// Fails with every listed key that has no value.
    pub fn require(&self, keys: &[&str]) -> Result<()> {
        let missing: Vec<&str> = keys.iter().copied().filter(|k| !self.has(k)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("missing required keys: {}", missing.join(", "))))
        }
    }

    fn has(&self, key: &str) -> bool {
        match key {
            "data.dir" => self.data.dir.is_some(),
            "paths.checkpoint" => self.paths.checkpoint.is_some(),
            "paths.out" => self.paths.out.is_some(),
            "infer.tx" => self.infer.tx.is_some(),
            _ => true,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let t = &self.train;
        ModelConfig {
            dims: t.dims,
            feature_dim: t.feature_dim,
            hidden_width: t.hidden_width,
            pos_levels: t.pos_levels,
            dir_levels: t.dir_levels,
            density_bias: t.density_bias,
            deformation: t.deformation,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            model: self.model_config(),
            stages: t.stages,
            upsample_iters: t
                .upsample_iters
                .clone()
                .unwrap_or_else(|| default_upsample_iters(t.total_iters, t.stages)),
            total_iters: t.total_iters,
            batch_rays: t.batch_rays,
            lr_grid: t.lr_grid,
            lr_mlp: t.lr_mlp,
            lr_decay_target: t.lr_decay_target,
            skip_threshold: t.skip_threshold,
            bg_weight: t.bg_weight,
            step: t.step,
            seed: t.seed,
            log_interval: t.log_interval,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Parses a command-line override value as a TOML value, falling back to a
/// plain string. `1,2,3` is accepted for numeric arrays.
pub fn parse_value(raw: &str) -> Value {
    let parse = |s: &str| s.parse::<Table>().ok().and_then(|mut t| t.remove("v"));
    parse(&format!("v = {raw}"))
        .or_else(|| raw.contains(',').then(|| parse(&format!("v = [{raw}]"))).flatten())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("malformed key `{key}`")));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur.entry(part).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` descends into a non-table")))?;
    }
    Ok(())
}

fn collect_unknown(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if KEYS.contains(&key.as_str()) {
            continue;
        }
        match v {
            Value::Table(t) if KEYS.iter().any(|known| known.starts_with(&format!("{key}."))) => {
                collect_unknown(t, &key, out)
            }
            _ => out.push(key),
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
