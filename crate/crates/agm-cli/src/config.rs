//! Run configuration: one canonical nested key-value file (TOML), desk and
//! full-scale presets, dotted-path overrides, and the resolved snapshot
//! written into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use agm_core::agm::AgmParams;
use agm_core::baselines::{FishConfig, IrmConfig};
use agm_core::data::SplitSpec;
use agm_core::eval::MethodParams;
use agm_core::model::ModelConfig;
use agm_core::train::TrainHyper;
use agm_core::{Error, Result};

/// Environment variable selecting the workspace root; relative data and
/// output paths resolve against it.
pub const WORKSPACE_ENV: &str = "AGM_WORKSPACE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroSection {
    pub eta: f64,
    pub c_adj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Spurious-token strength for every generated domain.
    pub rho: f64,
    /// Generation seed (independent of training seeds).
    pub seed: u64,
    pub split: SplitSpec,
    /// External corpora to ingest instead of generating; empty means
    /// synthetic generation.
    #[serde(default)]
    pub jsonl: Vec<JsonlSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlSource {
    pub path: String,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    /// Targets to hold out; empty means every domain in turn.
    #[serde(default)]
    pub targets: Vec<String>,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainHyper,
    pub agm: AgmParams,
    pub irm: IrmConfig,
    pub fish: FishConfig,
    pub dro: DroSection,
    pub data: DataSection,
    pub run: RunSection,
}

impl RunConfig {
    /// Desk-scale defaults: minutes-scale CPU runs.
    pub fn desk_default() -> Self {
        Self {
            model: ModelConfig::desk_default(),
            train: TrainHyper::desk_default(),
            agm: AgmParams::default(),
            irm: IrmConfig::desk_default(),
            fish: FishConfig::desk_default(),
            dro: DroSection {
                eta: 0.01,
                c_adj: 1.5,
            },
            data: DataSection {
                rho: 0.9,
                seed: 7,
                split: SplitSpec::desk_default(),
                jsonl: Vec::new(),
            },
            run: RunSection {
                methods: vec!["erm".into(), "agm_mask_only".into()],
                seeds: (42..=49).collect(),
                targets: Vec::new(),
                jobs: 2,
            },
        }
    }

    /// The published full-scale recipe, selected explicitly. Model
    /// dimensions stay desk-sized (there is no pretrained encoder here);
    /// the optimization constants follow the full-scale setting.
    pub fn full_scale() -> Self {
        let mut cfg = Self::desk_default();
        cfg.train = TrainHyper::full_scale();
        cfg.model.max_seq_len = 256;
        cfg.irm = IrmConfig::full_scale();
        cfg.fish = FishConfig::full_scale();
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk_default()),
            "full" => Ok(Self::full_scale()),
            other => Err(Error::invalid(format!(
                "unknown preset {other:?} (expected desk or full)"
            ))),
        }
    }

    pub fn method_params(&self) -> MethodParams {
        MethodParams {
            agm: self.agm,
            irm: self.irm,
            fish: self.fish,
            dro_eta: self.dro.eta,
            dro_c: self.dro.c_adj,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.fish.validate()?;
        if !(0.5..=1.0).contains(&self.data.rho) {
            return Err(Error::config("data.rho must lie in [0.5, 1]"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::invalid("run.seeds must not be empty"));
        }
        if self.run.methods.is_empty() {
            return Err(Error::invalid("run.methods must not be empty"));
        }
        for m in &self.run.methods {
            agm_core::eval::Method::parse(m)?;
        }
        if self.run.jobs == 0 {
            return Err(Error::invalid("run.jobs must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::missing(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&raw)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("serializing config: {e}")))?;
        std::fs::write(path, raw)?;
        Ok(())
    }

    /// Apply a dotted-path override like `train.lr=1e-3` or
    /// `run.methods=["erm"]`. Values parse as TOML.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment.split_once('=').ok_or_else(|| {
            Error::invalid(format!("override {assignment:?} is not key=value"))
        })?;
        let mut doc = toml::Value::try_from(&*self)
            .map_err(|e| Error::config(format!("config to value: {e}")))?;
        let parsed: toml::Value = value
            .trim()
            .parse()
            .or_else(|_| format!("\"{}\"", value.trim()).parse())
            .map_err(|e| Error::invalid(format!("override value {value:?}: {e}")))?;
        let mut cursor = &mut doc;
        let segments: Vec<&str> = path.trim().split('.').collect();
        for (i, seg) in segments.iter().enumerate() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::invalid(format!("{path}: not a table at {seg}")))?;
            if i + 1 == segments.len() {
                if !table.contains_key(*seg) {
                    return Err(Error::invalid(format!("unknown config key {path:?}")));
                }
                table.insert((*seg).to_string(), parsed);
                break;
            }
            cursor = table
                .get_mut(*seg)
                .ok_or_else(|| Error::invalid(format!("unknown config key {path:?}")))?;
        }
        *self = doc
            .try_into()
            .map_err(|e| Error::config(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }
}

/// Resolve a path against the workspace root when relative.
pub fn workspace_path(raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.is_absolute() {
        return p;
    }
    match std::env::var(WORKSPACE_ENV) {
        Ok(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => p,
    }
}
