//! Run configuration documents.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bgrl::BgrlConfig;
use crate::cograph::Normalization;
use crate::error::{Error, Result};
use crate::evalkit::{Pairing, REPEATS};
use crate::knnrec::KnnConfig;
use crate::nextitem::NextItemConfig;
use crate::sessiondata::{
    DelimitedFormat, FeatureSchema, FeatureSpec, DEFAULT_GAP_SECONDS, MAX_PREFIX_LEN, MIN_ITEM_SUPPORT,
    MIN_SESSION_LEN, SPLIT_FRACTIONS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    #[default]
    Csv,
    Tsv,
}

impl LogFormat {
    pub fn delimited(self) -> DelimitedFormat {
        match self {
            LogFormat::Csv => DelimitedFormat::CSV,
            LogFormat::Tsv => DelimitedFormat::TSV,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Interaction log; relative paths resolve against the config file.
    pub interactions: PathBuf,
    pub format: LogFormat,
    pub schema: Vec<FeatureSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Inactivity gap that splits a session; `None` trusts the session ids.
    pub gap_seconds: Option<i64>,
    pub min_item_support: usize,
    pub min_session_len: usize,
    pub max_prefix_len: usize,
    pub split: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            gap_seconds: Some(DEFAULT_GAP_SECONDS),
            min_item_support: MIN_ITEM_SUPPORT,
            min_session_len: MIN_SESSION_LEN,
            max_prefix_len: MAX_PREFIX_LEN,
            split: SPLIT_FRACTIONS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableInit {
    #[default]
    Random,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NextConfig {
    pub init: TableInit,
    #[serde(flatten)]
    pub train: NextItemConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommender {
    #[default]
    Knn,
    Nextitem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repeats: usize,
    /// Run `r` uses seed `master_seed + r`.
    pub master_seed: u64,
    pub pairing: Pairing,
    pub recommender: Recommender,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: REPEATS,
            master_seed: 0,
            pairing: Pairing::Query,
            recommender: Recommender::Knn,
        }
    }
}

/// Parameter lattice: dotted config path to candidate values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub params: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub graph: GraphConfig,
    pub bgrl: BgrlConfig,
    pub knn: KnnConfig,
    pub nextitem: NextConfig,
    pub eval: EvalConfig,
    pub grid: GridConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving the data path against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.data.interactions.is_relative() && !cfg.data.interactions.as_os_str().is_empty() {
            if let Some(dir) = path.parent() {
                cfg.data.interactions = dir.join(&cfg.data.interactions);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::new(self.data.schema.clone())
    }

    /// Every violation, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.validate_run();
        for (path, values) in &self.grid.params {
            if values.is_empty() {
                errs.push(format!("grid.params.{path} has no values"));
            } else if let Err(e) = self.with_override(path, values[0].clone()) {
                errs.push(format!("grid.params.{path}: {e}"));
            }
        }
        errs
    }

    fn validate_run(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.schema() {
            errs.push(e.to_string());
        }
        let p = &self.preprocess;
        if matches!(p.gap_seconds, Some(g) if g <= 0) {
            errs.push("preprocess.gap_seconds must be positive".into());
        }
        if p.min_item_support == 0 {
            errs.push("preprocess.min_item_support must be positive".into());
        }
        if p.min_session_len < 2 {
            errs.push("preprocess.min_session_len must be at least 2".into());
        }
        if p.max_prefix_len == 0 {
            errs.push("preprocess.max_prefix_len must be positive".into());
        }
        if p.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (p.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            errs.push(format!("preprocess.split {:?} must be fractions summing to 1", p.split));
        }
        errs.extend(self.bgrl.validate());
        errs.extend(self.knn.validate());
        errs.extend(self.nextitem.train.validate());
        if self.eval.repeats == 0 {
            errs.push("eval.repeats must be positive".into());
        }
        errs
    }

    fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Copy with the value at a dotted path (`knn.k`, `bgrl.encoder.heads`)
    /// replaced. The result is validated.
    pub fn with_override(&self, path: &str, value: toml::Value) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        let keys: Vec<&str> = path.split('.').collect();
        let (last, parents) = keys.split_last().ok_or_else(|| Error::config("empty config path"))?;
        let mut slot = &mut doc;
        for key in parents {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(*key))
                .ok_or_else(|| Error::config(format!("unknown config path {path}")))?;
        }
        slot.as_table_mut()
            .ok_or_else(|| Error::config(format!("unknown config path {path}")))?
            .insert(last.to_string(), value);
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::config(format!("{path}: {e}")))?;
        let errs = cfg.validate_run();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// All lattice points, first parameter varying slowest.
    pub fn grid_points(&self) -> Result<Vec<(Vec<(String, toml::Value)>, RunConfig)>> {
        let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (path, values) in &self.grid.params {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((path.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
            .into_iter()
            .map(|assignment| {
                let mut cfg = self.clone();
                cfg.grid = GridConfig::default();
                for (path, v) in &assignment {
                    cfg = cfg.with_override(path, v.clone())?;
                }
                Ok((assignment, cfg))
            })
            .collect()
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.eval.master_seed.wrapping_add(run as u64)
    }
}
