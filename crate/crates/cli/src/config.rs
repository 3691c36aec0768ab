//! Run configuration: a JSON file merged with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use textstyle::pipeline::{ArtifactPaths, Settings, DEFAULT_MAX_SIDE};
use textstyle::text::DEFAULT_MIN_COUNT;
use textstyle::{Error, Result, StyleConfig, TrainConfig};

pub const DATA_DIR_ENV: &str = "TEXTSTYLE_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data";

/// Everything a command can be configured with. Missing keys take their
/// defaults; the top-level `seed` also seeds training and synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub max_side: usize,
    pub min_count: usize,
    pub data_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub heads: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub train: TrainConfig,
    pub style: StyleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_side: DEFAULT_MAX_SIDE,
            min_count: DEFAULT_MIN_COUNT,
            data_dir: None,
            manifest: None,
            weights: None,
            vocab: None,
            heads: None,
            index: None,
            train: TrainConfig::default(),
            style: StyleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// `data_dir` from the config, else `$TEXTSTYLE_DATA_DIR`, else `./data`.
    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }

    pub fn manifest(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.data_dir().join("manifest.jsonl"))
    }

    pub fn artifacts(&self) -> ArtifactPaths {
        let defaults = ArtifactPaths::in_dir(self.data_dir());
        ArtifactPaths {
            vocab: self.vocab.clone().unwrap_or(defaults.vocab),
            heads: self.heads.clone().unwrap_or(defaults.heads),
            index: self.index.clone().unwrap_or(defaults.index),
        }
    }

    pub fn settings(&self) -> Settings {
        Settings {
            seed: self.seed,
            max_side: self.max_side,
            min_count: self.min_count,
            weights: self.weights.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn style_config(&self) -> StyleConfig {
        StyleConfig {
            seed: self.seed,
            ..self.style.clone()
        }
    }
}

/// Overwrites `target` when the flag was given.
pub fn set<T>(target: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *target = v;
    }
}
