//! Experiment configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use bea_core::detector::{ModelConfig, OodMode, SceneSpec, TrainConfig};
use bea_core::metrics::default_fractions;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub conf_floor: f64,
    pub nms_thresh: f64,
    pub retention_fractions: Vec<f64>,
    /// OOD images per in-distribution test image, for each OOD split.
    pub ood_ratio: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            conf_floor: 0.05,
            nms_thresh: 0.5,
            retention_fractions: default_fractions(),
            ood_ratio: 0.5,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub config_id: String,
    pub output_dir: PathBuf,
    /// Seeds used by `ablate`; `run` takes its seed from the command line.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            config_id: "bea".into(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            scene: SceneSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Which split a generated dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    NearOod,
    FarOod,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::NearOod => "near_ood",
            Split::FarOod => "far_ood",
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable in TOML")
    }

    pub fn validate(&self, origin: &Path) -> Result<()> {
        let bad = |message: String| HarnessError::Config {
            path: origin.to_path_buf(),
            message,
        };
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        if self.model.image_size != self.scene.image_size {
            return Err(bad(format!(
                "model expects {} px images, scene produces {}",
                self.model.image_size, self.scene.image_size
            )));
        }
        if self.model.grid.k != self.scene.shape_classes.len() {
            return Err(bad(format!(
                "model has {} classes, scene has {}",
                self.model.grid.k,
                self.scene.shape_classes.len()
            )));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(bad("n_train and n_test must be positive".into()));
        }
        if self.config_id.is_empty() || self.config_id.contains(['/', '\\']) {
            return Err(bad(format!(
                "config_id {:?} is not a valid directory name",
                self.config_id
            )));
        }
        let f = &self.eval.retention_fractions;
        if f.is_empty()
            || f.windows(2).any(|w| w[0] >= w[1])
            || f[0] <= 0.0
            || f[f.len() - 1] != 1.0
        {
            return Err(bad(
                "retention fractions must ascend within (0, 1] and end at 1".into(),
            ));
        }
        Ok(())
    }

    /// Run directory for one seed.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir
            .join(&self.config_id)
            .join(format!("seed-{seed}"))
    }

    pub fn n_ood(&self) -> usize {
        (self.data.n_test as f64 * self.eval.ood_ratio).round() as usize
    }

    /// Data-generation seed for a split; each split gets an unrelated stream.
    pub fn split_seed(seed: u64, split: Split) -> u64 {
        let tag: u64 = match split {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Test => 0x7465_7374_0000_0000,
            Split::NearOod => 0x6e65_6172_0000_0000,
            Split::FarOod => 0x6661_7200_0000_0000,
        };
        seed ^ tag
    }

    pub fn scene_for(&self, split: Split) -> SceneSpec {
        match split {
            Split::Train | Split::Test => self.scene.with_ood(OodMode::None),
            Split::NearOod => self.scene.with_ood(OodMode::Near),
            Split::FarOod => self.scene.with_ood(OodMode::Far),
        }
    }

    /// Copy with the tandem switches set, under a derived config id.
    pub fn with_switches(&self, ta: bool, tq: bool) -> Self {
        let mut c = self.clone();
        c.train.weights.enable_ta = ta;
        c.train.weights.enable_tq = tq;
        c.config_id = format!("{}_ta{}_tq{}", self.config_id, ta as u8, tq as u8);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml_str(&text, Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let text = "config_id = \"small\"\n[data]\nn_train = 10\n[train]\nepochs = 2\n[train.weights]\nenable_tq = false\n";
        let cfg = ExperimentConfig::from_toml_str(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.data.n_train, 10);
        assert_eq!(cfg.data.n_test, 400);
        assert_eq!(cfg.train.epochs, 2);
        assert!(!cfg.train.weights.enable_tq && cfg.train.weights.enable_ta);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let bad = "[scene]\nimage_size = 32\n";
        assert!(ExperimentConfig::from_toml_str(bad, Path::new("x.toml")).is_err());
        let bad = "[eval]\nretention_fractions = [0.5, 0.9]\n";
        assert!(ExperimentConfig::from_toml_str(bad, Path::new("x.toml")).is_err());
        assert!(ExperimentConfig::from_toml_str("nope = [", Path::new("x.toml")).is_err());
    }

    #[test]
    fn derived_ids_and_paths() {
        let cfg = ExperimentConfig::default().with_switches(true, false);
        assert_eq!(cfg.config_id, "bea_ta1_tq0");
        assert_eq!(cfg.run_dir(3), PathBuf::from("runs/bea_ta1_tq0/seed-3"));
        assert_eq!(cfg.n_ood(), 200);
        let seeds: Vec<u64> = [Split::Train, Split::Test, Split::NearOod, Split::FarOod]
            .iter()
            .map(|&s| ExperimentConfig::split_seed(5, s))
            .collect();
        let mut uniq = seeds.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 4);
    }
}
