//! Pipeline configuration: JSON file, with every field overridable by a
//! command-line flag. Precedence: flags > file > defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{AugmentSpec, ElasticSpec};
use crate::rng::content_hash;
use crate::synthdata::SceneSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    // paths
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
    // imaging
    pub tau: f64,
    pub patch_size: usize,
    pub target_size: usize,
    pub min_component_size: usize,
    pub angle_min: f64,
    pub angle_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub amplify: usize,
    pub elastic: bool,
    pub tile: usize,
    // network
    pub family: String,
    pub unet_depth: usize,
    pub unet_base: usize,
    pub blocks_per_stage: Vec<usize>,
    pub inception_blocks: usize,
    pub cls_base: usize,
    /// Ordinal into the network's legal freeze points (0 = train all).
    pub freeze_ordinal: usize,
    // training
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub k_folds: usize,
    pub epsilon: f64,
    pub seed: u64,
    // synthetic data
    pub scene_height: usize,
    pub scene_width: usize,
    pub n_cells: usize,
    pub n_scenes: usize,
    pub class_mix: [f64; 3],
    pub radius_min: f64,
    pub radius_max: f64,
    pub noise_std: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_dir: PathBuf::from("data"),
            model_dir: PathBuf::from("models"),
            report_dir: PathBuf::from("reports"),
            tau: 0.7,
            patch_size: 101,
            target_size: 299,
            min_component_size: 9,
            angle_min: -30.0,
            angle_max: 30.0,
            scale_min: 0.9,
            scale_max: 1.1,
            amplify: 2,
            elastic: false,
            tile: 64,
            family: "residual".into(),
            unet_depth: 3,
            unet_base: 8,
            blocks_per_stage: vec![1, 1],
            inception_blocks: 2,
            cls_base: 8,
            freeze_ordinal: 0,
            epochs: 10,
            iters_per_epoch: 1000,
            batch: 16,
            lr: 0.01,
            momentum: 0.9,
            k_folds: 10,
            epsilon: 0.5,
            seed: 0,
            scene_height: 128,
            scene_width: 128,
            n_cells: 8,
            n_scenes: 16,
            class_mix: [0.45, 0.45, 0.10],
            radius_min: 4.0,
            radius_max: 8.0,
            noise_std: 0.03,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0,1]", self.tau)));
        }
        if self.patch_size % 2 == 0 {
            return Err(Error::Config(format!("patch_size {} must be odd", self.patch_size)));
        }
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be >= 1".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::Config(format!("lr {} must be nonnegative", self.lr)));
        }
        match self.family.as_str() {
            "residual" | "inception" => {}
            other => {
                return Err(Error::Config(format!(
                    "family {other:?} is not one of \"residual\", \"inception\""
                )))
            }
        }
        self.augment_spec().validate()?;
        self.scene_spec().validate()?;
        Ok(())
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec {
            angle_range: (self.angle_min, self.angle_max),
            scale_range: (self.scale_min, self.scale_max),
            factor: self.amplify,
        }
    }

    pub fn elastic_spec(&self) -> Option<ElasticSpec> {
        self.elastic.then(ElasticSpec::default)
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.scene_height,
            width: self.scene_width,
            n_cells: self.n_cells,
            class_mix: self.class_mix,
            radius_range: (self.radius_min, self.radius_max),
            noise_std: self.noise_std,
            seed: self.seed,
            ..Default::default()
        }
    }

    /// Stable hash of the effective configuration, stamped into reports.
    pub fn hash(&self) -> String {
        content_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}
