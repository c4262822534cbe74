//! One JSON document configures every stage. Missing sections and fields
//! take their defaults; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::synth::SynthConfig;
use crate::features2d::SiftParams;
use crate::features3d::Features3dConfig;
use crate::matcher::{ForestParams, MatchOptions, HOLDOUT_FRACTION};
use crate::mining::MiningConfig;
use crate::pointcloud::SorParams;
use crate::pose::MlesacConfig;

/// Input locations for a pipeline run. A raw cloud or image directory runs
/// the extraction stages; descriptor files skip them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// PLY point cloud.
    pub cloud: Option<PathBuf>,
    /// Precomputed 3D descriptors (DSC1).
    pub cloud_desc: Option<PathBuf>,
    /// Track store JSON.
    pub tracks: Option<PathBuf>,
    /// Directory of `<image id>.<image_ext>` files.
    pub images: Option<PathBuf>,
    pub image_ext: String,
    /// Directory of `<image id>.dsc` files.
    pub desc2d: Option<PathBuf>,
    /// JSON map from query id to pose. Defaults to the query poses in the
    /// track store.
    pub ground_truth: Option<PathBuf>,
}

impl Default for Inputs {
    fn default() -> Self {
        Inputs {
            cloud: None,
            cloud_desc: None,
            tracks: None,
            images: None,
            image_ext: "pgm".into(),
            desc2d: None,
            ground_truth: None,
        }
    }
}

impl Inputs {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.cloud,
            &mut self.cloud_desc,
            &mut self.tracks,
            &mut self.images,
            &mut self.desc2d,
            &mut self.ground_truth,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Candidate forests scored on the held-out split.
    pub grid: Vec<ForestParams>,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            grid: vec![
                ForestParams::default(),
                ForestParams {
                    features_per_split: Some(40),
                    ..Default::default()
                },
            ],
            holdout_fraction: HOLDOUT_FRACTION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub inputs: Inputs,
    pub filter: SorParams,
    pub extract3d: Features3dConfig,
    pub extract2d: SiftParams,
    pub mining: MiningConfig,
    pub train: TrainConfig,
    #[serde(rename = "match")]
    pub matching: MatchOptions,
    pub localize: MlesacConfig,
    pub synth: SynthConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file. Relative input paths are taken relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.inputs.rebase(base);
        Ok(config)
    }
}
