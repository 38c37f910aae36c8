//! Training configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backward::ObjectiveConfig;
use crate::densify::DensifyConfig;
use crate::error::{Error, Result};
use crate::medium::MediumParams;
use crate::optim::LearningRates;
use crate::scene::{read_json, resolve};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Random points drawn inside the scene extent when the scene has none.
    pub random_points: usize,
    pub opacity: f64,
    /// Initial scales are the mean distance to this many nearest neighbours.
    pub neighbours: usize,
    /// Lower bound on initial scales, relative to the scene extent.
    pub min_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            random_points: 1000,
            opacity: 0.1,
            neighbours: 3,
            min_scale: 1e-3,
        }
    }
}

/// Physical starting values for the medium. When absent, the run starts from
/// a weak medium whose background is the mean training color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumInit {
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b_inf: [f64; 3],
}

impl MediumInit {
    pub fn params(&self) -> Result<MediumParams> {
        MediumParams::from_physical(self.beta_d, self.beta_b, self.b_inf)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Scene directory holding a manifest.
    pub scene: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub iterations: usize,
    pub sh_degree: usize,
    pub projector_seed: u64,
    pub objective: ObjectiveConfig,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub init: InitConfig,
    pub medium_init: Option<MediumInit>,
    /// Log a line every this many iterations; 0 logs only the final state.
    pub log_interval: usize,
    /// Held-out evaluation period; 0 evaluates only at the end.
    pub eval_interval: usize,
    /// Preview period; 0 writes previews only at the end.
    pub preview_interval: usize,
    /// Completed-iteration counts after which a checkpoint is written.
    pub checkpoint_iterations: Vec<usize>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scene: PathBuf::new(),
            output: PathBuf::from("output"),
            seed: 0,
            iterations: 20_000,
            sh_degree: 2,
            projector_seed: 7,
            objective: ObjectiveConfig::default(),
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            init: InitConfig::default(),
            medium_init: None,
            log_interval: 100,
            eval_interval: 1000,
            preview_interval: 0,
            checkpoint_iterations: Vec::new(),
            resume: None,
        }
    }
}

impl TrainConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: TrainConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.scene = resolve(base, &config.scene);
        config.output = resolve(base, &config.output);
        config.resume = config.resume.map(|r| resolve(base, &r));
        config.sync();
        config.validate().map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(config)
    }

    /// Copies the run length into the stage schedule.
    pub fn sync(&mut self) {
        self.objective.stages.total_iterations = self.iterations;
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene.as_os_str().is_empty() {
            return Err(Error::InvalidParameter("`scene` is required".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("`iterations` must be positive".into()));
        }
        if self.objective.stages.total_iterations != self.iterations {
            return Err(Error::InvalidParameter(
                "stage schedule length differs from `iterations`".into(),
            ));
        }
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return Err(Error::InvalidParameter(format!(
                "sh_degree {} exceeds {}",
                self.sh_degree,
                crate::sh::MAX_DEGREE
            )));
        }
        if !(self.init.min_scale > 0.0) {
            return Err(Error::InvalidParameter("init min_scale must be positive".into()));
        }
        if !(self.init.opacity > 0.0 && self.init.opacity < 1.0) || self.init.neighbours == 0 {
            return Err(Error::InvalidParameter(
                "init opacity must be in (0, 1) and neighbours positive".into(),
            ));
        }
        if let Some(m) = &self.medium_init {
            m.params()?;
        }
        self.objective.weights.validate()?;
        self.objective.stages.validate()?;
        self.lr.validate()?;
        self.densify.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut config: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("config snapshot: {e}")))?;
        config.sync();
        Ok(config)
    }
}
