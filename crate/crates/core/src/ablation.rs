//! The ablation grid: semantic guidance and stage-wise optimization switched
//! on and off independently, trained from the same seed on the same scene.

use std::path::PathBuf;

use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::reduce;
use crate::scene::{load_scene, write_json, Scene};
use crate::semantics::{region_membership, EmbeddingProjector};
use crate::train::{EvalReport, MediumSummary, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub name: &'static str,
    pub semantic: bool,
    pub stages: bool,
}

pub const GRID: [Variant; 4] = [
    Variant {
        name: "M1",
        semantic: false,
        stages: false,
    },
    Variant {
        name: "M2",
        semantic: false,
        stages: true,
    },
    Variant {
        name: "M3",
        semantic: true,
        stages: false,
    },
    Variant {
        name: "full",
        semantic: true,
        stages: true,
    },
];

impl Variant {
    /// `base` with the disabled components removed. A run without stages
    /// keeps the stage-1 objective throughout and freezes nothing.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if !self.semantic {
            c.objective.weights.lambda_s = 0.0;
        }
        if !self.stages {
            c.objective.stages.boundary_fraction = 1.0;
        }
        c.sync();
        c
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub eval: EvalReport,
    /// Mean `‖f - f_ref‖` over region members of the final cloud.
    pub feature_error: Option<f64>,
    pub gaussians: usize,
    pub medium: MediumSummary,
}

/// Mean distance between member features and their region targets, over every
/// (region, member) pair. `None` when no region has members.
pub fn feature_error(cloud: &GaussianCloud, scene: &Scene) -> Option<f64> {
    let mut errors = Vec::new();
    for region in &scene.regions {
        let Some(view) = scene.ids.iter().position(|id| *id == region.image_id) else {
            continue;
        };
        for i in region_membership(cloud, &scene.cameras[view], region) {
            let d2: Vec<f64> = cloud.semantic_features[i]
                .iter()
                .zip(&region.f_ref)
                .map(|(a, b)| (a - b) * (a - b))
                .collect();
            errors.push(reduce::pairwise_sum(&d2).sqrt());
        }
    }
    (!errors.is_empty()).then(|| reduce::mean(&errors))
}

pub fn run_variant(base: &TrainConfig, scene: &Scene, variant: Variant) -> Result<AblationRow> {
    let mut trainer = Trainer::new(variant.apply(base), scene.clone())?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    Ok(AblationRow {
        variant,
        eval: trainer.evaluate()?,
        feature_error: feature_error(trainer.cloud(), scene),
        gaussians: trainer.cloud().len(),
        medium: trainer.medium().into(),
    })
}

/// Runs the whole grid, reporting each row to `progress` as it finishes.
pub fn run_grid(base: &TrainConfig, scene: &Scene, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    GRID.iter()
        .map(|&v| {
            let row = run_variant(base, scene, v)?;
            progress(&row);
            Ok(row)
        })
        .collect()
}

pub const ABLATION_FILE: &str = "ablation.json";

/// Loads the configured scene, runs the grid and writes the table to the
/// output directory. Returns the rows and the path written.
pub fn ablate_command(config: &TrainConfig, progress: impl FnMut(&AblationRow)) -> Result<(Vec<AblationRow>, PathBuf)> {
    config.validate()?;
    let scene = load_scene(&config.scene, &EmbeddingProjector::new(config.projector_seed))?;
    let rows = run_grid(config, &scene, progress)?;
    std::fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let path = config.output.join(ABLATION_FILE);
    write_json(&path, &rows)?;
    Ok((rows, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_toggles_components() {
        let mut base = TrainConfig {
            scene: "s".into(),
            iterations: 100,
            ..TrainConfig::default()
        };
        base.sync();
        let m1 = GRID[0].apply(&base);
        assert_eq!(m1.objective.weights.lambda_s, 0.0);
        assert_eq!(m1.objective.stages.boundary(), 100);
        let full = GRID[3].apply(&base);
        assert_eq!(full.objective.weights.lambda_s, base.objective.weights.lambda_s);
        assert_eq!(full.objective.stages.boundary(), 60);
        let names: Vec<_> = GRID.iter().map(|v| v.name).collect();
        assert_eq!(names, ["M1", "M2", "M3", "full"]);
    }
}
