//! Two-stage training schedule. Stage 1 optimizes everything with an
//! ℓ1-weighted reconstruction objective; stage 2 freezes geometry and
//! semantics and shifts photometric weight from ℓ1 to ℓ2.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::ParamGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// Run length. Not read from files: the training config owns it.
    #[serde(skip)]
    pub total_iterations: usize,
    /// Fraction of iterations spent in stage 1, in `(0, 1]`.
    pub boundary_fraction: f64,
    pub freeze_groups: BTreeSet<ParamGroup>,
    pub stage1_l1_weight: f64,
    pub stage2_l1_weight: f64,
    pub stage1_l2_weight: f64,
    pub stage2_l2_weight: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            total_iterations: 20_000,
            boundary_fraction: 0.6,
            freeze_groups: [
                ParamGroup::Position,
                ParamGroup::Rotation,
                ParamGroup::Scale,
                ParamGroup::Semantic,
            ]
            .into_iter()
            .collect(),
            stage1_l1_weight: 0.8,
            stage2_l1_weight: 0.4,
            stage1_l2_weight: 0.0,
            stage2_l2_weight: 0.5,
        }
    }
}

impl StageConfig {
    /// Same weights in both stages and no freezing: a single-stage run.
    pub fn single_stage(total_iterations: usize) -> Self {
        Self {
            total_iterations,
            boundary_fraction: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.boundary_fraction > 0.0 && self.boundary_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "stage boundary fraction {} outside (0, 1]",
                self.boundary_fraction
            )));
        }
        if let Some(g) = self.freeze_groups.iter().find(|g| !g.is_freezable()) {
            return Err(Error::InvalidParameter(format!("group `{g}` cannot be frozen")));
        }
        let weights = [
            self.stage1_l1_weight,
            self.stage2_l1_weight,
            self.stage1_l2_weight,
            self.stage2_l2_weight,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter(
                "stage loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// First stage-2 iteration, `floor(fraction × total)`.
    pub fn boundary(&self) -> usize {
        (self.boundary_fraction * self.total_iterations as f64).floor() as usize
    }

    pub fn weights(&self, stage: Stage) -> StageWeights {
        match stage {
            Stage::One => StageWeights {
                l1: self.stage1_l1_weight,
                l2: self.stage1_l2_weight,
            },
            Stage::Two => StageWeights {
                l1: self.stage2_l1_weight,
                l2: self.stage2_l2_weight,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageWeights {
    pub l1: f64,
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub freeze: BTreeSet<ParamGroup>,
    pub l1_weight: f64,
    pub l2_weight: f64,
}

impl StagePlan {
    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.freeze.contains(&group)
    }

    pub fn densification_allowed(&self) -> bool {
        self.stage == Stage::One
    }
}

pub fn stage_schedule(iteration: usize, config: &StageConfig) -> StagePlan {
    let stage = if iteration < config.boundary() {
        Stage::One
    } else {
        Stage::Two
    };
    let w = config.weights(stage);
    StagePlan {
        stage,
        freeze: match stage {
            Stage::One => BTreeSet::new(),
            Stage::Two => config.freeze_groups.clone(),
        },
        l1_weight: w.l1,
        l2_weight: w.l2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_boundary_is_twelve_thousand() {
        let cfg = StageConfig::default();
        assert_eq!(cfg.boundary(), 12_000);
        let before = stage_schedule(11_999, &cfg);
        assert_eq!(before.stage, Stage::One);
        assert!(before.freeze.is_empty());
        assert_eq!((before.l1_weight, before.l2_weight), (0.8, 0.0));

        let after = stage_schedule(12_000, &cfg);
        assert_eq!(after.stage, Stage::Two);
        let expected: BTreeSet<_> = [
            ParamGroup::Position,
            ParamGroup::Rotation,
            ParamGroup::Scale,
            ParamGroup::Semantic,
        ]
        .into_iter()
        .collect();
        assert_eq!(after.freeze, expected);
        assert_eq!((after.l1_weight, after.l2_weight), (0.4, 0.5));
        assert!(!after.densification_allowed());
    }

    #[test]
    fn full_fraction_never_leaves_stage_one() {
        let cfg = StageConfig::single_stage(500);
        assert!((0..500).all(|i| stage_schedule(i, &cfg).stage == Stage::One));
    }

    #[test]
    fn validation() {
        let cfg = StageConfig {
            boundary_fraction: 0.0,
            ..StageConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = StageConfig::default();
        cfg.freeze_groups.insert(ParamGroup::Opacity);
        assert!(cfg.validate().is_err());
        assert!(StageConfig::default().validate().is_ok());
    }

    #[test]
    fn small_run_boundary() {
        let cfg = StageConfig {
            total_iterations: 200,
            ..StageConfig::default()
        };
        assert_eq!(cfg.boundary(), 120);
    }
}
