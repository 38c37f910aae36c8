//! Central finite-difference certification of the analytic backward pass.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backward::{backward_full, evaluate_view, ObjectiveConfig, ViewInputs};
use crate::camera::Camera;
use crate::error::Result;
use crate::gaussian::{quat_normalize, GaussianCloud, ParamGroup, Primitive, SEMANTIC_DIM};
use crate::image::{Image, Plane};
use crate::la::IDENTITY3;
use crate::losses::{DepthPrior, FrameKind, LossWeights};
use crate::medium::MediumParams;
use crate::raster::{self, RasterOptions};
use crate::schedule::{stage_schedule, StageConfig};
use crate::semantics::{self, BBox, EmbeddingProjector, SemanticRegion};
use crate::sh;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// A self-contained single-view problem small enough for per-scalar
/// finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckScene {
    pub cloud: GaussianCloud,
    pub medium: MediumParams,
    pub camera: Camera,
    pub target: Image,
    pub depth_prior: Option<DepthPrior>,
    pub regions: Vec<SemanticRegion>,
    pub frame_kind: FrameKind,
    pub gamma: f64,
    pub config: ObjectiveConfig,
}

impl GradCheckScene {
    /// Twelve anisotropic Gaussians seen by an 8x8 camera, with a non-trivial
    /// medium, a depth prior, two semantic regions and both ℓ1 and ℓ2 active.
    /// The window-based SSIM term needs at least 11x11 pixels, so its weight
    /// is zero here; [`GradCheckScene::with_ssim`] covers it.
    pub fn standard() -> Self {
        Self::build(8, 12, 0.0)
    }

    /// A 16x16 variant of [`GradCheckScene::standard`] with the SSIM term on.
    pub fn with_ssim() -> Self {
        Self::build(16, 12, 0.2)
    }

    /// [`GradCheckScene::standard`] with every region member's feature set
    /// to its target, so the semantic loss sits at its minimum.
    pub fn standard_aligned() -> Self {
        let mut scene = Self::standard();
        for region in &scene.regions {
            for i in semantics::region_membership(&scene.cloud, &scene.camera, region) {
                scene.cloud.semantic_features[i] = region.f_ref;
            }
        }
        scene
    }

    fn build(size: usize, count: usize, lambda_ssim: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0012);
        let focal = size as f64;
        let c = (size as f64 - 1.0) / 2.0;
        let camera = Camera::new(focal, focal, c, c, size, size, IDENTITY3, [0.0; 3]).expect("valid camera");

        let mut cloud = GaussianCloud::new(2).expect("valid degree");
        let basis = cloud.sh_basis_count();
        for k in 0..count {
            let z = 3.0 + 2.0 * (k as f64 + rng.random::<f64>()) / count as f64;
            let spread = 0.45 * z;
            let position = [rng.random_range(-spread..spread), rng.random_range(-spread..spread), z];
            let log_scale = std::array::from_fn(|_| rng.random_range(0.8f64..1.5).ln() + (z / 4.0).ln());
            let rotation = quat_normalize(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let mut coeffs = vec![0.0; basis * 3];
            for ch in 0..3 {
                coeffs[ch] = sh::dc_from_color(rng.random_range(0.35..0.65));
            }
            for v in coeffs.iter_mut().skip(3) {
                *v = rng.random_range(-0.06..0.06);
            }
            let semantic = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            cloud
                .push(Primitive {
                    position,
                    log_scale,
                    rotation,
                    sh: coeffs,
                    opacity_logit: rng.random_range(-0.6..0.8),
                    semantic,
                })
                .expect("consistent primitive");
        }

        let medium =
            MediumParams::from_physical([0.15, 0.2, 0.25], [0.1, 0.12, 0.14], [0.1, 0.3, 0.4]).expect("valid medium");
        let target = Image::from_fn(size, size, |_, _, _| rng.random_range(0.05..0.95));

        let options = RasterOptions::exact();
        let render = raster::rasterize_with(&cloud, &camera, &options);
        let prior_depth = Plane::from_fn(size, size, |x, y| {
            render.depth.get(x, y) + 0.3 * ((x as f64) * 0.9 + (y as f64) * 0.4).sin() + 0.05
        });
        let mask = (0..size * size).map(|i| i % 5 != 2).collect();
        let depth_prior = Some(DepthPrior::new(prior_depth, mask).expect("matching mask"));

        let projector = EmbeddingProjector::new(11);
        let half = size as f64 / 2.0;
        let edge = size as f64 - 1.0;
        let regions = vec![
            SemanticRegion::new(
                "view",
                BBox::new(0.0, 0.0, half - 0.5, edge).expect("box"),
                semantics::pseudo_embedding(3, 0, projector.raw_dim()),
                &projector,
            )
            .expect("region"),
            SemanticRegion::new(
                "view",
                BBox::new(half - 0.5, 0.0, edge, edge).expect("box"),
                semantics::pseudo_embedding(3, 1, projector.raw_dim()),
                &projector,
            )
            .expect("region"),
        ];

        let stages = StageConfig {
            stage1_l2_weight: 0.5,
            ..StageConfig::default()
        };
        let config = ObjectiveConfig {
            weights: LossWeights {
                lambda_ssim,
                ..LossWeights::default()
            },
            stages,
            raster: options,
            ..ObjectiveConfig::default()
        };
        Self {
            cloud,
            medium,
            camera,
            target,
            depth_prior,
            regions,
            frame_kind: FrameKind::Keyframe,
            gamma: 1.0,
            config,
        }
    }

    fn objective(&self, cloud: &GaussianCloud, medium: &MediumParams) -> Result<f64> {
        let refs: Vec<&SemanticRegion> = self.regions.iter().collect();
        let view = self.view(&refs);
        let plan = stage_schedule(0, &self.config.stages);
        Ok(evaluate_view(cloud, medium, &view, &self.config, &plan, self.gamma)?.l_objective)
    }

    fn view<'a>(&'a self, regions: &'a [&'a SemanticRegion]) -> ViewInputs<'a> {
        ViewInputs {
            camera: &self.camera,
            target: &self.target,
            depth_prior: self.depth_prior.as_ref(),
            regions,
            frame_kind: self.frame_kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub group: ParamGroup,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry within the group.
    pub worst_index: Option<usize>,
    /// Primitive owning the worst entry (`None` for the medium).
    pub worst_primitive: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn group_values<'a>(cloud: &'a mut GaussianCloud, medium: &'a mut [f64; 9], group: ParamGroup) -> &'a mut [f64] {
    match group {
        ParamGroup::Position => cloud.positions.as_flattened_mut(),
        ParamGroup::Scale => cloud.log_scales.as_flattened_mut(),
        ParamGroup::Rotation => cloud.rotations.as_flattened_mut(),
        ParamGroup::Sh => &mut cloud.sh_coeffs,
        ParamGroup::Opacity => &mut cloud.opacity_logits,
        ParamGroup::Semantic => cloud.semantic_features.as_flattened_mut(),
        ParamGroup::Medium => medium,
    }
}

/// Compares the analytic gradient of one group against central differences
/// with step `epsilon`. `group` is a parameter-group name such as `"sh"`.
pub fn grad_check(scene: &GradCheckScene, group: &str, epsilon: f64) -> Result<GradCheckReport> {
    let group = ParamGroup::from_str(group)?;
    let refs: Vec<&SemanticRegion> = scene.regions.iter().collect();
    let plan = stage_schedule(0, &scene.config.stages);
    let analytic = backward_full(
        &scene.cloud,
        &scene.medium,
        &scene.view(&refs),
        &scene.config,
        &plan,
        scene.gamma,
    )?
    .grads;
    let analytic = analytic.group(group).to_vec();
    let stride = match group {
        ParamGroup::Medium => 0,
        ParamGroup::Sh => scene.cloud.sh_stride(),
        ParamGroup::Position | ParamGroup::Scale => 3,
        ParamGroup::Rotation => 4,
        ParamGroup::Opacity => 1,
        ParamGroup::Semantic => SEMANTIC_DIM,
    };

    let mut report = GradCheckReport {
        group,
        checked: analytic.len(),
        max_rel_error: 0.0,
        worst_index: None,
        worst_primitive: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (k, &a) in analytic.iter().enumerate() {
        let eval = |delta: f64| -> Result<f64> {
            let mut cloud = scene.cloud.clone();
            let mut medium = scene.medium.to_array();
            group_values(&mut cloud, &mut medium, group)[k] += delta;
            scene.objective(&cloud, &MediumParams::from_array(medium))
        };
        let numeric = (eval(epsilon)? - eval(-epsilon)?) / (2.0 * epsilon);
        let err = relative_error(a, numeric);
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(k);
            report.worst_primitive = (stride > 0).then(|| k / stride);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_group_is_an_error() {
        assert!(grad_check(&GradCheckScene::standard(), "colour", DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn aligned_semantics_are_exact() {
        let scene = GradCheckScene::standard_aligned();
        let report = grad_check(&scene, "semantic", DEFAULT_EPSILON).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn standard_scene_covers_the_image() {
        let scene = GradCheckScene::standard();
        let render = raster::rasterize_with(&scene.cloud, &scene.camera, &scene.config.raster);
        assert!(render.alpha_accum.as_slice().iter().all(|&a| a > 0.2));
        for r in &scene.regions {
            assert!(!semantics::region_membership(&scene.cloud, &scene.camera, r).is_empty());
        }
    }

    #[test]
    fn every_group_passes() {
        for scene in [GradCheckScene::standard(), GradCheckScene::with_ssim()] {
            for group in ParamGroup::ALL {
                let r = grad_check(&scene, group.name(), DEFAULT_EPSILON).unwrap();
                assert!(r.passed(DEFAULT_TOLERANCE), "{r:?}");
            }
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 0.1);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
