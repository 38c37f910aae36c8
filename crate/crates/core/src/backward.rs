//! End-to-end loss evaluation for one view and its analytic gradient with
//! respect to every parameter group.
//!
//! The forward chain is: rasterize clean radiance and depth, apply the water
//! medium, compare against the captured image, add the depth, grey-world,
//! smoothness and semantic terms, and weight by frame kind. The backward pass
//! walks the same chain in reverse, replaying each pixel's blend order.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Feature, GaussianCloud, ParamGroup, SEMANTIC_DIM};
use crate::image::{Image, Plane};
use crate::la::Vec3;
use crate::losses::{self, DepthPrior, FrameKind, InterpMode, LossBreakdown, LossParts, LossWeights};
use crate::medium::{self, MediumParams};
use crate::raster::{self, RasterOptions, RenderOutput};
use crate::schedule::{StageConfig, StagePlan};
use crate::semantics::{self, Membership, Reduction, SemanticRegion};

/// Gradient carriers congruent with a [`GaussianCloud`] plus the medium.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub d_positions: Vec<Vec3>,
    pub d_log_scales: Vec<Vec3>,
    pub d_rotations: Vec<[f64; 4]>,
    pub d_sh: Vec<f64>,
    pub d_opacity_logits: Vec<f64>,
    pub d_semantic: Vec<Feature>,
    /// In [`MediumParams::to_array`] order.
    pub d_medium: [f64; 9],
    /// `d/d log γ` for learned interpolated-frame weighting.
    pub d_log_gamma: f64,
}

impl ParamGrads {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            d_positions: vec![[0.0; 3]; n],
            d_log_scales: vec![[0.0; 3]; n],
            d_rotations: vec![[0.0; 4]; n],
            d_sh: vec![0.0; cloud.sh_coeffs.len()],
            d_opacity_logits: vec![0.0; n],
            d_semantic: vec![[0.0; SEMANTIC_DIM]; n],
            d_medium: [0.0; 9],
            d_log_gamma: 0.0,
        }
    }

    /// Number of scalars per primitive (or in total, for the medium).
    pub fn stride(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Position | ParamGroup::Scale => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Sh => {
                if self.d_opacity_logits.is_empty() {
                    0
                } else {
                    self.d_sh.len() / self.d_opacity_logits.len()
                }
            }
            ParamGroup::Opacity => 1,
            ParamGroup::Semantic => SEMANTIC_DIM,
            ParamGroup::Medium => 9,
        }
    }

    /// Flat view of one group's gradient.
    pub fn group(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::Position => self.d_positions.as_flattened(),
            ParamGroup::Scale => self.d_log_scales.as_flattened(),
            ParamGroup::Rotation => self.d_rotations.as_flattened(),
            ParamGroup::Sh => &self.d_sh,
            ParamGroup::Opacity => &self.d_opacity_logits,
            ParamGroup::Semantic => self.d_semantic.as_flattened(),
            ParamGroup::Medium => &self.d_medium,
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::Position => self.d_positions.as_flattened_mut(),
            ParamGroup::Scale => self.d_log_scales.as_flattened_mut(),
            ParamGroup::Rotation => self.d_rotations.as_flattened_mut(),
            ParamGroup::Sh => &mut self.d_sh,
            ParamGroup::Opacity => &mut self.d_opacity_logits,
            ParamGroup::Semantic => self.d_semantic.as_flattened_mut(),
            ParamGroup::Medium => &mut self.d_medium,
        }
    }

    /// Adds `other` element-wise. Shapes must match.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for group in ParamGroup::ALL {
            for (a, b) in self.group_mut(group).iter_mut().zip(other.group(group)) {
                *a += b;
            }
        }
        self.d_log_gamma += other.d_log_gamma;
    }

    /// First non-finite entry, reported with its group and primitive index.
    pub fn check_finite(&self) -> Result<()> {
        for group in ParamGroup::ALL {
            let stride = self.stride(group).max(1);
            if let Some(k) = self.group(group).iter().position(|v| !v.is_finite()) {
                let index = if group == ParamGroup::Medium { k } else { k / stride };
                return Err(Error::NonFiniteGradient { group, index });
            }
        }
        Ok(())
    }

    pub fn zero_group(&mut self, group: ParamGroup) {
        self.group_mut(group).fill(0.0);
    }
}

/// Everything about one training view that the loss needs.
#[derive(Clone, Copy, Debug)]
pub struct ViewInputs<'a> {
    pub camera: &'a Camera,
    pub target: &'a Image,
    pub depth_prior: Option<&'a DepthPrior>,
    /// Regions attached to this view.
    pub regions: &'a [&'a SemanticRegion],
    pub frame_kind: FrameKind,
}

/// Settings that shape the objective but do not change during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub stages: StageConfig,
    pub semantic_reduction: Reduction,
    pub interp_mode: InterpMode,
    pub raster: RasterOptions,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            stages: StageConfig::default(),
            semantic_reduction: Reduction::Sum,
            interp_mode: InterpMode::Fixed,
            raster: RasterOptions::default(),
        }
    }
}

/// Screen-space gradient statistics for adaptive density control.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewStats {
    /// `(index, ‖dL/d mean2d‖)` with the gradient expressed in normalized
    /// device coordinates, for every Gaussian that survived culling.
    pub mean2d_grad_norms: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct ViewResult {
    pub breakdown: LossBreakdown,
    pub grads: ParamGrads,
    pub stats: ViewStats,
    pub render: RenderOutput,
    pub observed: Image,
}

struct Forward {
    frame: raster::Frame,
    observed: Image,
    memberships: Vec<Membership>,
    breakdown: LossBreakdown,
    frame_scale: f64,
    g_log_gamma: f64,
}

fn forward(
    cloud: &GaussianCloud,
    medium: &MediumParams,
    view: &ViewInputs<'_>,
    config: &ObjectiveConfig,
    plan: &StagePlan,
    gamma: f64,
) -> Result<Forward> {
    let camera = view.camera;
    if view.target.width() != camera.width || view.target.height() != camera.height {
        return Err(Error::ShapeMismatch(format!(
            "target is {}x{} but the camera renders {}x{}",
            view.target.width(),
            view.target.height(),
            camera.width,
            camera.height
        )));
    }
    let w = &config.weights;
    let frame = raster::render(cloud, camera, &config.raster);
    let clean = &frame.output.color;
    let depth = &frame.output.depth;
    let observed = medium::apply_medium(clean, depth, medium)?;

    let (l1, l2) = losses::photometric_terms(&observed, view.target)?;
    let ssim = if w.lambda_ssim != 0.0 {
        losses::ssim_index(&observed, view.target)?
    } else {
        1.0
    };
    let depth_term = match view.depth_prior {
        Some(prior) => losses::depth_loss(depth, &prior.depth, &prior.mask)?,
        None => 0.0,
    };
    let smooth = if w.lambda_smooth != 0.0 {
        losses::edge_smooth_loss(depth, view.target)?
    } else {
        0.0
    };
    let memberships: Vec<Membership> = view
        .regions
        .iter()
        .map(|r| Membership {
            members: semantics::region_membership(cloud, camera, r),
            target: r.f_ref,
        })
        .collect();
    let semantic = semantics::semantic_loss(&cloud.semantic_features, &memberships, config.semantic_reduction).value;
    let parts = LossParts {
        l1,
        l2,
        ssim,
        depth: depth_term,
        grey: losses::grey_world_loss(clean),
        smooth,
        semantic,
    };
    let composed = losses::compose_final(&parts, w, plan.stage, &config.stages);
    let (breakdown, frame_scale, g_log_gamma) =
        losses::weight_frame(composed, view.frame_kind, config.interp_mode, gamma, w)?;
    Ok(Forward {
        frame,
        observed,
        memberships,
        breakdown,
        frame_scale,
        g_log_gamma,
    })
}

/// Loss of one view without gradients.
pub fn evaluate_view(
    cloud: &GaussianCloud,
    medium: &MediumParams,
    view: &ViewInputs<'_>,
    config: &ObjectiveConfig,
    plan: &StagePlan,
    gamma: f64,
) -> Result<LossBreakdown> {
    Ok(forward(cloud, medium, view, config, plan, gamma)?.breakdown)
}

/// Loss of one view and the gradient of its weighted objective with respect
/// to every parameter group. Frozen groups come back identically zero.
pub fn backward_full(
    cloud: &GaussianCloud,
    medium: &MediumParams,
    view: &ViewInputs<'_>,
    config: &ObjectiveConfig,
    plan: &StagePlan,
    gamma: f64,
) -> Result<ViewResult> {
    let fw = forward(cloud, medium, view, config, plan, gamma)?;
    let w = &config.weights;
    let scale = fw.frame_scale;
    let camera = view.camera;
    let clean = &fw.frame.output.color;
    let depth = &fw.frame.output.depth;
    let (width, height) = (camera.width, camera.height);

    let (_, mut g_observed) =
        losses::photometric_grad(&fw.observed, view.target, plan.l1_weight, plan.l2_weight, w.lambda_ssim)?;
    for g in g_observed.as_mut_slice() {
        *g *= scale;
    }
    let mut g_clean = Image::zeros(width, height);
    let mut g_depth = Plane::zeros(width, height);
    let d_medium = medium::apply_medium_backward(clean, depth, medium, &g_observed, &mut g_clean, &mut g_depth);
    losses::grey_world_grad(clean, scale * w.lambda_g, &mut g_clean);
    if let Some(prior) = view.depth_prior {
        losses::depth_loss_grad(depth, &prior.depth, &prior.mask, scale * w.lambda_depth, &mut g_depth);
    }
    if w.lambda_smooth != 0.0 {
        losses::edge_smooth_grad(depth, view.target, scale * w.lambda_smooth, &mut g_depth);
    }

    let mut grads = ParamGrads::zeros(cloud);
    grads.d_medium = d_medium;
    grads.d_log_gamma = fw.g_log_gamma;

    let splat_grads = raster::composite_backward(&fw.frame, &g_clean, &g_depth);
    let geometry = raster::geometry_backward(cloud, camera, &fw.frame, &splat_grads, &mut grads.d_sh);
    let mut stats = ViewStats::default();
    let (half_w, half_h) = (0.5 * width as f64, 0.5 * height as f64);
    for (i, g) in geometry {
        grads.d_positions[i] = g.position;
        grads.d_log_scales[i] = g.log_scale;
        grads.d_rotations[i] = g.rotation;
        grads.d_opacity_logits[i] = g.opacity_logit;
        let ndc = [g.mean2d[0] * half_w, g.mean2d[1] * half_h];
        stats
            .mean2d_grad_norms
            .push((i, (ndc[0] * ndc[0] + ndc[1] * ndc[1]).sqrt()));
    }

    let semantic = semantics::semantic_loss(&cloud.semantic_features, &fw.memberships, config.semantic_reduction);
    let s = scale * w.lambda_s;
    for (dst, src) in grads.d_semantic.iter_mut().zip(&semantic.grad) {
        for k in 0..SEMANTIC_DIM {
            dst[k] = s * src[k];
        }
    }

    for &group in &plan.freeze {
        grads.zero_group(group);
    }
    grads.check_finite()?;
    Ok(ViewResult {
        breakdown: fw.breakdown,
        grads,
        stats,
        render: fw.frame.output,
        observed: fw.observed,
    })
}
