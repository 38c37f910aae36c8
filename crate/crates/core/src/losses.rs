//! Terms of the training objective and their stage- and frame-dependent
//! composition:
//!
//! `L_final = L_rec + L_depth + L_g + L_smooth + λ_s·L_s + λ_2·L_2`
//!
//! with `L_rec = w_ℓ1·ℓ1 + λ_ssim·(1 - SSIM)/2`, where `w_ℓ1` and `λ_2`
//! depend on the training stage. Interpolated frames are down-weighted,
//! either by a fixed factor or by a learned uncertainty `γ`:
//! `L' = ½·γ·L - ½·α·log γ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::reduce::{mean, pairwise_sum};
use crate::schedule::{Stage, StageConfig};

pub use crate::ssim::ssim_index;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_ssim: f64,
    pub lambda_depth: f64,
    pub lambda_g: f64,
    pub lambda_smooth: f64,
    /// Regularizer on `log γ` for learned interpolated-frame weighting.
    pub alpha_reg: f64,
    pub interp_fixed_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 0.1,
            lambda_ssim: 0.2,
            lambda_depth: 0.05,
            lambda_g: 0.01,
            lambda_smooth: 0.01,
            alpha_reg: 1.0,
            interp_fixed_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_s,
            self.lambda_ssim,
            self.lambda_depth,
            self.lambda_g,
            self.lambda_smooth,
            self.alpha_reg,
            self.interp_fixed_weight,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    #[default]
    Keyframe,
    Interpolated,
}

/// Unweighted loss terms for one rendered view.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub l2: f64,
    /// SSIM index (not the dissimilarity).
    pub ssim: f64,
    pub depth: f64,
    pub grey: f64,
    pub smooth: f64,
    pub semantic: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    /// Weighted by `lambda_depth`.
    pub l_depth: f64,
    /// Weighted by `lambda_g`.
    pub l_g: f64,
    /// Weighted by `lambda_smooth`.
    pub l_smooth: f64,
    /// Unweighted semantic loss.
    pub l_s: f64,
    /// Unweighted mean squared error.
    pub l_2: f64,
    pub l_final: f64,
    /// What the optimizer minimizes for this view: `l_final` for keyframes,
    /// the down-weighted value for interpolated frames.
    pub l_objective: f64,
    pub lambda_s: f64,
    pub lambda_2: f64,
    pub frame_kind: FrameKind,
}

impl LossBreakdown {
    pub fn recompose(&self) -> f64 {
        self.l_rec + self.l_depth + self.l_g + self.l_smooth + self.lambda_s * self.l_s + self.lambda_2 * self.l_2
    }
}

/// Mean absolute and mean squared difference over all pixels and channels.
pub fn photometric_terms(rendered: &Image, target: &Image) -> Result<(f64, f64)> {
    rendered.ensure_same_shape(target)?;
    let diffs: Vec<f64> = rendered
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let sq: Vec<f64> = diffs.iter().map(|d| d * d).collect();
    Ok((mean(&abs), mean(&sq)))
}

/// `l1_weight·ℓ1 + λ_ssim·(1 - SSIM)/2`.
pub fn reconstruction_loss(rendered: &Image, target: &Image, l1_weight: f64, lambda_ssim: f64) -> Result<f64> {
    let (l1, _) = photometric_terms(rendered, target)?;
    let dssim = if lambda_ssim == 0.0 {
        0.0
    } else {
        lambda_ssim * (1.0 - ssim_index(rendered, target)?) / 2.0
    };
    Ok(l1_weight * l1 + dssim)
}

/// Mean absolute depth error over the valid mask; zero for an empty mask.
pub fn depth_loss(rendered: &Plane, prior: &Plane, mask: &[bool]) -> Result<f64> {
    if rendered.width() != prior.width()
        || rendered.height() != prior.height()
        || mask.len() != rendered.as_slice().len()
    {
        return Err(Error::ShapeMismatch("depth, prior and mask must share a shape".into()));
    }
    let terms: Vec<f64> = rendered
        .as_slice()
        .iter()
        .zip(prior.as_slice())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((d, p), _)| (d - p).abs())
        .collect();
    Ok(mean(&terms))
}

/// `Σ_c (mean_c(J) - 0.5)²`
pub fn grey_world_loss(restored: &Image) -> f64 {
    restored.channel_means().iter().map(|m| (m - 0.5) * (m - 0.5)).sum()
}

fn image_grad_weights(target: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (target.width(), target.height());
    let mut wx = Vec::with_capacity(h * (w - 1));
    for y in 0..h {
        for x in 0..w - 1 {
            let g: f64 = (0..3)
                .map(|c| (target.get(x + 1, y, c) - target.get(x, y, c)).abs())
                .sum::<f64>()
                / 3.0;
            wx.push((-g).exp());
        }
    }
    let mut wy = Vec::with_capacity((h - 1) * w);
    for y in 0..h - 1 {
        for x in 0..w {
            let g: f64 = (0..3)
                .map(|c| (target.get(x, y + 1, c) - target.get(x, y, c)).abs())
                .sum::<f64>()
                / 3.0;
            wy.push((-g).exp());
        }
    }
    (wx, wy)
}

/// `mean(|∂x D|·e^{-|∂x I|}) + mean(|∂y D|·e^{-|∂y I|})`, with image gradients
/// averaged over channels. Each mean runs over its own difference grid.
pub fn edge_smooth_loss(depth: &Plane, target: &Image) -> Result<f64> {
    depth.ensure_matches(target)?;
    let (w, h) = (depth.width(), depth.height());
    if w < 2 || h < 2 {
        return Err(Error::InvalidInput(
            "edge-aware smoothness needs at least 2x2 pixels".into(),
        ));
    }
    let (wx, wy) = image_grad_weights(target);
    let mut tx = Vec::with_capacity(wx.len());
    for y in 0..h {
        for x in 0..w - 1 {
            tx.push((depth.get(x + 1, y) - depth.get(x, y)).abs() * wx[y * (w - 1) + x]);
        }
    }
    let mut ty = Vec::with_capacity(wy.len());
    for y in 0..h - 1 {
        for x in 0..w {
            ty.push((depth.get(x, y + 1) - depth.get(x, y)).abs() * wy[y * w + x]);
        }
    }
    Ok(mean(&tx) + mean(&ty))
}

/// Weighted sum for one view. Stage selects the ℓ1 weight inside `L_rec` and `λ_2`.
pub fn compose_final(parts: &LossParts, weights: &LossWeights, stage: Stage, stages: &StageConfig) -> LossBreakdown {
    let sw = stages.weights(stage);
    let mut out = LossBreakdown {
        l_rec: sw.l1 * parts.l1 + weights.lambda_ssim * (1.0 - parts.ssim) / 2.0,
        l_depth: weights.lambda_depth * parts.depth,
        l_g: weights.lambda_g * parts.grey,
        l_smooth: weights.lambda_smooth * parts.smooth,
        l_s: parts.semantic,
        l_2: parts.l2,
        l_final: 0.0,
        l_objective: 0.0,
        lambda_s: weights.lambda_s,
        lambda_2: sw.l2,
        frame_kind: FrameKind::Keyframe,
    };
    out.l_final = out.recompose();
    out.l_objective = out.l_final;
    out
}

/// `½·γ·L - ½·α·log γ`
pub fn interp_frame_loss(l_total: f64, gamma: f64, alpha_reg: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "uncertainty γ = {gamma} must be positive"
        )));
    }
    Ok(0.5 * gamma * l_total - 0.5 * alpha_reg * gamma.ln())
}

/// Fixed down-weighting of interpolated frames.
pub fn interp_frame_loss_fixed(l_total: f64, weight: f64) -> f64 {
    weight * l_total
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    #[default]
    Fixed,
    Learned,
}

/// Applies the frame-kind weighting to a composed breakdown.
///
/// Returns the updated breakdown, `d l_objective / d l_final`, and
/// `d l_objective / d log γ` (zero outside learned mode).
pub fn weight_frame(
    mut breakdown: LossBreakdown,
    kind: FrameKind,
    mode: InterpMode,
    gamma: f64,
    weights: &LossWeights,
) -> Result<(LossBreakdown, f64, f64)> {
    breakdown.frame_kind = kind;
    let (scale, g_log_gamma) = match (kind, mode) {
        (FrameKind::Keyframe, _) => {
            breakdown.l_objective = breakdown.l_final;
            (1.0, 0.0)
        }
        (FrameKind::Interpolated, InterpMode::Fixed) => {
            breakdown.l_objective = interp_frame_loss_fixed(breakdown.l_final, weights.interp_fixed_weight);
            (weights.interp_fixed_weight, 0.0)
        }
        (FrameKind::Interpolated, InterpMode::Learned) => {
            breakdown.l_objective = interp_frame_loss(breakdown.l_final, gamma, weights.alpha_reg)?;
            (0.5 * gamma, 0.5 * gamma * breakdown.l_final - 0.5 * weights.alpha_reg)
        }
    };
    Ok((breakdown, scale, g_log_gamma))
}

/// Externally supplied depth with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthPrior {
    pub depth: Plane,
    pub mask: Vec<bool>,
}

impl DepthPrior {
    pub fn new(depth: Plane, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != depth.as_slice().len() {
            return Err(Error::ShapeMismatch(format!(
                "depth mask has {} entries for a {}x{} map",
                mask.len(),
                depth.width(),
                depth.height()
            )));
        }
        Ok(Self { depth, mask })
    }
}

/// Gradient of `ℓ1`, `ℓ2` and `(1 - SSIM)/2` pieces w.r.t. the rendered image.
pub(crate) fn photometric_grad(
    rendered: &Image,
    target: &Image,
    l1_weight: f64,
    l2_weight: f64,
    lambda_ssim: f64,
) -> Result<(LossParts, Image)> {
    rendered.ensure_same_shape(target)?;
    let (l1, l2) = photometric_terms(rendered, target)?;
    let n = rendered.as_slice().len() as f64;
    let mut grad = Image::zeros(rendered.width(), rendered.height());
    for ((g, a), b) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(rendered.as_slice())
        .zip(target.as_slice())
    {
        let d = a - b;
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = l1_weight * sign / n + l2_weight * 2.0 * d / n;
    }
    let mut ssim = 1.0;
    if lambda_ssim != 0.0 {
        let (value, g_ssim) = crate::ssim::ssim_with_grad(rendered, target)?;
        ssim = value;
        for (g, s) in grad.as_mut_slice().iter_mut().zip(g_ssim.as_slice()) {
            *g += -0.5 * lambda_ssim * s;
        }
    }
    Ok((
        LossParts {
            l1,
            l2,
            ssim,
            ..LossParts::default()
        },
        grad,
    ))
}

/// Adds `scale · d(depth_loss)/d(rendered)` into `grad`.
pub(crate) fn depth_loss_grad(rendered: &Plane, prior: &Plane, mask: &[bool], scale: f64, grad: &mut Plane) {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return;
    }
    let inv = scale / count as f64;
    for (((g, d), p), &m) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(rendered.as_slice())
        .zip(prior.as_slice())
        .zip(mask)
    {
        if m {
            let diff = d - p;
            if diff > 0.0 {
                *g += inv;
            } else if diff < 0.0 {
                *g -= inv;
            }
        }
    }
}

/// Adds `scale · d(grey_world_loss)/d(image)` into `grad`.
pub(crate) fn grey_world_grad(image: &Image, scale: f64, grad: &mut Image) {
    let means = image.channel_means();
    let n = image.pixel_count() as f64;
    for px in grad.as_mut_slice().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] += scale * 2.0 * (means[c] - 0.5) / n;
        }
    }
}

/// Adds `scale · d(edge_smooth_loss)/d(depth)` into `grad`.
pub(crate) fn edge_smooth_grad(depth: &Plane, target: &Image, scale: f64, grad: &mut Plane) {
    let (w, h) = (depth.width(), depth.height());
    let (wx, wy) = image_grad_weights(target);
    let nx = (h * (w - 1)) as f64;
    let ny = ((h - 1) * w) as f64;
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for y in 0..h {
        for x in 0..w - 1 {
            let s = scale * sign(depth.get(x + 1, y) - depth.get(x, y)) * wx[y * (w - 1) + x] / nx;
            grad.set(x + 1, y, grad.get(x + 1, y) + s);
            grad.set(x, y, grad.get(x, y) - s);
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            let s = scale * sign(depth.get(x, y + 1) - depth.get(x, y)) * wy[y * w + x] / ny;
            grad.set(x, y + 1, grad.get(x, y + 1) + s);
            grad.set(x, y, grad.get(x, y) - s);
        }
    }
}

/// Sum used when reporting several per-view losses.
pub fn total(values: &[f64]) -> f64 {
    pairwise_sum(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn photometric_identity_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 5, 4);
        assert_eq!(photometric_terms(&a, &a).unwrap(), (0.0, 0.0));
        let b = Image::filled(5, 4, [0.3; 3]);
        let c = Image::filled(5, 4, [0.4; 3]);
        let (l1, l2) = photometric_terms(&c, &b).unwrap();
        assert!((l1 - 0.1).abs() < 1e-12 && (l2 - 0.01).abs() < 1e-12);
        assert!(photometric_terms(&a, &Image::zeros(4, 5)).is_err());
    }

    #[test]
    fn photometric_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_image(&mut rng, 9, 7), random_image(&mut rng, 9, 7));
        let (mut s1, mut s2) = (0.0, 0.0);
        for y in 0..7 {
            for x in 0..9 {
                for c in 0..3 {
                    let d = a.get(x, y, c) - b.get(x, y, c);
                    s1 += d.abs();
                    s2 += d * d;
                }
            }
        }
        let (l1, l2) = photometric_terms(&a, &b).unwrap();
        assert!((l1 - s1 / 189.0).abs() < 1e-12);
        assert!((l2 - s2 / 189.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_isolation_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_image(&mut rng, 12, 12), random_image(&mut rng, 12, 12));
        assert_eq!(reconstruction_loss(&a, &a, 0.8, 0.2).unwrap(), 0.0);
        let (l1, _) = photometric_terms(&a, &b).unwrap();
        assert_eq!(reconstruction_loss(&a, &b, 0.8, 0.0).unwrap(), 0.8 * l1);

        let checker = Image::from_fn(16, 16, |x, y, _| ((x + y) % 2) as f64);
        let gray = Image::filled(16, 16, [0.5; 3]);
        let (l1, _) = photometric_terms(&checker, &gray).unwrap();
        let s = ssim_index(&checker, &gray).unwrap();
        let expected = 0.8 * l1 + 0.2 * (1.0 - s) / 2.0;
        assert_eq!(reconstruction_loss(&checker, &gray, 0.8, 0.2).unwrap(), expected);
    }

    #[test]
    fn depth_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Plane::from_fn(6, 5, |_, _| rng.random::<f64>() * 4.0);
        let p = Plane::from_fn(6, 5, |_, _| rng.random::<f64>() * 4.0);
        assert_eq!(depth_loss(&d, &d, &[true; 30]).unwrap(), 0.0);
        assert_eq!(depth_loss(&d, &p, &[false; 30]).unwrap(), 0.0);
        let mask: Vec<bool> = (0..30).map(|i| i % 3 != 0).collect();
        let (mut sum, mut n) = (0.0, 0);
        for i in 0..30 {
            if mask[i] {
                sum += (d.as_slice()[i] - p.as_slice()[i]).abs();
                n += 1;
            }
        }
        assert!((depth_loss(&d, &p, &mask).unwrap() - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn grey_world_cases() {
        assert_eq!(grey_world_loss(&Image::filled(4, 4, [0.5; 3])), 0.0);
        assert!((grey_world_loss(&Image::filled(4, 4, [1.0; 3])) - 0.75).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 7, 3);
        let mut expected = 0.0;
        for c in 0..3 {
            let m: f64 = (0..21).map(|i| img.pixel(i)[c]).sum::<f64>() / 21.0;
            expected += (m - 0.5) * (m - 0.5);
        }
        assert!((grey_world_loss(&img) - expected).abs() < 1e-12);
    }

    #[test]
    fn edge_smoothness_cases() {
        let flat_img = Image::filled(6, 6, [0.4; 3]);
        assert_eq!(edge_smooth_loss(&Plane::filled(6, 6, 2.0), &flat_img).unwrap(), 0.0);

        let step = Plane::from_fn(6, 6, |x, _| if x < 3 { 1.0 } else { 3.0 });
        let edge_img = Image::from_fn(6, 6, |x, _, _| if x < 3 { 0.0 } else { 1.0 });
        let with_edge = edge_smooth_loss(&step, &edge_img).unwrap();
        let without = edge_smooth_loss(&step, &flat_img).unwrap();
        assert!(with_edge < without);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = Plane::from_fn(5, 4, |_, _| rng.random::<f64>());
        let img = random_image(&mut rng, 5, 4);
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..4 {
            for x in 0..4 {
                let gi: f64 = (0..3)
                    .map(|c| (img.get(x + 1, y, c) - img.get(x, y, c)).abs())
                    .sum::<f64>()
                    / 3.0;
                sx += (d.get(x + 1, y) - d.get(x, y)).abs() * (-gi).exp();
            }
        }
        for y in 0..3 {
            for x in 0..5 {
                let gi: f64 = (0..3)
                    .map(|c| (img.get(x, y + 1, c) - img.get(x, y, c)).abs())
                    .sum::<f64>()
                    / 3.0;
                sy += (d.get(x, y + 1) - d.get(x, y)).abs() * (-gi).exp();
            }
        }
        let expected = sx / 16.0 + sy / 15.0;
        assert!((edge_smooth_loss(&d, &img).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn compose_cases() {
        let stages = StageConfig::default();
        let w = LossWeights::default();
        let zero = LossParts {
            ssim: 1.0,
            ..LossParts::default()
        };
        assert_eq!(compose_final(&zero, &w, Stage::One, &stages).l_final, 0.0);

        let only_s = LossParts {
            ssim: 1.0,
            semantic: 1.0,
            ..LossParts::default()
        };
        assert!((compose_final(&only_s, &w, Stage::One, &stages).l_final - 0.1).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let parts = LossParts {
            l1: rng.random(),
            l2: rng.random(),
            ssim: rng.random(),
            depth: rng.random(),
            grey: rng.random(),
            smooth: rng.random(),
            semantic: rng.random(),
        };
        for (stage, l1w, l2w) in [(Stage::One, 0.8, 0.0), (Stage::Two, 0.4, 0.5)] {
            let b = compose_final(&parts, &w, stage, &stages);
            let hand = l1w * parts.l1
                + 0.2 * (1.0 - parts.ssim) / 2.0
                + 0.05 * parts.depth
                + 0.01 * parts.grey
                + 0.01 * parts.smooth
                + 0.1 * parts.semantic
                + l2w * parts.l2;
            assert!((b.l_final - hand).abs() < 1e-12);
            assert!((b.recompose() - b.l_final).abs() < 1e-9);
        }
    }

    #[test]
    fn interp_cases() {
        assert_eq!(interp_frame_loss(3.7, 1.0, 1.0).unwrap(), 0.5 * 3.7);
        let e = std::f64::consts::E;
        assert!((interp_frame_loss(2.0, e, 1.0).unwrap() - (e - 0.5)).abs() < 1e-15);
        assert!((interp_frame_loss_fixed(3.0, 0.1) - 0.3).abs() < 1e-15);
        assert!(interp_frame_loss(1.0, 0.0, 1.0).is_err());
        assert!(interp_frame_loss(1.0, -2.0, 1.0).is_err());
        // the log term makes the learned value negative for large γ and small loss
        assert!(interp_frame_loss(0.0, 5.0, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn frame_weighting() {
        let w = LossWeights::default();
        let parts = LossParts {
            l1: 0.3,
            ssim: 0.9,
            ..LossParts::default()
        };
        let b = compose_final(&parts, &w, Stage::One, &StageConfig::default());
        let (k, s, _) = weight_frame(b, FrameKind::Keyframe, InterpMode::Learned, 3.0, &w).unwrap();
        assert_eq!((k.l_objective, s), (b.l_final, 1.0));
        let (f, s, g) = weight_frame(b, FrameKind::Interpolated, InterpMode::Fixed, 3.0, &w).unwrap();
        assert_eq!((f.l_objective, s, g), (0.1 * b.l_final, 0.1, 0.0));
        assert_eq!(f.frame_kind, FrameKind::Interpolated);
        let gamma: f64 = 1.7;
        let (l, s, g) = weight_frame(b, FrameKind::Interpolated, InterpMode::Learned, gamma, &w).unwrap();
        assert_eq!(s, 0.5 * gamma);
        let eps = 1e-6;
        let at = |lg: f64| interp_frame_loss(b.l_final, lg.exp(), 1.0).unwrap();
        let num = (at(gamma.ln() + eps) - at(gamma.ln() - eps)) / (2.0 * eps);
        assert!((num - g).abs() < 1e-8);
        assert_eq!(l.l_objective, interp_frame_loss(b.l_final, gamma, 1.0).unwrap());
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Plane::from_fn(5, 4, |_, _| 1.0 + rng.random::<f64>());
        let p = Plane::from_fn(5, 4, |_, _| 1.0 + rng.random::<f64>());
        let img = random_image(&mut rng, 5, 4);
        let mask: Vec<bool> = (0..20).map(|i| i % 4 != 1).collect();
        let f = |d: &Plane| 0.7 * depth_loss(d, &p, &mask).unwrap() + 0.3 * edge_smooth_loss(d, &img).unwrap();
        let mut g = Plane::zeros(5, 4);
        depth_loss_grad(&d, &p, &mask, 0.7, &mut g);
        edge_smooth_grad(&d, &img, 0.3, &mut g);
        let eps = 1e-7;
        for i in 0..20 {
            let (mut a, mut b) = (d.clone(), d.clone());
            a.as_mut_slice()[i] += eps;
            b.as_mut_slice()[i] -= eps;
            let num = (f(&a) - f(&b)) / (2.0 * eps);
            assert!(
                (num - g.as_slice()[i]).abs() < 1e-6,
                "{i}: {num} vs {}",
                g.as_slice()[i]
            );
        }

        let mut gi = Image::zeros(5, 4);
        grey_world_grad(&img, 1.0, &mut gi);
        for i in 0..60 {
            let (mut a, mut b) = (img.clone(), img.clone());
            a.as_mut_slice()[i] += eps;
            b.as_mut_slice()[i] -= eps;
            let num = (grey_world_loss(&a) - grey_world_loss(&b)) / (2.0 * eps);
            assert!((num - gi.as_slice()[i]).abs() < 1e-7);
        }
    }
}
