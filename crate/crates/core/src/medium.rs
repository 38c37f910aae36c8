//! Underwater image formation: per-channel direct attenuation and backscatter
//! towards a background water color.
//!
//! `I_c = J_c · exp(-β^d_c z) + B^∞_c · (1 - exp(-β^b_c z))`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{logit, sigmoid};
use crate::image::{Image, Plane};

/// Transmission below which a pixel cannot be restored.
pub const RESTORE_EPSILON: f64 = 1e-6;

/// Nine learnable scalars, stored unconstrained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumParams {
    pub log_beta_d: [f64; 3],
    pub log_beta_b: [f64; 3],
    pub b_inf_logit: [f64; 3],
}

impl MediumParams {
    /// From physical values. `β = 0` is allowed and means clear water.
    pub fn from_physical(beta_d: [f64; 3], beta_b: [f64; 3], b_inf: [f64; 3]) -> Result<Self> {
        for &b in beta_d.iter().chain(&beta_b) {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "attenuation coefficient {b} must be finite and non-negative"
                )));
            }
        }
        for &b in &b_inf {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "background light {b} must lie in (0, 1)"
                )));
            }
        }
        Ok(Self {
            log_beta_d: beta_d.map(f64::ln),
            log_beta_b: beta_b.map(f64::ln),
            b_inf_logit: b_inf.map(logit),
        })
    }

    /// Weak-medium start: `β^d = β^b = 0.05`, background at the given channel means.
    pub fn initial(channel_means: [f64; 3]) -> Self {
        let b_inf = channel_means.map(|m| m.clamp(0.01, 0.99));
        Self::from_physical([0.05; 3], [0.05; 3], b_inf).expect("clamped into range")
    }

    pub fn beta_d(&self) -> [f64; 3] {
        self.log_beta_d.map(f64::exp)
    }

    pub fn beta_b(&self) -> [f64; 3] {
        self.log_beta_b.map(f64::exp)
    }

    pub fn b_inf(&self) -> [f64; 3] {
        self.b_inf_logit.map(sigmoid)
    }

    /// Flat order: `log_beta_d`, `log_beta_b`, `b_inf_logit`.
    pub fn to_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out[..3].copy_from_slice(&self.log_beta_d);
        out[3..6].copy_from_slice(&self.log_beta_b);
        out[6..].copy_from_slice(&self.b_inf_logit);
        out
    }

    pub fn from_array(values: [f64; 9]) -> Self {
        Self {
            log_beta_d: [values[0], values[1], values[2]],
            log_beta_b: [values[3], values[4], values[5]],
            b_inf_logit: [values[6], values[7], values[8]],
        }
    }
}

fn check_depth(depth: &Plane) -> Result<()> {
    if let Some(z) = depth.as_slice().iter().find(|z| !(**z >= 0.0)) {
        return Err(Error::InvalidInput(format!("depth {z} is negative or undefined")));
    }
    Ok(())
}

/// `exp(-β_c · z)` per pixel and channel.
pub fn transmission(beta: [f64; 3], depth: &Plane) -> Result<Image> {
    check_depth(depth)?;
    let mut out = Image::zeros(depth.width(), depth.height());
    for (i, &z) in depth.as_slice().iter().enumerate() {
        out.set_pixel(i, [(-beta[0] * z).exp(), (-beta[1] * z).exp(), (-beta[2] * z).exp()]);
    }
    Ok(out)
}

/// Forward image-formation model: clean radiance and depth to the observed image.
pub fn apply_medium(clean: &Image, depth: &Plane, medium: &MediumParams) -> Result<Image> {
    depth.ensure_matches(clean)?;
    check_depth(depth)?;
    let (bd, bb, binf) = (medium.beta_d(), medium.beta_b(), medium.b_inf());
    let mut out = Image::zeros(clean.width(), clean.height());
    for (i, &z) in depth.as_slice().iter().enumerate() {
        let j = clean.pixel(i);
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            let td = (-bd[c] * z).exp();
            let tb = (-bb[c] * z).exp();
            rgb[c] = j[c] * td + binf[c] * (1.0 - tb);
        }
        out.set_pixel(i, rgb);
    }
    Ok(out)
}

/// Restored radiance plus the pixels where direct transmission is too small to invert.
#[derive(Clone, Debug, PartialEq)]
pub struct Restored {
    pub image: Image,
    pub unrecoverable: Vec<bool>,
}

impl Restored {
    pub fn unrecoverable_count(&self) -> usize {
        self.unrecoverable.iter().filter(|&&u| u).count()
    }
}

/// Inverts [`apply_medium`]: `J = (I - B^∞(1 - T^B)) / T^D`, clamped to `[0, 1]`.
pub fn restore_true_color(observed: &Image, depth: &Plane, medium: &MediumParams) -> Result<Restored> {
    depth.ensure_matches(observed)?;
    check_depth(depth)?;
    let (bd, bb, binf) = (medium.beta_d(), medium.beta_b(), medium.b_inf());
    let mut image = Image::zeros(observed.width(), observed.height());
    let mut unrecoverable = vec![false; observed.pixel_count()];
    for (i, &z) in depth.as_slice().iter().enumerate() {
        let obs = observed.pixel(i);
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            let td = (-bd[c] * z).exp();
            if !(td > RESTORE_EPSILON) {
                unrecoverable[i] = true;
                break;
            }
            let tb = (-bb[c] * z).exp();
            rgb[c] = ((obs[c] - binf[c] * (1.0 - tb)) / td).clamp(0.0, 1.0);
        }
        if unrecoverable[i] {
            rgb = [0.0; 3];
        }
        image.set_pixel(i, rgb);
    }
    Ok(Restored { image, unrecoverable })
}

/// Backward through [`apply_medium`].
///
/// Adds `dL/dJ` into `grad_clean`, `dL/dz` into `grad_depth`, and returns
/// `dL/d(params)` in [`MediumParams::to_array`] order.
pub(crate) fn apply_medium_backward(
    clean: &Image,
    depth: &Plane,
    medium: &MediumParams,
    grad_observed: &Image,
    grad_clean: &mut Image,
    grad_depth: &mut Plane,
) -> [f64; 9] {
    let (bd, bb, binf) = (medium.beta_d(), medium.beta_b(), medium.b_inf());
    let n = depth.as_slice().len();
    let mut per_param: [Vec<f64>; 9] = std::array::from_fn(|_| Vec::with_capacity(n));
    for (i, &z) in depth.as_slice().iter().enumerate() {
        let j = clean.pixel(i);
        let g = grad_observed.pixel(i);
        let mut gj = grad_clean.pixel(i);
        let mut gz = 0.0;
        for c in 0..3 {
            let td = (-bd[c] * z).exp();
            let tb = (-bb[c] * z).exp();
            gj[c] += g[c] * td;
            gz += g[c] * (-bd[c] * j[c] * td + binf[c] * bb[c] * tb);
            per_param[c].push(g[c] * (-z * j[c] * td) * bd[c]);
            per_param[3 + c].push(g[c] * (binf[c] * z * tb) * bb[c]);
            per_param[6 + c].push(g[c] * (1.0 - tb) * binf[c] * (1.0 - binf[c]));
        }
        grad_clean.set_pixel(i, gj);
        let x = i % depth.width();
        let y = i / depth.width();
        grad_depth.set(x, y, grad_depth.get(x, y) + gz);
    }
    per_param.map(|v| crate::reduce::pairwise_sum(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat_depth(z: f64) -> Plane {
        Plane::filled(3, 2, z)
    }

    #[test]
    fn zero_depth_transmits_everything() {
        let t = transmission([0.3, 0.1, 2.0], &flat_depth(0.0)).unwrap();
        assert!(t.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transmission_exponent_algebra() {
        let t = transmission([2f64.ln(); 3], &flat_depth(1.0)).unwrap();
        assert!(t.as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let t = transmission([0.1, 0.2, 0.3], &flat_depth(2.0)).unwrap();
        assert_eq!(t.pixel(0), [(-0.2f64).exp(), (-0.4f64).exp(), (-0.6f64).exp()]);
    }

    #[test]
    fn negative_depth_is_rejected() {
        let mut d = flat_depth(1.0);
        d.set(1, 1, -0.5);
        assert!(matches!(transmission([0.1; 3], &d), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn surface_limit_is_identity() {
        let clean = Image::from_fn(3, 2, |x, y, c| (x + 2 * y + c) as f64 / 10.0);
        let m = MediumParams::from_physical([0.4, 0.2, 0.9], [0.1, 0.3, 0.5], [0.2, 0.3, 0.4]).unwrap();
        let out = apply_medium(&clean, &flat_depth(0.0), &m).unwrap();
        assert_eq!(out, clean);
    }

    #[test]
    fn far_field_tends_to_background() {
        let clean = Image::filled(3, 2, [0.9, 0.1, 0.5]);
        let m = MediumParams::from_physical([1.0; 3], [1.0; 3], [0.2, 0.3, 0.4]).unwrap();
        let out = apply_medium(&clean, &flat_depth(1e6), &m).unwrap();
        for i in 0..6 {
            let p = out.pixel(i);
            for (v, b) in p.iter().zip(m.b_inf()) {
                assert!((v - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_half_transmission() {
        let clean = Image::filled(3, 2, [0.8; 3]);
        let m = MediumParams::from_physical([2f64.ln(); 3], [2f64.ln(); 3], [0.2; 3]).unwrap();
        let out = apply_medium(&clean, &flat_depth(1.0), &m).unwrap();
        assert!(out.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let clean = Image::zeros(4, 2);
        let m = MediumParams::initial([0.5; 3]);
        assert!(matches!(
            apply_medium(&clean, &flat_depth(1.0), &m),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn restore_at_surface_is_identity() {
        let obs = Image::from_fn(3, 2, |x, y, c| (x + y + c) as f64 / 8.0);
        let m = MediumParams::from_physical([0.4; 3], [0.2; 3], [0.3; 3]).unwrap();
        let r = restore_true_color(&obs, &flat_depth(0.0), &m).unwrap();
        assert_eq!(r.image, obs);
        assert_eq!(r.unrecoverable_count(), 0);
    }

    #[test]
    fn huge_depth_is_flagged() {
        let m = MediumParams::from_physical([1.0; 3], [1.0; 3], [0.2, 0.3, 0.4]).unwrap();
        let obs = Image::filled(3, 2, m.b_inf());
        let r = restore_true_color(&obs, &flat_depth(1e3), &m).unwrap();
        assert_eq!(r.unrecoverable_count(), 6);
        assert!(r.image.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_attenuation_is_clear_water() {
        let m = MediumParams::from_physical([0.0; 3], [0.0; 3], [0.7, 0.2, 0.6]).unwrap();
        let clean = Image::from_fn(3, 2, |x, _, c| (x + c) as f64 / 6.0);
        let out = apply_medium(&clean, &flat_depth(4.0), &m).unwrap();
        assert_eq!(out, clean);
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let clean = Image::from_fn(3, 2, |x, y, c| 0.1 + 0.13 * (x + 2 * y + c) as f64 / 3.0);
        let depth = Plane::from_fn(3, 2, |x, y| 0.5 + 0.7 * x as f64 + 1.1 * y as f64);
        let m = MediumParams::from_physical([0.15, 0.3, 0.45], [0.2, 0.1, 0.35], [0.25, 0.4, 0.6]).unwrap();
        let weights = Image::from_fn(3, 2, |x, y, c| 1.0 + ((x * 5 + y * 3 + c * 7) % 4) as f64 * 0.3 - 0.5);
        let loss = |p: &MediumParams| -> f64 {
            let out = apply_medium(&clean, &depth, p).unwrap();
            out.as_slice().iter().zip(weights.as_slice()).map(|(a, w)| a * w).sum()
        };
        let mut gc = Image::zeros(3, 2);
        let mut gd = Plane::zeros(3, 2);
        let analytic = apply_medium_backward(&clean, &depth, &m, &weights, &mut gc, &mut gd);
        let base = m.to_array();
        let eps = 1e-6;
        for k in 0..9 {
            let (mut a, mut b) = (base, base);
            a[k] += eps;
            b[k] -= eps;
            let num = (loss(&MediumParams::from_array(a)) - loss(&MediumParams::from_array(b))) / (2.0 * eps);
            let rel = (num - analytic[k]).abs() / num.abs().max(analytic[k].abs()).max(1e-8);
            assert!(rel < 1e-5, "param {k}: {num} vs {}", analytic[k]);
        }
    }

    proptest! {
        #[test]
        fn monotone_in_clean_radiance(
            j in 0.0f64..0.9, dj in 0.0f64..0.1, z in 0.0f64..10.0,
            bd in 0.01f64..1.0, bb in 0.01f64..1.0, binf in 0.05f64..0.95,
        ) {
            let m = MediumParams::from_physical([bd; 3], [bb; 3], [binf; 3]).unwrap();
            let depth = Plane::filled(1, 1, z);
            let lo = apply_medium(&Image::filled(1, 1, [j; 3]), &depth, &m).unwrap();
            let hi = apply_medium(&Image::filled(1, 1, [j + dj; 3]), &depth, &m).unwrap();
            prop_assert!(hi.get(0, 0, 0) >= lo.get(0, 0, 0));
        }

        #[test]
        fn restore_inverts_apply(
            j in prop::array::uniform3(0.0f64..1.0), z in 0.0f64..5.0,
            bd in prop::array::uniform3(0.05f64..0.5), bb in prop::array::uniform3(0.05f64..0.5),
            binf in prop::array::uniform3(0.05f64..0.95),
        ) {
            let m = MediumParams::from_physical(bd, bb, binf).unwrap();
            let depth = Plane::filled(1, 1, z);
            let clean = Image::filled(1, 1, j);
            let obs = apply_medium(&clean, &depth, &m).unwrap();
            let back = restore_true_color(&obs, &depth, &m).unwrap();
            for c in 0..3 {
                prop_assert!((back.image.get(0, 0, c) - j[c]).abs() < 1e-6);
            }
        }
    }
}
