//! Bias-corrected Adam over parameter groups with per-group step counts,
//! plus the learning-rate schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backward::ParamGrads;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, ParamGroup};
use crate::medium::MediumParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position: f64,
    /// Final position rate after exponential decay, multiplied by the scene extent.
    pub position_final: f64,
    /// Iterations over which the position rate decays; defaults to the run length.
    pub position_decay_steps: Option<usize>,
    pub sh: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub semantic: f64,
    pub medium: f64,
    /// Rate for `log γ` of learned interpolated-frame weighting.
    pub gamma: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            position_decay_steps: None,
            sh: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            semantic: 2.5e-3,
            medium: 1e-3,
            gamma: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.position,
            self.position_final,
            self.sh,
            self.opacity,
            self.scale,
            self.rotation,
            self.semantic,
            self.medium,
            self.gamma,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidParameter(
                "learning rates must be finite and non-negative".into(),
            ));
        }
        if self.position > 0.0 && self.position_final <= 0.0 {
            return Err(Error::InvalidParameter(
                "position_final must be positive when position decays".into(),
            ));
        }
        Ok(())
    }

    /// Log-linear interpolation from `position` to `position_final`.
    pub fn position_at(&self, iteration: usize, total_iterations: usize, extent: f64) -> f64 {
        if self.position == 0.0 {
            return 0.0;
        }
        let steps = self.position_decay_steps.unwrap_or(total_iterations).max(1);
        let t = (iteration as f64 / steps as f64).clamp(0.0, 1.0);
        let log_lr = (1.0 - t) * self.position.ln() + t * self.position_final.ln();
        log_lr.exp() * extent
    }

    pub fn for_group(&self, group: ParamGroup, iteration: usize, total_iterations: usize, extent: f64) -> f64 {
        match group {
            ParamGroup::Position => self.position_at(iteration, total_iterations, extent),
            ParamGroup::Scale => self.scale,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Sh => self.sh,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Semantic => self.semantic,
            ParamGroup::Medium => self.medium,
        }
    }
}

/// First and second moments of one group, flat and congruent with it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Moments {
    fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub groups: BTreeMap<ParamGroup, Moments>,
    pub gamma: Moments,
}

/// Where a primitive of a densified cloud came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// Survived unchanged from this old index.
    Kept(usize),
    /// Created from this old index by cloning or splitting.
    New(usize),
}

fn group_len(cloud: &GaussianCloud, group: ParamGroup) -> usize {
    let n = cloud.len();
    match group {
        ParamGroup::Position | ParamGroup::Scale => 3 * n,
        ParamGroup::Rotation => 4 * n,
        ParamGroup::Sh => cloud.sh_coeffs.len(),
        ParamGroup::Opacity => n,
        ParamGroup::Semantic => crate::gaussian::SEMANTIC_DIM * n,
        ParamGroup::Medium => 9,
    }
}

impl OptimizerState {
    pub fn new(cloud: &GaussianCloud) -> Self {
        Self {
            groups: ParamGroup::ALL
                .into_iter()
                .map(|g| (g, Moments::zeros(group_len(cloud, g))))
                .collect(),
            gamma: Moments::zeros(1),
        }
    }

    pub fn step_count(&self, group: ParamGroup) -> u64 {
        self.groups[&group].step
    }

    pub fn moments(&self, group: ParamGroup) -> &Moments {
        &self.groups[&group]
    }

    /// Rebuilds per-primitive moments after densification: kept primitives
    /// carry theirs over, new ones start from zero.
    pub fn remap(&mut self, remap: &[Origin], old_len: usize) {
        for (group, moments) in self.groups.iter_mut() {
            if *group == ParamGroup::Medium {
                continue;
            }
            let stride = moments.m.len().checked_div(old_len).unwrap_or(0);
            let mut m = Vec::with_capacity(remap.len() * stride);
            let mut v = Vec::with_capacity(remap.len() * stride);
            for origin in remap {
                match *origin {
                    Origin::Kept(old) => {
                        m.extend_from_slice(&moments.m[old * stride..(old + 1) * stride]);
                        v.extend_from_slice(&moments.v[old * stride..(old + 1) * stride]);
                    }
                    Origin::New(_) => {
                        m.extend(std::iter::repeat_n(0.0, stride));
                        v.extend(std::iter::repeat_n(0.0, stride));
                    }
                }
            }
            moments.m = m;
            moments.v = v;
        }
    }

    pub fn ensure_congruent(&self, cloud: &GaussianCloud) -> Result<()> {
        for (group, moments) in &self.groups {
            let expected = group_len(cloud, *group);
            if moments.m.len() != expected || moments.v.len() != expected {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer moments for {group} hold {} entries, the cloud needs {expected}",
                    moments.m.len()
                )));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of `values`. Nothing is written when any
/// updated entry would be non-finite; the offending flat index is returned.
pub fn adam_update(
    values: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    lr: f64,
) -> std::result::Result<(), usize> {
    let step = moments.step + 1;
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    let mut new_m = Vec::with_capacity(values.len());
    let mut new_v = Vec::with_capacity(values.len());
    let mut new_p = Vec::with_capacity(values.len());
    for (k, ((&p, &g), (&m, &v))) in values
        .iter()
        .zip(grads)
        .zip(moments.m.iter().zip(&moments.v))
        .enumerate()
    {
        let m = BETA1 * m + (1.0 - BETA1) * g;
        let v = BETA2 * v + (1.0 - BETA2) * g * g;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        let p = p - lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        if !(p.is_finite() && m.is_finite() && v.is_finite()) {
            return Err(k);
        }
        new_m.push(m);
        new_v.push(v);
        new_p.push(p);
    }
    values.copy_from_slice(&new_p);
    moments.m = new_m;
    moments.v = new_v;
    moments.step = step;
    Ok(())
}

/// Mutable handles to everything the optimizer updates.
pub struct Trainable<'a> {
    pub cloud: &'a mut GaussianCloud,
    pub medium: &'a mut MediumParams,
    pub log_gamma: &'a mut f64,
}

/// Updates every group not in `freeze`. Frozen groups keep their values,
/// moments and step counts. Quaternions are re-normalized whenever the
/// rotation group moves.
pub fn adam_step(
    params: Trainable<'_>,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    freeze: &BTreeSet<ParamGroup>,
    lr: impl Fn(ParamGroup) -> f64,
    gamma_lr: f64,
) -> Result<()> {
    state.ensure_congruent(params.cloud)?;
    let cloud = params.cloud;
    for group in ParamGroup::ALL {
        if freeze.contains(&group) {
            continue;
        }
        let rate = lr(group);
        let moments = state.groups.get_mut(&group).expect("all groups present");
        let g = grads.group(group);
        let result = if group == ParamGroup::Medium {
            let mut values = params.medium.to_array();
            let r = adam_update(&mut values, g, moments, rate);
            if r.is_ok() {
                *params.medium = MediumParams::from_array(values);
            }
            r
        } else {
            let values: &mut [f64] = match group {
                ParamGroup::Position => cloud.positions.as_flattened_mut(),
                ParamGroup::Scale => cloud.log_scales.as_flattened_mut(),
                ParamGroup::Rotation => cloud.rotations.as_flattened_mut(),
                ParamGroup::Sh => &mut cloud.sh_coeffs,
                ParamGroup::Opacity => &mut cloud.opacity_logits,
                ParamGroup::Semantic => cloud.semantic_features.as_flattened_mut(),
                ParamGroup::Medium => unreachable!(),
            };
            if values.len() != g.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{group} gradient has {} entries for {} parameters",
                    g.len(),
                    values.len()
                )));
            }
            adam_update(values, g, moments, rate)
        };
        if let Err(k) = result {
            let stride = (group_len(cloud, group) / cloud.len().max(1)).max(1);
            let index = if group == ParamGroup::Medium { k } else { k / stride };
            return Err(Error::NonFiniteUpdate { group, index });
        }
        if group == ParamGroup::Rotation {
            cloud.normalize_rotations();
        }
    }
    let mut lg = [*params.log_gamma];
    adam_update(&mut lg, &[grads.d_log_gamma], &mut state.gamma, gamma_lr)
        .map_err(|_| Error::InvalidParameter("non-finite update of the interpolation uncertainty".into()))?;
    *params.log_gamma = lg[0];
    Ok(())
}
