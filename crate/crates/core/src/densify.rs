//! Adaptive density control: clone small Gaussians with large screen-space
//! gradients, split large ones, and prune nearly transparent ones.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backward::ViewStats;
use crate::error::{Error, Result};
use crate::gaussian::{rotation_matrix, GaussianCloud};
use crate::la;
use crate::optim::Origin;
use crate::rng::{self, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub enabled: bool,
    /// Threshold on the view-averaged NDC gradient norm of the projected center.
    pub grad_threshold: f64,
    pub interval: usize,
    pub start_iteration: usize,
    /// Last iteration (exclusive) at which density control may run; the stage
    /// boundary when unset.
    pub stop_iteration: Option<usize>,
    pub prune_opacity: f64,
    /// Gaussians whose largest scale exceeds this fraction of the scene
    /// extent are split rather than cloned.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub max_primitives: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            grad_threshold: 2e-4,
            interval: 100,
            start_iteration: 500,
            stop_iteration: None,
            prune_opacity: 0.005,
            percent_dense: 0.01,
            split_factor: 1.6,
            max_primitives: 5000,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::InvalidParameter("densify interval must be positive".into()));
        }
        if !(self.split_factor > 1.0) || !(self.grad_threshold >= 0.0) || !(self.prune_opacity >= 0.0) {
            return Err(Error::InvalidParameter(
                "densify thresholds must be non-negative and split_factor above 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether density control runs after `iteration` (0-based) completes.
    pub fn due(&self, iteration: usize, stage_boundary: usize) -> bool {
        let stop = self.stop_iteration.unwrap_or(stage_boundary).min(stage_boundary);
        self.enabled
            && iteration >= self.start_iteration
            && iteration < stop
            && (iteration + 1).is_multiple_of(self.interval)
    }
}

/// Screen-space gradient accumulators between two density-control events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(len: usize) -> Self {
        Self {
            accum: vec![0.0; len],
            count: vec![0; len],
        }
    }

    pub fn add(&mut self, stats: &ViewStats) {
        for &(i, norm) in &stats.mean2d_grad_norms {
            self.accum[i] += norm;
            self.count[i] += 1;
        }
    }

    pub fn average(&self, index: usize) -> f64 {
        match self.count[index] {
            0 => 0.0,
            n => self.accum[index] / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub prune_only: bool,
    /// Origin of every primitive in the new cloud.
    pub remap: Vec<Origin>,
}

/// Applies clone, split and prune rules. New primitives are appended after
/// the survivors: clones first, then split children, each in parent order.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &GradStats,
    config: &DensifyConfig,
    extent: f64,
    seed: u64,
    iteration: usize,
) -> Result<DensifyReport> {
    let n = cloud.len();
    if stats.accum.len() != n || stats.count.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "gradient statistics cover {} primitives, the cloud has {n}",
            stats.accum.len()
        )));
    }
    let pruned: Vec<bool> = (0..n).map(|i| cloud.opacity(i) < config.prune_opacity).collect();
    let mut clone = Vec::new();
    let mut split = Vec::new();
    for i in 0..n {
        if pruned[i] || stats.average(i) < config.grad_threshold {
            continue;
        }
        let largest = cloud.scale(i).into_iter().fold(f64::MIN, f64::max);
        if largest > config.percent_dense * extent {
            split.push(i);
        } else {
            clone.push(i);
        }
    }
    let survivors = pruned.iter().filter(|&&p| !p).count();
    let prune_only = survivors + clone.len() + split.len() > config.max_primitives;
    if prune_only {
        clone.clear();
        split.clear();
    }

    let mut remap = Vec::with_capacity(survivors + clone.len() + 2 * split.len());
    let mut removed = vec![false; n];
    for &i in &split {
        removed[i] = true;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| !pruned[i] && !removed[i]).collect();
    let mut out = cloud.select(&kept);
    remap.extend(kept.iter().map(|&i| Origin::Kept(i)));

    for &i in &clone {
        out.push(cloud.primitive(i))?;
        remap.push(Origin::New(i));
    }
    let mut rng = rng::stream(seed, iteration as u64, Purpose::Densify);
    let shrink = config.split_factor.ln();
    for &i in &split {
        let parent = cloud.primitive(i);
        let r = rotation_matrix(parent.rotation);
        let s = cloud.scale(i);
        for _ in 0..2 {
            let z: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let offset = la::mat_vec(&r, [s[0] * z[0], s[1] * z[1], s[2] * z[2]]);
            let mut child = parent.clone();
            child.position = la::add(parent.position, offset);
            child.log_scale = parent.log_scale.map(|v| v - shrink);
            out.push(child)?;
            remap.push(Origin::New(i));
        }
    }
    out.validate()?;
    *cloud = out;
    Ok(DensifyReport {
        cloned: clone.len(),
        split: split.len(),
        pruned: pruned.iter().filter(|&&p| p).count(),
        prune_only,
        remap,
    })
}
