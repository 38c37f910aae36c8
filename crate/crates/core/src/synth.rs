//! Seeded synthetic scenes with full ground truth: clustered Gaussians seen
//! by an orbiting camera rig through a known water medium.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{quat_normalize, GaussianCloud, Primitive, SEMANTIC_DIM};
use crate::la;
use crate::losses::{DepthPrior, FrameKind};
use crate::medium::{self, MediumParams};
use crate::raster::{self, RasterOptions};
use crate::rng::{self, Purpose};
use crate::scene::{default_holdout, GroundTruth, InitPoint, Scene};
use crate::semantics::{self, BBox, EmbeddingProjector, SemanticRegion};
use crate::sh;

pub const MAX_SYNTH_GAUSSIANS: usize = 5000;

const FLOOR_HEIGHT: f64 = -6.0;
const FLOOR_THICKNESS: f64 = 0.02;
const FLOOR_PER_RING: usize = 8;
const FLOOR_INNER_RADIUS: f64 = 1.0;
const FLOOR_OUTER_RADIUS: f64 = 16.0;
const FLOOR_MAX_ANGULAR_SIZE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_gaussians: usize,
    pub n_views: usize,
    pub medium: MediumParams,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub clusters: usize,
    /// Share of the Gaussians laid out as a flat seabed under the clusters.
    /// The seabed carries the label `clusters` and never gets a region.
    pub floor_fraction: f64,
    pub sh_degree: usize,
    /// Camera distances to the origin are spread over this range.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Standard deviation of the noise added to initialization points.
    pub init_noise: f64,
    /// Pixels with ground-truth accumulated opacity above this enter the depth mask.
    pub depth_mask_alpha: f64,
    /// Every `k`-th view (1-based) is flagged as an interpolated frame; 0 disables.
    pub interpolated_every: usize,
    pub projector_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_gaussians: 200,
            n_views: 8,
            medium: MediumParams::from_physical([0.2; 3], [0.2; 3], [0.1, 0.3, 0.4]).expect("valid medium"),
            width: 64,
            height: 64,
            focal: 80.0,
            clusters: 4,
            floor_fraction: 0.3,
            sh_degree: 0,
            radius_min: 3.5,
            radius_max: 6.0,
            init_noise: 0.03,
            depth_mask_alpha: 0.5,
            interpolated_every: 0,
            projector_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn new(seed: u64, n_gaussians: usize, n_views: usize, medium: MediumParams) -> Self {
        Self {
            seed,
            n_gaussians,
            n_views,
            medium,
            ..Self::default()
        }
    }
}

/// Relative share of the Gaussians in each cluster; cluster 0 is the densest.
fn cluster_sizes(n: usize, clusters: usize) -> Vec<usize> {
    let weights: Vec<f64> = (0..clusters).map(|k| 1.0 / (1.0 + 0.5 * k as f64)).collect();
    let total: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights
        .iter()
        .map(|w| (w / total * n as f64).floor() as usize)
        .collect();
    let mut k = 0;
    while sizes.iter().sum::<usize>() < n {
        sizes[k % clusters] += 1;
        k += 1;
    }
    sizes
}

/// Ground-truth cloud and per-Gaussian cluster labels.
pub fn synth_cloud(config: &SynthConfig) -> Result<(GaussianCloud, Vec<usize>)> {
    let cameras = synth_cameras(config)?;
    let mut rng = rng::stream(config.seed, 0, Purpose::Synth);
    let mut cloud = GaussianCloud::new(config.sh_degree)?;
    let stride = cloud.sh_stride();
    let k = config.clusters.max(1);
    let n_floor = ((config.floor_fraction.clamp(0.0, 0.9) * config.n_gaussians as f64).round() as usize)
        .min(config.n_gaussians.saturating_sub(k));
    let sizes = cluster_sizes(config.n_gaussians - n_floor, k);
    let jitter = Normal::new(0.0, 0.22).expect("valid normal");
    let mut labels = Vec::with_capacity(config.n_gaussians);
    for (c, &size) in sizes.iter().enumerate() {
        let angle = 2.0 * PI * c as f64 / k as f64 + rng.random_range(-0.2..0.2);
        let center = [0.75 * angle.cos(), rng.random_range(-0.25..0.25), 0.75 * angle.sin()];
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.9));
        for _ in 0..size {
            let offset: [f64; 3] = std::array::from_fn(|_| jitter.sample(&mut rng));
            let mut coeffs = vec![0.0; stride];
            for ch in 0..3 {
                let color = (base[ch] + rng.random_range(-0.08..0.08)).clamp(0.05, 0.95);
                coeffs[ch] = sh::dc_from_color(color);
            }
            let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            cloud.push(Primitive {
                position: la::add(center, offset),
                log_scale: std::array::from_fn(|_| rng.random_range(0.05f64..0.14).ln()),
                rotation: quat_normalize(q),
                sh: coeffs,
                opacity_logit: crate::gaussian::logit(rng.random_range(0.6..0.95)),
                semantic: [0.0; SEMANTIC_DIM],
            })?;
            labels.push(c);
        }
    }
    // Seabed in concentric rings whose spacing grows with distance, so that
    // every camera ray ends on it and path lengths span a wide range.
    let rings = (n_floor / FLOOR_PER_RING).max(1);
    let growth = if rings > 1 {
        (FLOOR_OUTER_RADIUS / FLOOR_INNER_RADIUS).powf(1.0 / (rings - 1) as f64)
    } else {
        1.0
    };
    for f in 0..n_floor {
        let ring = f * rings / n_floor;
        let first = (ring * n_floor).div_ceil(rings);
        let count = ((ring + 1) * n_floor).div_ceil(rings) - first;
        let r = FLOOR_INNER_RADIUS * growth.powi(ring as i32);
        let theta =
            2.0 * PI * ((f - first) as f64 + 0.5 * (ring % 2) as f64) / count as f64 + rng.random_range(-0.1..0.1);
        let position = [
            r * theta.cos(),
            FLOOR_HEIGHT + rng.random_range(-0.03..0.03),
            r * theta.sin(),
        ];
        // Keep the footprint bounded in every view: a wide disk just in front
        // of a camera would project over the whole frame.
        let nearest = cameras
            .iter()
            .map(|c| c.to_camera(position)[2])
            .filter(|&z| z > 0.0)
            .fold(f64::INFINITY, f64::min);
        let sigma = (0.45 * r * (2.0 * PI / count as f64).max(growth - 1.0)).min(FLOOR_MAX_ANGULAR_SIZE * nearest);
        let mut coeffs = vec![0.0; stride];
        let tint = rng.random_range(-0.1..0.1);
        for (ch, base) in [0.62, 0.55, 0.38].into_iter().enumerate() {
            coeffs[ch] = sh::dc_from_color(base + tint + rng.random_range(-0.05..0.05));
        }
        cloud.push(Primitive {
            position,
            log_scale: [sigma, FLOOR_THICKNESS, sigma].map(f64::ln),
            rotation: [1.0, 0.0, 0.0, 0.0],
            sh: coeffs,
            opacity_logit: crate::gaussian::logit(0.95),
            semantic: [0.0; SEMANTIC_DIM],
        })?;
        labels.push(k);
    }
    Ok((cloud, labels))
}

/// Orbit rig around the origin with varied distance and elevation.
pub fn synth_cameras(config: &SynthConfig) -> Result<Vec<Camera>> {
    let mut rng = rng::stream(config.seed, 1, Purpose::Synth);
    (0..config.n_views)
        .map(|v| {
            let azimuth: f64 = 2.0 * PI * v as f64 / config.n_views as f64 + rng.random_range(-0.15..0.15);
            let elevation: f64 = [0.95, 1.15, 1.05, 1.25][v % 4] + rng.random_range(-0.04..0.04);
            let t = (v as f64 * 0.618_033_988_75).fract();
            let radius = config.radius_min + t * (config.radius_max - config.radius_min);
            let eye = [
                radius * elevation.cos() * azimuth.cos(),
                radius * elevation.sin(),
                radius * elevation.cos() * azimuth.sin(),
            ];
            Camera::look_at(
                eye,
                [0.0; 3],
                [0.0, 1.0, 0.0],
                config.focal,
                config.width,
                config.height,
            )
        })
        .collect()
}

/// Box around the projected centers of the cluster with the most visible
/// members in this view, padded by one pixel.
fn cluster_region(cloud: &GaussianCloud, labels: &[usize], clusters: usize, camera: &Camera) -> Option<(usize, BBox)> {
    let mut points: Vec<Vec<[f64; 2]>> = vec![Vec::new(); clusters];
    for i in 0..cloud.len() {
        let cov = cloud.covariance(i).ok()?;
        if let Some(p) = raster::project_gaussian(cloud.positions[i], &cov, camera) {
            let [x, y] = p.mean2d;
            if labels[i] < clusters
                && x >= 0.0
                && y >= 0.0
                && x <= (camera.width - 1) as f64
                && y <= (camera.height - 1) as f64
            {
                points[labels[i]].push(p.mean2d);
            }
        }
    }
    let (best, pts) = points
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))?;
    if pts.len() < 2 {
        return None;
    }
    let lo = |k: usize| pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min) - 1.0;
    let hi = |k: usize| pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let bbox = BBox::new(lo(0), lo(1), hi(0), hi(1))
        .ok()?
        .clamped(camera.width, camera.height)?;
    Some((best, bbox))
}

/// Renders the ground-truth cloud from every camera, applies the medium and
/// quantizes to 16 bits. Regions carry the pseudo-embedding of their
/// cluster, so all regions of one cluster share a target.
pub fn synth_scene(config: &SynthConfig) -> Result<Scene> {
    if config.n_gaussians == 0 || config.n_gaussians > MAX_SYNTH_GAUSSIANS {
        return Err(Error::InvalidParameter(format!(
            "n_gaussians must be in 1..={MAX_SYNTH_GAUSSIANS}"
        )));
    }
    if config.n_views < 2 {
        return Err(Error::InvalidParameter(
            "a synthetic scene needs at least two views".into(),
        ));
    }
    let (cloud, labels) = synth_cloud(config)?;
    let cameras = synth_cameras(config)?;
    let projector = EmbeddingProjector::new(config.projector_seed);
    let options = RasterOptions::default();

    let mut images = Vec::with_capacity(config.n_views);
    let mut clean_images = Vec::with_capacity(config.n_views);
    let mut priors = Vec::with_capacity(config.n_views);
    let mut regions = Vec::new();
    let mut ids = Vec::with_capacity(config.n_views);
    for (v, camera) in cameras.iter().enumerate() {
        let id = format!("view_{v:03}");
        let render = raster::rasterize_with(&cloud, camera, &options);
        let mut observed = medium::apply_medium(&render.color, &render.depth, &config.medium)?;
        observed.quantize_16bit();
        let mut clean = render.color.clone();
        clean.quantize_16bit();
        let mask = render
            .alpha_accum
            .as_slice()
            .iter()
            .map(|&a| a > config.depth_mask_alpha)
            .collect();
        priors.push(Some(DepthPrior::new(render.depth.clone(), mask)?));
        if let Some((cluster, bbox)) = cluster_region(&cloud, &labels, config.clusters.max(1), camera) {
            let raw = semantics::pseudo_embedding(config.seed, cluster as u64, projector.raw_dim());
            regions.push(SemanticRegion::new(id.clone(), bbox, raw, &projector)?);
        }
        images.push(observed);
        clean_images.push(clean);
        ids.push(id);
    }

    let mut rng = rng::stream(config.seed, 2, Purpose::Synth);
    let noise = Normal::new(0.0, config.init_noise.max(0.0)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let init_points = (0..cloud.len())
        .map(|i| {
            let rgb = sh::eval_sh_color(cloud.sh(i), [0.0, 0.0, 1.0]).expect("valid layout");
            InitPoint {
                position: std::array::from_fn(|k| cloud.positions[i][k] + noise.sample(&mut rng)),
                color: rgb.map(|c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0)),
            }
        })
        .collect();

    let frame_kinds = (0..config.n_views)
        .map(|v| {
            if config.interpolated_every > 0 && (v + 1) % config.interpolated_every == 0 {
                FrameKind::Interpolated
            } else {
                FrameKind::Keyframe
            }
        })
        .collect();
    let scene = Scene {
        ids,
        cameras,
        images,
        frame_kinds,
        depth_priors: priors,
        regions,
        holdout: default_holdout(config.n_views),
        init_points: Some(init_points),
        ground_truth: Some(GroundTruth {
            clean: clean_images,
            medium: config.medium,
            cloud,
            clusters: labels,
        }),
        warnings: Vec::new(),
    };
    scene.validate()?;
    Ok(scene)
}
