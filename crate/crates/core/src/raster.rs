//! Screen-space projection of 3D Gaussians and tiled front-to-back alpha
//! compositing of color, depth and accumulated opacity.
//!
//! Per pixel the contributing Gaussians are visited in ascending camera depth
//! (ties broken by primitive index). Each contributes
//! `α' = min(sigmoid(opacity) · G(x), alpha_max)` and blending stops once the
//! transmittance would fall below `transmittance_cutoff`. Depth is composited
//! with the same weights and normalized by the accumulated opacity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::gaussian::{self, GaussianCloud};
use crate::image::{Image, Plane};
use crate::la::{self, Mat3, Vec3};
use crate::sh;

pub const NEAR_PLANE: f64 = 0.01;
/// Screen-space low-pass dilation added to every projected covariance.
pub const LOW_PASS: f64 = 0.3;
pub const TILE_SIZE: usize = 16;
/// Floor for the accumulated-opacity normalization of depth.
pub const DEPTH_ALPHA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterOptions {
    pub alpha_max: f64,
    /// Blending stops before a Gaussian that would push transmittance below this.
    /// Zero disables early termination.
    pub transmittance_cutoff: f64,
    /// Contributions with `α' < alpha_min` are skipped. Tile culling radii are
    /// derived from it, so zero puts every visible Gaussian in every tile.
    pub alpha_min: f64,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self {
            alpha_max: 0.99,
            transmittance_cutoff: 1e-4,
            alpha_min: 1.0 / 255.0,
        }
    }
}

impl RasterOptions {
    /// No early termination and no contribution skipping: the composite is a
    /// piecewise-smooth function of the parameters.
    pub fn exact() -> Self {
        Self {
            alpha_max: 0.99,
            transmittance_cutoff: 0.0,
            alpha_min: 0.0,
        }
    }
}

/// Result of projecting one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    /// Camera-space depth.
    pub z: f64,
}

struct ProjectionDetail {
    p_cam: Vec3,
    mean2d: [f64; 2],
    /// `(a, b, c)` of `[[a, b], [b, c]]`, dilated.
    cov2d: [f64; 3],
    conic: [f64; 3],
    /// `T = J · W`, the 2x3 linearized projection.
    t: [[f64; 3]; 2],
}

fn project_detail(mean: Vec3, cov3d: &Mat3, camera: &Camera) -> Option<ProjectionDetail> {
    let p_cam = camera.to_camera(mean);
    let [x, y, z] = p_cam;
    if !(z > NEAR_PLANE) {
        return None;
    }
    let inv_z = 1.0 / z;
    let mean2d = [camera.fx * x * inv_z + camera.cx, camera.fy * y * inv_z + camera.cy];
    let j = [
        [camera.fx * inv_z, 0.0, -camera.fx * x * inv_z * inv_z],
        [0.0, camera.fy * inv_z, -camera.fy * y * inv_z * inv_z],
    ];
    let w = &camera.rotation;
    let mut t = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            t[r][c] = j[r][0] * w[0][c] + j[r][1] * w[1][c] + j[r][2] * w[2][c];
        }
    }
    // T Σ Tᵀ
    let mut ts = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            ts[r][c] = t[r][0] * cov3d[0][c] + t[r][1] * cov3d[1][c] + t[r][2] * cov3d[2][c];
        }
    }
    let a = la::dot(ts[0], t[0]) + LOW_PASS;
    let b = la::dot(ts[0], t[1]);
    let c = la::dot(ts[1], t[1]) + LOW_PASS;
    let cov2d = [a, b, c];
    let conic = la::sym2_inverse(cov2d)?;
    if !la::all_finite(&mean2d) || !la::all_finite(&conic) {
        return None;
    }
    let sigma = la::sym2_max_eigenvalue(cov2d).sqrt();
    let (w_max, h_max) = ((camera.width - 1) as f64, (camera.height - 1) as f64);
    if mean2d[0] + 3.0 * sigma < 0.0
        || mean2d[0] - 3.0 * sigma > w_max
        || mean2d[1] + 3.0 * sigma < 0.0
        || mean2d[1] - 3.0 * sigma > h_max
    {
        return None;
    }
    Some(ProjectionDetail {
        p_cam,
        mean2d,
        cov2d,
        conic,
        t,
    })
}

/// EWA projection: `cov2d = J W Σ Wᵀ Jᵀ + 0.3 I`.
///
/// Returns `None` (culled) when the center is at or before the near plane,
/// when the center lies more than 3σ outside the image, or when the dilated
/// covariance is singular.
pub fn project_gaussian(mean: Vec3, cov3d: &Mat3, camera: &Camera) -> Option<Projection> {
    project_detail(mean, cov3d, camera).map(|d| Projection {
        mean2d: d.mean2d,
        cov2d: [[d.cov2d[0], d.cov2d[1]], [d.cov2d[1], d.cov2d[2]]],
        z: d.p_cam[2],
    })
}

#[inline]
fn gaussian_weight(conic: [f64; 3], dx: f64, dy: f64) -> f64 {
    let power = -0.5 * (conic[0] * dx * dx + conic[2] * dy * dy) - conic[1] * dx * dy;
    power.exp()
}

/// `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`; zero when `cov2d` is not invertible.
pub fn eval_gaussian_2d(x: [f64; 2], mean2d: [f64; 2], cov2d: [[f64; 2]; 2]) -> f64 {
    match la::sym2_inverse([cov2d[0][0], 0.5 * (cov2d[0][1] + cov2d[1][0]), cov2d[1][1]]) {
        Some(conic) => gaussian_weight(conic, x[0] - mean2d[0], x[1] - mean2d[1]),
        None => 0.0,
    }
}

/// Unit direction from the camera center to `position`, used for SH lookup.
pub fn view_direction(position: Vec3, camera: &Camera) -> Vec3 {
    la::normalize(la::sub(position, camera.center()))
}

/// A projected, shaded Gaussian ready for compositing.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub mean2d: [f64; 2],
    pub cov2d: [f64; 3],
    pub conic: [f64; 3],
    pub t: [[f64; 3]; 2],
    pub p_cam: Vec3,
    pub opacity: f64,
    pub color: [f64; 3],
    pub clamped: [bool; 3],
    pub dir: Vec3,
    pub dist: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// Clean radiance, before any medium is applied.
    pub color: Image,
    /// Expected camera-space depth, normalized by accumulated opacity.
    pub depth: Plane,
    pub alpha_accum: Plane,
    pub contrib_count: Vec<u32>,
}

/// Forward render plus everything the backward pass replays.
#[derive(Clone, Debug)]
pub struct Frame {
    pub output: RenderOutput,
    pub(crate) splats: Vec<Splat>,
    pub(crate) tiles: Vec<Vec<u32>>,
    pub(crate) options: RasterOptions,
    tiles_x: usize,
}

impl Frame {
    /// Cloud indices of the Gaussians that survived culling, in blend order.
    pub fn visible(&self) -> impl Iterator<Item = usize> + '_ {
        self.splats.iter().map(|s| s.index)
    }

    pub fn width(&self) -> usize {
        self.output.color.width()
    }

    pub fn height(&self) -> usize {
        self.output.color.height()
    }
}

fn tile_radius(opacity: f64, cov2d: [f64; 3], alpha_min: f64) -> f64 {
    if alpha_min <= 0.0 {
        return f64::INFINITY;
    }
    // Outside this radius α' = opacity·G < alpha_min for every pixel.
    let reach = 2.0 * (opacity / alpha_min).ln().max(0.0) * la::sym2_max_eigenvalue(cov2d);
    reach.sqrt() + 1.0
}

fn prepare_splats(cloud: &GaussianCloud, camera: &Camera, options: &RasterOptions) -> Vec<Splat> {
    let basis = cloud.sh_basis_count();
    let center = camera.center();
    let mut splats: Vec<Splat> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| {
            let cov3d = cloud.covariance(i).ok()?;
            let position = cloud.positions[i];
            if !la::all_finite(&position) {
                return None;
            }
            let d = project_detail(position, &cov3d, camera)?;
            let offset = la::sub(position, center);
            let dist = la::norm(offset);
            let dir = la::normalize(offset);
            let (color, clamped) = sh::eval_with_mask(cloud.sh(i), basis, dir);
            let opacity = cloud.opacity(i);
            if !opacity.is_finite() || !la::all_finite(&color) {
                return None;
            }
            Some(Splat {
                index: i,
                mean2d: d.mean2d,
                cov2d: d.cov2d,
                conic: d.conic,
                t: d.t,
                p_cam: d.p_cam,
                opacity,
                color,
                clamped,
                dir,
                dist,
                radius: tile_radius(opacity, d.cov2d, options.alpha_min),
            })
        })
        .collect();
    splats.sort_by(|a, b| a.p_cam[2].total_cmp(&b.p_cam[2]).then(a.index.cmp(&b.index)));
    splats
}

fn bin_tiles(splats: &[Splat], width: usize, height: usize) -> (usize, Vec<Vec<u32>>) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let (w_max, h_max) = ((width - 1) as f64, (height - 1) as f64);
    for (k, s) in splats.iter().enumerate() {
        let [mx, my] = s.mean2d;
        let r = s.radius;
        if mx + r < 0.0 || mx - r > w_max || my + r < 0.0 || my - r > h_max {
            continue;
        }
        let span = |lo: f64, hi: f64, n: usize| {
            let a = ((lo / TILE_SIZE as f64).floor().max(0.0) as usize).min(n - 1);
            let b = ((hi / TILE_SIZE as f64).floor().max(0.0) as usize).min(n - 1);
            (a, b)
        };
        let (x0, x1) = span(mx - r, mx + r, tiles_x);
        let (y0, y1) = span(my - r, my + r, tiles_y);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    (tiles_x, tiles)
}

#[derive(Clone, Copy, Debug, Default)]
struct PixelSample {
    color: [f64; 3],
    depth_num: f64,
    alpha: f64,
    count: u32,
}

/// One contributor of a pixel, recorded when the blend is replayed.
#[derive(Clone, Copy, Debug)]
struct Contribution {
    slot: usize,
    g: f64,
    alpha: f64,
    transmittance: f64,
    saturated: bool,
}

#[inline]
fn blend_pixel(
    list: &[u32],
    splats: &[Splat],
    px: f64,
    py: f64,
    options: &RasterOptions,
    mut record: Option<&mut Vec<Contribution>>,
) -> PixelSample {
    let mut out = PixelSample::default();
    let mut t = 1.0;
    for (slot, &k) in list.iter().enumerate() {
        let s = &splats[k as usize];
        let g = gaussian_weight(s.conic, px - s.mean2d[0], py - s.mean2d[1]);
        let raw = s.opacity * g;
        let alpha = raw.min(options.alpha_max);
        if alpha < options.alpha_min {
            continue;
        }
        let t_next = t * (1.0 - alpha);
        if t_next < options.transmittance_cutoff {
            break;
        }
        let w = alpha * t;
        for c in 0..3 {
            out.color[c] += s.color[c] * w;
        }
        out.depth_num += s.p_cam[2] * w;
        out.alpha += w;
        out.count += 1;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Contribution {
                slot,
                g,
                alpha,
                transmittance: t,
                saturated: raw > options.alpha_max,
            });
        }
        t = t_next;
    }
    out
}

fn tile_pixels(tile: usize, tiles_x: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(width);
    let y1 = (y0 + TILE_SIZE).min(height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Renders with [`RasterOptions::default`].
pub fn rasterize(cloud: &GaussianCloud, camera: &Camera) -> RenderOutput {
    render(cloud, camera, &RasterOptions::default()).output
}

pub fn rasterize_with(cloud: &GaussianCloud, camera: &Camera, options: &RasterOptions) -> RenderOutput {
    render(cloud, camera, options).output
}

/// Full forward pass, keeping the sorted splats and tile lists for backward.
pub fn render(cloud: &GaussianCloud, camera: &Camera, options: &RasterOptions) -> Frame {
    let (width, height) = (camera.width, camera.height);
    let splats = prepare_splats(cloud, camera, options);
    let (tiles_x, tiles) = bin_tiles(&splats, width, height);

    let tile_samples: Vec<Vec<((usize, usize), PixelSample)>> = tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            tile_pixels(tile, tiles_x, width, height)
                .map(|(x, y)| ((x, y), blend_pixel(list, &splats, x as f64, y as f64, options, None)))
                .collect()
        })
        .collect();

    let mut color = Image::zeros(width, height);
    let mut depth = Plane::zeros(width, height);
    let mut alpha_accum = Plane::zeros(width, height);
    let mut contrib_count = vec![0u32; width * height];
    for samples in tile_samples {
        for ((x, y), s) in samples {
            let idx = y * width + x;
            color.set_pixel(idx, s.color);
            depth.set(x, y, s.depth_num / s.alpha.max(DEPTH_ALPHA_FLOOR));
            alpha_accum.set(x, y, s.alpha);
            contrib_count[idx] = s.count;
        }
    }
    Frame {
        output: RenderOutput {
            color,
            depth,
            alpha_accum,
            contrib_count,
        },
        splats,
        tiles,
        options: *options,
        tiles_x,
    }
}

/// Gradients of a scalar loss w.r.t. one splat's screen-space quantities.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct SplatGrad {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub color: [f64; 3],
    pub z: f64,
    /// w.r.t. the sigmoid-mapped opacity.
    pub opacity: f64,
}

impl SplatGrad {
    fn add(&mut self, other: &SplatGrad) {
        for k in 0..2 {
            self.mean2d[k] += other.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += other.conic[k];
            self.color[k] += other.color[k];
        }
        self.z += other.z;
        self.opacity += other.opacity;
    }
}

/// Backward through compositing. `grad_color` and `grad_depth` are `dL/d(color)`
/// and `dL/d(depth)` per pixel; returns one entry per splat (blend order).
pub(crate) fn composite_backward(frame: &Frame, grad_color: &Image, grad_depth: &Plane) -> Vec<SplatGrad> {
    let (width, height) = (frame.width(), frame.height());
    let splats = &frame.splats;
    let options = &frame.options;

    let per_tile: Vec<Vec<SplatGrad>> = frame
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut local = vec![SplatGrad::default(); list.len()];
            let mut contribs = Vec::new();
            for (x, y) in tile_pixels(tile, frame.tiles_x, width, height) {
                let (px, py) = (x as f64, y as f64);
                contribs.clear();
                let sample = blend_pixel(list, splats, px, py, options, Some(&mut contribs));
                if contribs.is_empty() {
                    continue;
                }
                let idx = y * width + x;
                let gc = grad_color.pixel(idx);
                let gd = grad_depth.get(x, y);
                let denom = sample.alpha.max(DEPTH_ALPHA_FLOOR);
                let g_depth_num = gd / denom;
                let g_alpha = if sample.alpha > DEPTH_ALPHA_FLOOR {
                    -gd * sample.depth_num / (sample.alpha * sample.alpha)
                } else {
                    0.0
                };
                // Composite of everything behind the current contributor,
                // relative to the transmittance just after it.
                let mut behind_color = [0.0; 3];
                let mut behind_depth = 0.0;
                let mut behind_alpha = 0.0;
                for c in contribs.iter().rev() {
                    let s = &splats[list[c.slot] as usize];
                    let w = c.alpha * c.transmittance;
                    let out = &mut local[c.slot];
                    for ch in 0..3 {
                        out.color[ch] += gc[ch] * w;
                    }
                    out.z += g_depth_num * w;

                    let mut g_a = 0.0;
                    for ch in 0..3 {
                        g_a += (s.color[ch] - behind_color[ch]) * gc[ch];
                    }
                    g_a += (s.p_cam[2] - behind_depth) * g_depth_num;
                    g_a += (1.0 - behind_alpha) * g_alpha;
                    g_a *= c.transmittance;

                    for ch in 0..3 {
                        behind_color[ch] = c.alpha * s.color[ch] + (1.0 - c.alpha) * behind_color[ch];
                    }
                    behind_depth = c.alpha * s.p_cam[2] + (1.0 - c.alpha) * behind_depth;
                    behind_alpha = c.alpha + (1.0 - c.alpha) * behind_alpha;

                    if c.saturated {
                        continue;
                    }
                    out.opacity += g_a * c.g;
                    let g_g = g_a * s.opacity;
                    let dx = px - s.mean2d[0];
                    let dy = py - s.mean2d[1];
                    let [qa, qb, qc] = s.conic;
                    out.mean2d[0] += g_g * c.g * (qa * dx + qb * dy);
                    out.mean2d[1] += g_g * c.g * (qb * dx + qc * dy);
                    out.conic[0] += -0.5 * g_g * c.g * dx * dx;
                    out.conic[1] += -g_g * c.g * dx * dy;
                    out.conic[2] += -0.5 * g_g * c.g * dy * dy;
                }
            }
            local
        })
        .collect();

    let mut grads = vec![SplatGrad::default(); splats.len()];
    for (list, local) in frame.tiles.iter().zip(&per_tile) {
        for (&k, g) in list.iter().zip(local) {
            grads[k as usize].add(g);
        }
    }
    grads
}

/// Per-Gaussian parameter gradients produced by the geometry backward.
#[derive(Clone, Debug)]
pub(crate) struct GeometryGrads {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// `dL/d(mean2d)` in pixels, for densification statistics.
    pub mean2d: [f64; 2],
}

/// Backward through shading, projection and covariance construction.
/// SH gradients are accumulated straight into `grad_sh` (cloud layout).
pub(crate) fn geometry_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    frame: &Frame,
    splat_grads: &[SplatGrad],
    grad_sh: &mut [f64],
) -> Vec<(usize, GeometryGrads)> {
    let basis = cloud.sh_basis_count();
    let stride = cloud.sh_stride();
    let mut out = Vec::with_capacity(frame.splats.len());
    for (s, g) in frame.splats.iter().zip(splat_grads) {
        let i = s.index;
        let [x, y, z] = s.p_cam;
        let (fx, fy) = (camera.fx, camera.fy);
        let inv_z = 1.0 / z;
        let inv_z2 = inv_z * inv_z;

        // conic = inverse(cov2d)
        let [a, b, c] = s.cov2d;
        let det = a * c - b * b;
        let det2 = det * det;
        let [gqa, gqb, gqc] = g.conic;
        let g_a = gqa * (-c * c / det2) + gqb * (b * c / det2) + gqc * (-b * b / det2);
        let g_b = gqa * (2.0 * b * c / det2) + gqb * (-(a * c + b * b) / det2) + gqc * (2.0 * a * b / det2);
        let g_c = gqa * (-b * b / det2) + gqb * (a * b / det2) + gqc * (-a * a / det2);
        let gm = [[g_a, 0.5 * g_b], [0.5 * g_b, g_c]];

        // cov2d = T Σ Tᵀ + 0.3 I
        let cov3d = cloud.covariance(i).expect("validated during forward");
        let t = &s.t;
        let mut g_cov3d = [[0.0; 3]; 3];
        for p in 0..3 {
            for q in 0..3 {
                let mut acc = 0.0;
                for r in 0..2 {
                    for u in 0..2 {
                        acc += t[r][p] * gm[r][u] * t[u][q];
                    }
                }
                g_cov3d[p][q] = acc;
            }
        }
        // dL/dT = 2 Gm T Σ
        let mut g_t = [[0.0; 3]; 2];
        for r in 0..2 {
            for q in 0..3 {
                let mut acc = 0.0;
                for u in 0..2 {
                    for p in 0..3 {
                        acc += gm[r][u] * t[u][p] * cov3d[p][q];
                    }
                }
                g_t[r][q] = 2.0 * acc;
            }
        }
        // T = J W  =>  dL/dJ = dL/dT Wᵀ
        let w = &camera.rotation;
        let mut g_j = [[0.0; 3]; 2];
        for r in 0..2 {
            for k in 0..3 {
                g_j[r][k] = g_t[r][0] * w[k][0] + g_t[r][1] * w[k][1] + g_t[r][2] * w[k][2];
            }
        }

        let mut g_pc = [0.0; 3];
        // mean2d
        g_pc[0] += g.mean2d[0] * fx * inv_z;
        g_pc[1] += g.mean2d[1] * fy * inv_z;
        g_pc[2] += -g.mean2d[0] * fx * x * inv_z2 - g.mean2d[1] * fy * y * inv_z2;
        // depth
        g_pc[2] += g.z;
        // Jacobian entries
        g_pc[0] += g_j[0][2] * (-fx * inv_z2);
        g_pc[1] += g_j[1][2] * (-fy * inv_z2);
        g_pc[2] += g_j[0][0] * (-fx * inv_z2)
            + g_j[0][2] * (2.0 * fx * x * inv_z2 * inv_z)
            + g_j[1][1] * (-fy * inv_z2)
            + g_j[1][2] * (2.0 * fy * y * inv_z2 * inv_z);

        let mut g_pos = la::mat_t_vec(w, g_pc);

        // view-dependent color
        let g_dir = sh::eval_backward(
            cloud.sh(i),
            basis,
            s.dir,
            s.clamped,
            g.color,
            &mut grad_sh[i * stride..(i + 1) * stride],
        );
        let radial = la::dot(g_dir, s.dir);
        for k in 0..3 {
            g_pos[k] += (g_dir[k] - radial * s.dir[k]) / s.dist;
        }

        let (g_log_scale, g_rot) =
            gaussian::build_covariance_backward(cloud.log_scales[i], cloud.rotations[i], &g_cov3d);

        out.push((
            i,
            GeometryGrads {
                position: g_pos,
                log_scale: g_log_scale,
                rotation: g_rot,
                opacity_logit: g.opacity * s.opacity * (1.0 - s.opacity),
                mean2d: g.mean2d,
            },
        ));
    }
    out
}
