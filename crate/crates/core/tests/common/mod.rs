#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uwsplat::gaussian::{logit, quat_normalize};
use uwsplat::raster::{eval_gaussian_2d, project_gaussian, view_direction, DEPTH_ALPHA_FLOOR};
use uwsplat::sh::eval_sh_color;
use uwsplat::{Camera, GaussianCloud, MediumParams, Primitive, RasterOptions, RenderOutput, SEMANTIC_DIM};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` Gaussians scattered around the origin, in view of [`camera`].
pub fn random_cloud(rng: &mut impl Rng, n: usize, sh_degree: usize) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(sh_degree).unwrap();
    let stride = cloud.sh_stride();
    for _ in 0..n {
        let q = quat_normalize(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        cloud
            .push(Primitive {
                position: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                log_scale: std::array::from_fn(|_| rng.random_range(-3.0..-1.0)),
                rotation: q,
                sh: (0..stride).map(|_| rng.random_range(-0.5..0.5)).collect(),
                opacity_logit: logit(rng.random_range(0.05..0.95)),
                semantic: [0.0; SEMANTIC_DIM],
            })
            .unwrap();
    }
    cloud
}

pub fn camera(width: usize, height: usize) -> Camera {
    Camera::look_at(
        [0.3, -0.2, -4.0],
        [0.0; 3],
        [0.0, 1.0, 0.0],
        1.2 * width as f64,
        width,
        height,
    )
    .unwrap()
}

pub fn synth_medium() -> MediumParams {
    MediumParams::from_physical([0.2; 3], [0.2; 3], [0.1, 0.3, 0.4]).unwrap()
}

pub struct Oracle {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub count: Vec<u32>,
}

/// Blends every projected Gaussian at every pixel in depth order, no tiles.
pub fn brute_force(cloud: &GaussianCloud, camera: &Camera, options: &RasterOptions) -> Oracle {
    let mut visible: Vec<_> = (0..cloud.len())
        .filter_map(|i| {
            let p = project_gaussian(cloud.positions[i], &cloud.covariance(i).ok()?, camera)?;
            let color = eval_sh_color(cloud.sh(i), view_direction(cloud.positions[i], camera)).ok()?;
            Some((i, p, color))
        })
        .collect();
    visible.sort_by(|a, b| a.1.z.total_cmp(&b.1.z).then(a.0.cmp(&b.0)));

    let n = camera.width * camera.height;
    let mut out = Oracle {
        color: vec![[0.0; 3]; n],
        depth: vec![0.0; n],
        alpha: vec![0.0; n],
        count: vec![0; n],
    };
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (mut t, mut rgb, mut depth, mut acc, mut count) = (1.0, [0.0; 3], 0.0, 0.0, 0);
            for (i, p, color) in &visible {
                let g = eval_gaussian_2d([x as f64, y as f64], p.mean2d, p.cov2d);
                let alpha = (cloud.opacity(*i) * g).min(options.alpha_max);
                if alpha < options.alpha_min {
                    continue;
                }
                let t_next = t * (1.0 - alpha);
                if t_next < options.transmittance_cutoff {
                    break;
                }
                let w = alpha * t;
                for c in 0..3 {
                    rgb[c] += color[c] * w;
                }
                depth += p.z * w;
                acc += w;
                count += 1;
                t = t_next;
            }
            let k = y * camera.width + x;
            out.color[k] = rgb;
            out.depth[k] = depth / acc.max(DEPTH_ALPHA_FLOOR);
            out.alpha[k] = acc;
            out.count[k] = count;
        }
    }
    out
}

/// First pixel where the tiled render and the oracle differ in any bit.
pub fn first_mismatch(tiled: &RenderOutput, oracle: &Oracle) -> Option<String> {
    let w = tiled.color.width();
    (0..oracle.color.len()).find_map(|k| {
        let (x, y) = (k % w, k / w);
        let rgb = tiled.color.pixel(k);
        let same = (0..3).all(|c| rgb[c].to_bits() == oracle.color[k][c].to_bits())
            && tiled.depth.get(x, y).to_bits() == oracle.depth[k].to_bits()
            && tiled.alpha_accum.get(x, y).to_bits() == oracle.alpha[k].to_bits()
            && tiled.contrib_count[k] == oracle.count[k];
        (!same).then(|| {
            format!(
                "pixel ({x}, {y}): color {:?} vs {:?}, depth {} vs {}, alpha {} vs {}, count {} vs {}",
                rgb,
                oracle.color[k],
                tiled.depth.get(x, y),
                oracle.depth[k],
                tiled.alpha_accum.get(x, y),
                oracle.alpha[k],
                tiled.contrib_count[k],
                oracle.count[k]
            )
        })
    })
}

pub fn assert_bit_equal(tiled: &RenderOutput, oracle: &Oracle, label: &str) {
    if let Some(m) = first_mismatch(tiled, oracle) {
        panic!("{label}: {m}");
    }
}
