//! Real spherical harmonics up to degree 3 in the sign convention used by 3DGS
//! renderers, with a `+0.5` offset on the decoded color.

use crate::error::{Error, Result};
use crate::la::Vec3;

pub const MAX_DEGREE: usize = 3;
pub const MAX_BASIS: usize = 16;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

#[inline]
pub const fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn degree_for_count(count: usize) -> Result<usize> {
    (0..=MAX_DEGREE)
        .find(|&d| basis_count(d) == count)
        .ok_or_else(|| Error::InvalidParameter(format!("{count} is not a valid sh basis count")))
}

/// DC coefficient that decodes to `value` for a single channel.
#[inline]
pub fn dc_from_color(value: f64) -> f64 {
    (value - 0.5) / C0
}

/// Basis values and their gradients w.r.t. the (unnormalized) direction
/// components, for the first `count` bases.
pub(crate) fn basis_with_grad(dir: Vec3, count: usize) -> ([f64; MAX_BASIS], [Vec3; MAX_BASIS]) {
    let [x, y, z] = dir;
    let mut v = [0.0; MAX_BASIS];
    let mut g = [[0.0; 3]; MAX_BASIS];
    v[0] = C0;
    if count > 1 {
        v[1] = -C1 * y;
        g[1] = [0.0, -C1, 0.0];
        v[2] = C1 * z;
        g[2] = [0.0, 0.0, C1];
        v[3] = -C1 * x;
        g[3] = [-C1, 0.0, 0.0];
    }
    if count > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        v[4] = C2[0] * x * y;
        g[4] = [C2[0] * y, C2[0] * x, 0.0];
        v[5] = C2[1] * y * z;
        g[5] = [0.0, C2[1] * z, C2[1] * y];
        v[6] = C2[2] * (2.0 * zz - xx - yy);
        g[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        v[7] = C2[3] * x * z;
        g[7] = [C2[3] * z, 0.0, C2[3] * x];
        v[8] = C2[4] * (xx - yy);
        g[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
        if count > 9 {
            v[9] = C3[0] * y * (3.0 * xx - yy);
            g[9] = [6.0 * C3[0] * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
            v[10] = C3[1] * x * y * z;
            g[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
            v[11] = C3[2] * y * (4.0 * zz - xx - yy);
            g[11] = [
                -2.0 * C3[2] * x * y,
                C3[2] * (4.0 * zz - xx - 3.0 * yy),
                8.0 * C3[2] * y * z,
            ];
            v[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            g[12] = [
                -6.0 * C3[3] * x * z,
                -6.0 * C3[3] * y * z,
                C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            v[13] = C3[4] * x * (4.0 * zz - xx - yy);
            g[13] = [
                C3[4] * (4.0 * zz - 3.0 * xx - yy),
                -2.0 * C3[4] * x * y,
                8.0 * C3[4] * x * z,
            ];
            v[14] = C3[5] * z * (xx - yy);
            g[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
            v[15] = C3[6] * x * (xx - 3.0 * yy);
            g[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0];
        }
    }
    (v, g)
}

fn check_coeffs(coeffs: &[f64]) -> Result<usize> {
    if !coeffs.len().is_multiple_of(3) {
        return Err(Error::InvalidParameter(format!(
            "{} sh values is not a multiple of 3 channels",
            coeffs.len()
        )));
    }
    let count = coeffs.len() / 3;
    degree_for_count(count)?;
    Ok(count)
}

/// `Σ_k c_k · Y_k(dir)` per channel, without offset or clamping. Linear in `coeffs`.
pub fn eval_sh_unclamped(coeffs: &[f64], view_dir: Vec3) -> Result<[f64; 3]> {
    let count = check_coeffs(coeffs)?;
    let (basis, _) = basis_with_grad(view_dir, count);
    let mut rgb = [0.0; 3];
    for (k, y) in basis.iter().take(count).enumerate() {
        for c in 0..3 {
            rgb[c] += coeffs[k * 3 + c] * y;
        }
    }
    Ok(rgb)
}

/// View-dependent color: SH sum plus 0.5, clamped below at 0.
///
/// `coeffs` is `K * 3` values laid out basis-major, with `K = (L + 1)^2` and `L <= 3`.
pub fn eval_sh_color(coeffs: &[f64], view_dir: Vec3) -> Result<[f64; 3]> {
    let raw = eval_sh_unclamped(coeffs, view_dir)?;
    Ok(raw.map(|v| (v + 0.5).max(0.0)))
}

/// Forward evaluation that also reports which channels were clamped.
pub(crate) fn eval_with_mask(coeffs: &[f64], count: usize, dir: Vec3) -> ([f64; 3], [bool; 3]) {
    let (basis, _) = basis_with_grad(dir, count);
    let mut rgb = [0.0; 3];
    for (k, y) in basis.iter().take(count).enumerate() {
        for c in 0..3 {
            rgb[c] += coeffs[k * 3 + c] * y;
        }
    }
    let mut clamped = [false; 3];
    for c in 0..3 {
        let v = rgb[c] + 0.5;
        if v < 0.0 {
            clamped[c] = true;
            rgb[c] = 0.0;
        } else {
            rgb[c] = v;
        }
    }
    (rgb, clamped)
}

/// Backward for [`eval_with_mask`]: accumulates `dL/dcoeffs` and returns `dL/ddir`.
pub(crate) fn eval_backward(
    coeffs: &[f64],
    count: usize,
    dir: Vec3,
    clamped: [bool; 3],
    grad_rgb: [f64; 3],
    grad_coeffs: &mut [f64],
) -> Vec3 {
    let g = [
        if clamped[0] { 0.0 } else { grad_rgb[0] },
        if clamped[1] { 0.0 } else { grad_rgb[1] },
        if clamped[2] { 0.0 } else { grad_rgb[2] },
    ];
    let (basis, basis_grad) = basis_with_grad(dir, count);
    let mut g_dir = [0.0; 3];
    for k in 0..count {
        let mut weight = 0.0;
        for c in 0..3 {
            grad_coeffs[k * 3 + c] += basis[k] * g[c];
            weight += coeffs[k * 3 + c] * g[c];
        }
        for a in 0..3 {
            g_dir[a] += basis_grad[k][a] * weight;
        }
    }
    g_dir
}
