//! Gaussian primitive parameterization: covariance construction and the
//! per-primitive parameter storage the optimizer works on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::la::{self, Mat3, Vec3};
use crate::sh;

/// Width of the per-Gaussian semantic feature.
pub const SEMANTIC_DIM: usize = 32;

pub type Feature = [f64; SEMANTIC_DIM];

/// Learnable parameter groups. The first six are per-primitive, `Medium` holds
/// the nine global water-medium scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Position,
    Scale,
    Rotation,
    Sh,
    Opacity,
    Semantic,
    Medium,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Position,
        ParamGroup::Scale,
        ParamGroup::Rotation,
        ParamGroup::Sh,
        ParamGroup::Opacity,
        ParamGroup::Semantic,
        ParamGroup::Medium,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Scale => "scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Sh => "sh",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Semantic => "semantic",
            ParamGroup::Medium => "medium",
        }
    }

    /// Groups the stage-2 freeze mask is allowed to contain.
    pub fn is_freezable(self) -> bool {
        matches!(
            self,
            ParamGroup::Position | ParamGroup::Rotation | ParamGroup::Scale | ParamGroup::Semantic
        )
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown parameter group `{s}`")))
    }
}

/// Structure-of-arrays storage for N Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    sh_degree: usize,
    pub positions: Vec<Vec3>,
    pub log_scales: Vec<Vec3>,
    /// Quaternions as `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    /// `N * K * 3` coefficients, basis-major then channel.
    pub sh_coeffs: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub semantic_features: Vec<Feature>,
}

/// Everything needed to append one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: [f64; 4],
    pub sh: Vec<f64>,
    pub opacity_logit: f64,
    pub semantic: Feature,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Result<Self> {
        if sh_degree > sh::MAX_DEGREE {
            return Err(Error::InvalidParameter(format!(
                "sh degree {sh_degree} exceeds {}",
                sh::MAX_DEGREE
            )));
        }
        Ok(Self {
            sh_degree,
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            sh_coeffs: Vec::new(),
            opacity_logits: Vec::new(),
            semantic_features: Vec::new(),
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    /// Coefficients per channel, `(L + 1)^2`.
    #[inline]
    pub fn sh_basis_count(&self) -> usize {
        sh::basis_count(self.sh_degree)
    }

    #[inline]
    pub fn sh_stride(&self) -> usize {
        self.sh_basis_count() * 3
    }

    pub fn sh(&self, index: usize) -> &[f64] {
        let stride = self.sh_stride();
        &self.sh_coeffs[index * stride..(index + 1) * stride]
    }

    pub fn sh_mut(&mut self, index: usize) -> &mut [f64] {
        let stride = self.sh_stride();
        &mut self.sh_coeffs[index * stride..(index + 1) * stride]
    }

    pub fn push(&mut self, p: Primitive) -> Result<()> {
        if p.sh.len() != self.sh_stride() {
            return Err(Error::InvalidParameter(format!(
                "primitive carries {} sh values, cloud expects {}",
                p.sh.len(),
                self.sh_stride()
            )));
        }
        self.positions.push(p.position);
        self.log_scales.push(p.log_scale);
        self.rotations.push(p.rotation);
        self.sh_coeffs.extend_from_slice(&p.sh);
        self.opacity_logits.push(p.opacity_logit);
        self.semantic_features.push(p.semantic);
        Ok(())
    }

    pub fn primitive(&self, index: usize) -> Primitive {
        Primitive {
            position: self.positions[index],
            log_scale: self.log_scales[index],
            rotation: self.rotations[index],
            sh: self.sh(index).to_vec(),
            opacity_logit: self.opacity_logits[index],
            semantic: self.semantic_features[index],
        }
    }

    /// New cloud holding the listed primitives in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.sh_degree).expect("degree already validated");
        for &i in indices {
            out.push(self.primitive(i)).expect("same sh layout");
        }
        out
    }

    #[inline]
    pub fn opacity(&self, index: usize) -> f64 {
        sigmoid(self.opacity_logits[index])
    }

    #[inline]
    pub fn scale(&self, index: usize) -> Vec3 {
        let s = self.log_scales[index];
        [s[0].exp(), s[1].exp(), s[2].exp()]
    }

    pub fn covariance(&self, index: usize) -> Result<Mat3> {
        build_covariance(self.log_scales[index], self.rotations[index])
    }

    /// Checks the array-length and rotation invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lengths = [
            self.log_scales.len(),
            self.rotations.len(),
            self.opacity_logits.len(),
            self.semantic_features.len(),
        ];
        if lengths.iter().any(|&l| l != n) || self.sh_coeffs.len() != n * self.sh_stride() {
            return Err(Error::ShapeMismatch(
                "gaussian arrays do not share a leading dimension".into(),
            ));
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let norm = quat_norm(*q);
            if !(norm - 1.0).abs().le(&1e-6) {
                return Err(Error::InvalidParameter(format!("rotation {i} has norm {norm}")));
            }
        }
        Ok(())
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = quat_normalize(*q);
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn quat_norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: Vec3, angle: f64) -> [f64; 4] {
    let a = la::normalize(axis);
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a[0] * s, a[1] * s, a[2] * s]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Pulls a gradient on the rotation matrix back to the unit quaternion.
fn rotation_matrix_backward(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let gw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0] + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let gy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let gz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    [gw, gx, gy, gz]
}

/// `Σ = R · diag(exp(log_scale))² · Rᵀ`.
///
/// The quaternion is normalized before use, so the result only depends on its
/// direction; a zero or non-finite input is rejected.
pub fn build_covariance(log_scale: Vec3, rotation: [f64; 4]) -> Result<Mat3> {
    if !la::all_finite(&log_scale) || !la::all_finite(&rotation) {
        return Err(Error::InvalidParameter("non-finite scale or rotation".into()));
    }
    let n = quat_norm(rotation);
    if !(n > 0.0) {
        return Err(Error::InvalidParameter("zero-norm rotation".into()));
    }
    let r = rotation_matrix(quat_normalize(rotation));
    let s = [log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp()];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            m[i][k] = r[i][k] * s[k];
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];
            cov[i][j] = v;
            cov[j][i] = v;
        }
    }
    Ok(cov)
}

/// Gradient of a scalar loss w.r.t. `log_scale` and the raw (unnormalized)
/// quaternion, given `dL/dΣ` as a full symmetric matrix.
pub(crate) fn build_covariance_backward(log_scale: Vec3, rotation: [f64; 4], grad_cov: &Mat3) -> (Vec3, [f64; 4]) {
    let norm = quat_norm(rotation);
    let q = quat_normalize(rotation);
    let r = rotation_matrix(q);
    let s = [log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp()];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            m[i][k] = r[i][k] * s[k];
        }
    }
    // dL/dM = (G + Gᵀ) M
    let mut gm = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += (grad_cov[i][j] + grad_cov[j][i]) * m[j][k];
            }
            gm[i][k] = acc;
        }
    }
    let mut g_log_scale = [0.0; 3];
    let mut g_r = [[0.0; 3]; 3];
    for k in 0..3 {
        let mut acc = 0.0;
        for i in 0..3 {
            acc += gm[i][k] * r[i][k];
            g_r[i][k] = gm[i][k] * s[k];
        }
        g_log_scale[k] = acc * s[k];
    }
    let g_unit = rotation_matrix_backward(q, &g_r);
    // d(q/|q|)/dq = (I - q̂q̂ᵀ)/|q|
    let radial = g_unit[0] * q[0] + g_unit[1] * q[1] + g_unit[2] * q[2] + g_unit[3] * q[3];
    let g_raw = [
        (g_unit[0] - radial * q[0]) / norm,
        (g_unit[1] - radial * q[1]) / norm,
        (g_unit[2] - radial * q[2]) / norm,
        (g_unit[3] - radial * q[3]) / norm,
    ];
    (g_log_scale, g_raw)
}
