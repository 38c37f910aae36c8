//! Region-level semantic supervision.
//!
//! Reference embeddings arrive from an external vision-language pipeline as
//! raw vectors attached to image-space boxes. They are mapped once through a
//! fixed seeded projection to the per-Gaussian feature width, L2-normalized,
//! and then act as constant targets for every Gaussian whose projected center
//! falls strictly inside the box.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Feature, GaussianCloud, SEMANTIC_DIM};
use crate::raster::project_gaussian;

/// Embedding width produced by the reference encoder.
pub const RAW_EMBEDDING_DIM: usize = 512;

/// Fixed `SEMANTIC_DIM x raw_dim` map with orthonormal rows, fully determined by its seed.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingProjector {
    seed: u64,
    raw_dim: usize,
    /// Row-major, `SEMANTIC_DIM` rows of `raw_dim` values.
    matrix: Vec<f64>,
}

impl EmbeddingProjector {
    pub fn new(seed: u64) -> Self {
        Self::with_raw_dim(seed, RAW_EMBEDDING_DIM).expect("default width exceeds feature width")
    }

    pub fn with_raw_dim(seed: u64, raw_dim: usize) -> Result<Self> {
        if raw_dim < SEMANTIC_DIM {
            return Err(Error::InvalidParameter(format!(
                "raw embedding width {raw_dim} is smaller than the feature width {SEMANTIC_DIM}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..SEMANTIC_DIM)
            .map(|_| (0..raw_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        // Modified Gram-Schmidt, two passes.
        for i in 0..SEMANTIC_DIM {
            for _ in 0..2 {
                for j in 0..i {
                    let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    let (head, tail) = rows.split_at_mut(i);
                    for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                        *a -= d * b;
                    }
                }
            }
            let n = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut rows[i] {
                *v /= n;
            }
        }
        Ok(Self {
            seed,
            raw_dim,
            matrix: rows.concat(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.matrix[k * self.raw_dim..(k + 1) * self.raw_dim]
    }

    /// Projects and L2-normalizes one raw embedding.
    pub fn project(&self, raw: &[f64]) -> Result<Feature> {
        if raw.len() != self.raw_dim {
            return Err(Error::InvalidInput(format!(
                "embedding has {} values, projector expects {}",
                raw.len(),
                self.raw_dim
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding contains non-finite values".into()));
        }
        let mut out = [0.0; SEMANTIC_DIM];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.row(k).iter().zip(raw).map(|(a, b)| a * b).sum();
        }
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::InvalidInput("embedding projects to the zero vector".into()));
        }
        for v in &mut out {
            *v /= n;
        }
        Ok(out)
    }
}

/// Axis-aligned pixel box, `x_min < x_max` and `y_min < y_max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) || !(x_min < x_max) || !(y_min < y_max) {
            return Err(Error::InvalidInput(format!(
                "degenerate bounding box {:?}",
                b.to_array()
            )));
        }
        Ok(b)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    #[inline]
    pub fn contains_strictly(&self, p: [f64; 2]) -> bool {
        self.x_min < p[0] && p[0] < self.x_max && self.y_min < p[1] && p[1] < self.y_max
    }

    /// Clamps to the pixel extent of a `width x height` image. `None` if nothing is left.
    pub fn clamped(&self, width: usize, height: usize) -> Option<Self> {
        let (w, h) = ((width - 1) as f64, (height - 1) as f64);
        Self::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        )
        .ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticRegion {
    pub image_id: String,
    pub bbox: BBox,
    /// Projected, unit-norm target feature.
    pub f_ref: Feature,
    pub raw_dim: usize,
    /// The source embedding, kept so scenes can be written back out.
    pub raw_embedding: Vec<f64>,
}

impl SemanticRegion {
    pub fn new(image_id: impl Into<String>, bbox: BBox, raw: Vec<f64>, projector: &EmbeddingProjector) -> Result<Self> {
        Ok(Self {
            image_id: image_id.into(),
            bbox,
            f_ref: projector.project(&raw)?,
            raw_dim: raw.len(),
            raw_embedding: raw,
        })
    }
}

/// One record of the region file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub image_id: String,
    pub bbox: [f64; 4],
    pub embedding: Vec<f64>,
}

impl From<&SemanticRegion> for RegionRecord {
    fn from(r: &SemanticRegion) -> Self {
        Self {
            image_id: r.image_id.clone(),
            bbox: r.bbox.to_array(),
            embedding: r.raw_embedding.clone(),
        }
    }
}

/// Reads a region file (a JSON array of records) and projects every embedding.
///
/// An empty file or an empty array yields no regions.
pub fn ingest_regions(path: &Path, projector: &EmbeddingProjector) -> Result<Vec<SemanticRegion>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let values: Vec<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, format!("region file: {e}")))?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, value)| {
            let record: RegionRecord =
                serde_json::from_value(value).map_err(|e| Error::parse(path, format!("region record {i}: {e}")))?;
            let [x0, y0, x1, y1] = record.bbox;
            let bbox = BBox::new(x0, y0, x1, y1).map_err(|e| Error::parse(path, format!("region record {i}: {e}")))?;
            SemanticRegion::new(record.image_id, bbox, record.embedding, projector)
                .map_err(|e| Error::parse(path, format!("region record {i}: {e}")))
        })
        .collect()
}

pub fn write_regions(path: &Path, regions: &[SemanticRegion]) -> Result<()> {
    let records: Vec<RegionRecord> = regions.iter().map(RegionRecord::from).collect();
    let text = serde_json::to_string(&records).expect("records serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Regions keyed by image id, preserving file order within each image.
pub fn group_by_image(regions: &[SemanticRegion]) -> BTreeMap<&str, Vec<&SemanticRegion>> {
    let mut out: BTreeMap<&str, Vec<&SemanticRegion>> = BTreeMap::new();
    for r in regions {
        out.entry(r.image_id.as_str()).or_default().push(r);
    }
    out
}

/// Indices of Gaussians whose non-culled projected center lies strictly inside the box.
pub fn region_membership(cloud: &GaussianCloud, camera: &Camera, region: &SemanticRegion) -> Vec<usize> {
    (0..cloud.len())
        .filter(|&i| {
            let Ok(cov) = cloud.covariance(i) else {
                return false;
            };
            project_gaussian(cloud.positions[i], &cov, camera).is_some_and(|p| region.bbox.contains_strictly(p.mean2d))
        })
        .collect()
}

/// Member set of one region paired with its target.
#[derive(Clone, Debug, PartialEq)]
pub struct Membership {
    pub members: Vec<usize>,
    pub target: Feature,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// `Σ_regions Σ_members ‖f - f_ref‖²`
    #[default]
    Sum,
    /// Each region's sum divided by its member count.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLoss {
    pub value: f64,
    /// `dL_s/df` per Gaussian; zero for Gaussians in no region.
    pub grad: Vec<Feature>,
}

/// Squared-distance alignment loss between member features and region targets.
/// Overlapping regions add their penalties on shared Gaussians.
pub fn semantic_loss(features: &[Feature], memberships: &[Membership], reduction: Reduction) -> SemanticLoss {
    let mut grad = vec![[0.0; SEMANTIC_DIM]; features.len()];
    let mut region_values = Vec::with_capacity(memberships.len());
    for m in memberships {
        if m.members.is_empty() {
            continue;
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / m.members.len() as f64,
        };
        let mut terms = Vec::with_capacity(m.members.len());
        for &i in &m.members {
            let mut sq = 0.0;
            for k in 0..SEMANTIC_DIM {
                let d = features[i][k] - m.target[k];
                sq += d * d;
                grad[i][k] += 2.0 * scale * d;
            }
            terms.push(sq);
        }
        region_values.push(scale * crate::reduce::pairwise_sum(&terms));
    }
    SemanticLoss {
        value: crate::reduce::pairwise_sum(&region_values),
        grad,
    }
}

/// Deterministic stand-in for an encoder output: a raw vector labelled by `(seed, label)`.
pub fn pseudo_embedding(seed: u64, label: u64, raw_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (0..raw_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Writes `count` synthetic region records and returns the projected targets the
/// ingester must reproduce, in file order.
pub fn write_synthetic_region_file(
    path: &Path,
    seed: u64,
    count: usize,
    projector: &EmbeddingProjector,
) -> Result<Vec<Feature>> {
    let mut regions = Vec::with_capacity(count);
    for k in 0..count {
        let bbox = BBox::new(k as f64, 2.0 * k as f64, k as f64 + 5.5, 2.0 * k as f64 + 7.25)?;
        let raw = pseudo_embedding(seed, k as u64, projector.raw_dim());
        regions.push(SemanticRegion::new(format!("view_{:03}", k % 3), bbox, raw, projector)?);
    }
    write_regions(path, &regions)?;
    Ok(regions.iter().map(|r| r.f_ref).collect())
}
