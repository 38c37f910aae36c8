//! Scene directories: a JSON manifest naming images, cameras, frame kinds,
//! optional depth priors, semantic regions, initialization points and
//! ground truth.
//!
//! ```text
//! scene/
//!   manifest.json
//!   images/<id>.png        16-bit (or 8-bit) RGB
//!   depth/<id>.bin         optional depth prior
//!   regions.json           optional region records
//!   points.json            optional initialization points
//!   gt/                    optional ground truth
//! ```

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Feature, GaussianCloud};
use crate::image::{Image, Plane};
use crate::la::{self, Vec3};
use crate::losses::{DepthPrior, FrameKind};
use crate::medium::MediumParams;
use crate::semantics::{self, EmbeddingProjector, SemanticRegion};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const DEPTH_MAGIC: &[u8; 8] = b"UWDEPTH1";
/// Default split: views whose index is a multiple of this are held out.
pub const HOLDOUT_EVERY: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<String>,
    /// Held-out view indices. Every eighth view when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_points: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub id: String,
    pub image: String,
    pub camera: Camera,
    #[serde(default)]
    pub frame_kind: FrameKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthEntry {
    pub clean: Vec<String>,
    pub medium: MediumParams,
    pub cloud: String,
    #[serde(default)]
    pub clusters: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitPoint {
    pub position: Vec3,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Medium-free renders of the true cloud, one per view.
    pub clean: Vec<Image>,
    pub medium: MediumParams,
    pub cloud: GaussianCloud,
    /// Cluster label of every ground-truth Gaussian (may be empty).
    pub clusters: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub ids: Vec<String>,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub frame_kinds: Vec<FrameKind>,
    pub depth_priors: Vec<Option<DepthPrior>>,
    pub regions: Vec<SemanticRegion>,
    pub holdout: Vec<bool>,
    pub init_points: Option<Vec<InitPoint>>,
    pub ground_truth: Option<GroundTruth>,
    /// Non-fatal adjustments made while loading, such as clamped boxes.
    pub warnings: Vec<String>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn width(&self) -> usize {
        self.cameras.first().map_or(0, |c| c.width)
    }

    pub fn height(&self) -> usize {
        self.cameras.first().map_or(0, |c| c.height)
    }

    pub fn training_views(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.holdout[i]).collect()
    }

    pub fn holdout_views(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.holdout[i]).collect()
    }

    pub fn regions_for(&self, view: usize) -> Vec<&SemanticRegion> {
        self.regions.iter().filter(|r| r.image_id == self.ids[view]).collect()
    }

    /// Radius of the camera rig around its centroid, padded by 10%.
    pub fn extent(&self) -> f64 {
        let centers: Vec<Vec3> = self.cameras.iter().map(Camera::center).collect();
        if centers.is_empty() {
            return 1.0;
        }
        let mut centroid = [0.0; 3];
        for c in &centers {
            centroid = la::add(centroid, *c);
        }
        centroid = la::scale(centroid, 1.0 / centers.len() as f64);
        let radius = centers
            .iter()
            .map(|c| la::norm(la::sub(*c, centroid)))
            .fold(0.0, f64::max);
        if radius > 0.0 {
            1.1 * radius
        } else {
            1.0
        }
    }

    /// Per-channel mean over the training images.
    pub fn training_channel_means(&self) -> [f64; 3] {
        let views = self.training_views();
        let means: Vec<[f64; 3]> = views.iter().map(|&i| self.images[i].channel_means()).collect();
        std::array::from_fn(|c| {
            let column: Vec<f64> = means.iter().map(|m| m[c]).collect();
            crate::reduce::mean(&column)
        })
    }

    /// Checks the cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if n == 0 {
            return Err(Error::InvalidInput("scene has no views".into()));
        }
        let lens = [
            self.ids.len(),
            self.images.len(),
            self.frame_kinds.len(),
            self.depth_priors.len(),
            self.holdout.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::ShapeMismatch("scene arrays are not aligned by view".into()));
        }
        let (w, h) = (self.width(), self.height());
        for (i, (camera, image)) in self.cameras.iter().zip(&self.images).enumerate() {
            camera.validate()?;
            if camera.width != w || camera.height != h || image.width() != w || image.height() != h {
                return Err(Error::ShapeMismatch(format!(
                    "view {i} ({}) does not match the scene resolution {w}x{h}",
                    self.ids[i]
                )));
            }
        }
        Ok(())
    }
}

/// Default split: every eighth view, starting with the first.
pub fn default_holdout(n: usize) -> Vec<bool> {
    (0..n).map(|i| i % HOLDOUT_EVERY == 0 && n > 1).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CloudFile {
    sh_degree: usize,
    positions: Vec<Vec3>,
    log_scales: Vec<Vec3>,
    rotations: Vec<[f64; 4]>,
    sh_coeffs: Vec<f64>,
    opacity_logits: Vec<f64>,
    semantic_features: Vec<Feature>,
}

pub fn write_cloud_json(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    let file = CloudFile {
        sh_degree: cloud.sh_degree(),
        positions: cloud.positions.clone(),
        log_scales: cloud.log_scales.clone(),
        rotations: cloud.rotations.clone(),
        sh_coeffs: cloud.sh_coeffs.clone(),
        opacity_logits: cloud.opacity_logits.clone(),
        semantic_features: cloud.semantic_features.clone(),
    };
    write_json(path, &file)
}

pub fn read_cloud_json(path: &Path) -> Result<GaussianCloud> {
    let file: CloudFile = read_json(path)?;
    let mut cloud = GaussianCloud::new(file.sh_degree)?;
    cloud.positions = file.positions;
    cloud.log_scales = file.log_scales;
    cloud.rotations = file.rotations;
    cloud.sh_coeffs = file.sh_coeffs;
    cloud.opacity_logits = file.opacity_logits;
    cloud.semantic_features = file.semantic_features;
    cloud.validate().map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(cloud)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_depth(path: &Path, prior: &DepthPrior) -> Result<()> {
    let (w, h) = (prior.depth.width(), prior.depth.height());
    let mut bytes = Vec::with_capacity(16 + 9 * w * h);
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    for d in prior.depth.as_slice() {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    bytes.extend(prior.mask.iter().map(|&m| m as u8));
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<DepthPrior> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::parse(path, msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
        return Err(bad("not a depth file (bad magic)"));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let n = w.checked_mul(h).ok_or_else(|| bad("depth dimensions overflow"))?;
    if w == 0 || h == 0 || bytes.len() != 16 + 9 * n {
        return Err(bad("depth file is truncated or has trailing bytes"));
    }
    let depths: Vec<f64> = bytes[16..16 + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if depths.iter().any(|d| !d.is_finite()) {
        return Err(bad("depth file holds non-finite values"));
    }
    let mask = bytes[16 + 8 * n..].iter().map(|&b| b != 0).collect();
    DepthPrior::new(Plane::from_vec(w, h, depths)?, mask)
}

fn entry_error(manifest: &Path, what: String, e: Error) -> Error {
    Error::parse(manifest, format!("{what}: {e}"))
}

/// Loads and validates a scene directory. Region embeddings are mapped
/// through `projector`; boxes reaching outside the image are clamped and
/// reported in [`Scene::warnings`].
pub fn load_scene(dir: &Path, projector: &EmbeddingProjector) -> Result<Scene> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest: Manifest = read_json(&manifest_path)?;
    let (w, h) = (manifest.width, manifest.height);
    if manifest.views.is_empty() || w == 0 || h == 0 {
        return Err(Error::parse(
            &manifest_path,
            "manifest needs at least one view and a positive resolution",
        ));
    }
    let n = manifest.views.len();
    let mut scene = Scene {
        ids: Vec::with_capacity(n),
        cameras: Vec::with_capacity(n),
        images: Vec::with_capacity(n),
        frame_kinds: Vec::with_capacity(n),
        depth_priors: Vec::with_capacity(n),
        regions: Vec::new(),
        holdout: Vec::new(),
        init_points: None,
        ground_truth: None,
        warnings: Vec::new(),
    };
    for (i, view) in manifest.views.iter().enumerate() {
        let label = format!("view {i} ({})", view.id);
        if scene.ids.contains(&view.id) {
            return Err(Error::parse(&manifest_path, format!("{label}: duplicate id")));
        }
        view.camera
            .validate()
            .map_err(|e| entry_error(&manifest_path, label.clone(), e))?;
        if view.camera.width != w || view.camera.height != h {
            return Err(Error::parse(
                &manifest_path,
                format!(
                    "{label}: camera is {}x{}, scene is {w}x{h}",
                    view.camera.width, view.camera.height
                ),
            ));
        }
        let image =
            Image::load_png(&dir.join(&view.image)).map_err(|e| entry_error(&manifest_path, label.clone(), e))?;
        if image.width() != w || image.height() != h {
            return Err(Error::parse(
                &manifest_path,
                format!(
                    "{label}: image is {}x{}, scene is {w}x{h}",
                    image.width(),
                    image.height()
                ),
            ));
        }
        let prior = match &view.depth {
            Some(p) => {
                let prior = read_depth(&dir.join(p)).map_err(|e| entry_error(&manifest_path, label.clone(), e))?;
                if prior.depth.width() != w || prior.depth.height() != h {
                    return Err(Error::parse(
                        &manifest_path,
                        format!("{label}: depth prior resolution mismatch"),
                    ));
                }
                Some(prior)
            }
            None => None,
        };
        scene.ids.push(view.id.clone());
        scene.cameras.push(view.camera.clone());
        scene.images.push(image);
        scene.frame_kinds.push(view.frame_kind);
        scene.depth_priors.push(prior);
    }

    scene.holdout = match &manifest.holdout {
        Some(list) => {
            let mut mask = vec![false; n];
            for &i in list {
                if i >= n {
                    return Err(Error::parse(&manifest_path, format!("holdout index {i} out of range")));
                }
                mask[i] = true;
            }
            mask
        }
        None => default_holdout(n),
    };
    if scene.holdout.iter().all(|&h| h) {
        return Err(Error::parse(&manifest_path, "every view is held out"));
    }

    if let Some(rel) = &manifest.regions {
        let path = dir.join(rel);
        for (k, mut region) in semantics::ingest_regions(&path, projector)?.into_iter().enumerate() {
            if !scene.ids.contains(&region.image_id) {
                return Err(Error::parse(
                    &path,
                    format!("region record {k}: unknown image id `{}`", region.image_id),
                ));
            }
            match region.bbox.clamped(w, h) {
                Some(b) if b == region.bbox => {}
                Some(b) => {
                    scene.warnings.push(format!(
                        "region record {k} ({}): bbox clamped to the image",
                        region.image_id
                    ));
                    region.bbox = b;
                }
                None => {
                    scene.warnings.push(format!(
                        "region record {k} ({}): bbox lies outside the image, dropped",
                        region.image_id
                    ));
                    continue;
                }
            }
            scene.regions.push(region);
        }
    }

    if let Some(rel) = &manifest.init_points {
        let points: Vec<InitPoint> = read_json(&dir.join(rel))?;
        if points
            .iter()
            .any(|p| !la::all_finite(&p.position) || !la::all_finite(&p.color))
        {
            return Err(Error::parse(dir.join(rel), "non-finite initialization point"));
        }
        scene.init_points = Some(points);
    }

    if let Some(gt) = &manifest.ground_truth {
        if gt.clean.len() != n {
            return Err(Error::parse(
                &manifest_path,
                "ground truth must list one clean image per view",
            ));
        }
        let clean = gt
            .clean
            .iter()
            .map(|p| Image::load_png(&dir.join(p)))
            .collect::<Result<Vec<_>>>()?;
        scene.ground_truth = Some(GroundTruth {
            clean,
            medium: gt.medium,
            cloud: read_cloud_json(&dir.join(&gt.cloud))?,
            clusters: gt.clusters.clone(),
        });
    }
    scene.validate()?;
    Ok(scene)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `scene` in the layout [`load_scene`] reads. Images are stored as
/// 16-bit PNG, so values round-trip exactly only when already quantized.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    scene.validate()?;
    create_dir(&dir.join("images"))?;
    let mut views = Vec::with_capacity(scene.len());
    for i in 0..scene.len() {
        let id = &scene.ids[i];
        let image = format!("images/{id}.png");
        scene.images[i].save_png(&dir.join(&image))?;
        let depth = match &scene.depth_priors[i] {
            Some(prior) => {
                create_dir(&dir.join("depth"))?;
                let rel = format!("depth/{id}.bin");
                write_depth(&dir.join(&rel), prior)?;
                Some(rel)
            }
            None => None,
        };
        views.push(ViewEntry {
            id: id.clone(),
            image,
            camera: scene.cameras[i].clone(),
            frame_kind: scene.frame_kinds[i],
            depth,
        });
    }
    let regions = if scene.regions.is_empty() {
        None
    } else {
        semantics::write_regions(&dir.join("regions.json"), &scene.regions)?;
        Some("regions.json".to_string())
    };
    let init_points = match &scene.init_points {
        Some(points) => {
            write_json(&dir.join("points.json"), points)?;
            Some("points.json".to_string())
        }
        None => None,
    };
    let ground_truth = match &scene.ground_truth {
        Some(gt) => {
            create_dir(&dir.join("gt"))?;
            let mut clean = Vec::with_capacity(gt.clean.len());
            for (i, image) in gt.clean.iter().enumerate() {
                let rel = format!("gt/clean_{}.png", scene.ids[i]);
                image.save_png(&dir.join(&rel))?;
                clean.push(rel);
            }
            write_cloud_json(&dir.join("gt/cloud.json"), &gt.cloud)?;
            Some(GroundTruthEntry {
                clean,
                medium: gt.medium,
                cloud: "gt/cloud.json".into(),
                clusters: gt.clusters.clone(),
            })
        }
        None => None,
    };
    let holdout = scene.holdout_views();
    let manifest = Manifest {
        width: scene.width(),
        height: scene.height(),
        views,
        regions,
        holdout: Some(holdout),
        init_points,
        ground_truth,
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)
}

/// Resolves `path` against `base` unless it is absolute.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let prior = DepthPrior::new(
            Plane::from_fn(3, 2, |x, y| 1.0 + x as f64 * 0.25 + y as f64),
            vec![true, false, true, true, false, true],
        )
        .unwrap();
        let path = dir.path().join("d.bin");
        write_depth(&path, &prior).unwrap();
        assert_eq!(read_depth(&path).unwrap(), prior);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_depth(&path).is_err());
        std::fs::write(&path, b"NOTDEPTH00000000").unwrap();
        assert!(read_depth(&path).is_err());
    }

    #[test]
    fn default_split_is_every_eighth() {
        let h = default_holdout(17);
        assert_eq!((0..17).filter(|&i| h[i]).collect::<Vec<_>>(), vec![0, 8, 16]);
        assert_eq!(default_holdout(1), vec![false]);
    }
}
