//! Versioned little-endian checkpoint files.
//!
//! Layout: magic, `u32` version, `u32` record count, then records of
//! `(name, dtype, shape, payload)`, and finally an FNV-1a hash of every
//! preceding byte. Records are read back by name, so their order is free.

use std::collections::BTreeMap;
use std::path::Path;

use crate::camera::Camera;
use crate::densify::GradStats;
use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, ParamGroup, SEMANTIC_DIM};
use crate::medium::MediumParams;
use crate::optim::{Moments, OptimizerState};

pub const MAGIC: &[u8; 8] = b"UWSPLCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Completed iterations.
    pub iteration: usize,
    pub cloud: GaussianCloud,
    pub medium: MediumParams,
    pub log_gamma: f64,
    pub optimizer: OptimizerState,
    pub grad_stats: GradStats,
    pub projector_seed: u64,
    /// Cameras of the scene the run trained on, so renders need no scene.
    pub cameras: Vec<Camera>,
    /// The training configuration as JSON.
    pub config_json: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    F64 = 0,
    U64 = 1,
    U32 = 2,
    Bytes = 3,
}

impl Dtype {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::U64),
            2 => Some(Dtype::U32),
            3 => Some(Dtype::Bytes),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 | Dtype::U64 => 8,
            Dtype::U32 => 4,
            Dtype::Bytes => 1,
        }
    }
}

struct Record {
    dtype: Dtype,
    shape: Vec<u64>,
    data: Vec<u8>,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Little-endian bytes of a parameter group, as stored in checkpoints.
pub fn group_bytes(cloud: &GaussianCloud, group: ParamGroup) -> Vec<u8> {
    let values: &[f64] = match group {
        ParamGroup::Position => cloud.positions.as_flattened(),
        ParamGroup::Scale => cloud.log_scales.as_flattened(),
        ParamGroup::Rotation => cloud.rotations.as_flattened(),
        ParamGroup::Sh => &cloud.sh_coeffs,
        ParamGroup::Opacity => &cloud.opacity_logits,
        ParamGroup::Semantic => cloud.semantic_features.as_flattened(),
        ParamGroup::Medium => &[],
    };
    f64_bytes(values)
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

struct Writer {
    records: Vec<(String, Record)>,
}

impl Writer {
    fn f64s(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        self.push(name, Dtype::F64, shape, f64_bytes(values));
    }

    fn u64s(&mut self, name: &str, values: &[u64]) {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, Dtype::U64, &[values.len()], data);
    }

    fn u32s(&mut self, name: &str, values: &[u32]) {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, Dtype::U32, &[values.len()], data);
    }

    fn bytes(&mut self, name: &str, data: &[u8]) {
        self.push(name, Dtype::Bytes, &[data.len()], data.to_vec());
    }

    fn push(&mut self, name: &str, dtype: Dtype, shape: &[usize], data: Vec<u8>) {
        let shape = shape.iter().map(|&d| d as u64).collect();
        self.records.push((name.to_string(), Record { dtype, shape, data }));
    }

    fn finish(self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, r) in &self.records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(r.dtype as u8);
            out.push(r.shape.len() as u8);
            for d in &r.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&(r.data.len() as u64).to_le_bytes());
            out.extend_from_slice(&r.data);
        }
        let hash = fnv1a(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

struct Reader {
    records: BTreeMap<String, Record>,
}

impl Reader {
    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        if bytes.len() < c.pos + 8 {
            return Err(Error::Checkpoint("truncated file: missing record table".into()));
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("eight bytes"));
        let mut c = Cursor {
            bytes: &bytes[..body_end],
            pos: c.pos,
        };
        let count = c.u32()?;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let len = c.u16()? as usize;
            let name = String::from_utf8(c.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let dtype = Dtype::from_u8(c.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}` has an unknown type")))?;
            let ndim = c.u8()? as usize;
            let shape = (0..ndim).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
            let size = c.u64()? as usize;
            let data = c.take(size)?.to_vec();
            let expected = shape
                .iter()
                .try_fold(dtype.width() as u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}` shape overflows")))?;
            if expected != size as u64 {
                return Err(Error::Checkpoint(format!(
                    "record `{name}` holds {size} bytes, its shape {shape:?} needs {expected}"
                )));
            }
            records.insert(name, Record { dtype, shape, data });
        }
        if c.pos != body_end {
            return Err(Error::Checkpoint("trailing bytes after the last record".into()));
        }
        if fnv1a(&bytes[..body_end]) != stored {
            return Err(Error::Checkpoint("checksum mismatch, the file is corrupt".into()));
        }
        Ok(Self { records })
    }

    fn get(&self, name: &str, dtype: Dtype) -> Result<&Record> {
        let r = self
            .records
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))?;
        if r.dtype != dtype {
            return Err(Error::Checkpoint(format!("record `{name}` has the wrong type")));
        }
        Ok(r)
    }

    fn f64s(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let r = self.get(name, Dtype::F64)?;
        let want: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
        if r.shape != want {
            return Err(Error::Checkpoint(format!(
                "record `{name}` has shape {:?}, expected {want:?}",
                r.shape
            )));
        }
        Ok(r.data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes")))
            .collect())
    }

    fn f64s_any(&self, name: &str) -> Result<Vec<f64>> {
        let r = self.get(name, Dtype::F64)?;
        let shape: Vec<usize> = r.shape.iter().map(|&d| d as usize).collect();
        self.f64s(name, &shape)
    }

    fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let r = self.get(name, Dtype::U64)?;
        Ok(r.data
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("eight bytes")))
            .collect())
    }

    fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)?.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Checkpoint(format!("record `{name}` must hold one value"))),
        }
    }

    fn u32s(&self, name: &str, len: usize) -> Result<Vec<u32>> {
        let r = self.get(name, Dtype::U32)?;
        if r.shape != [len as u64] {
            return Err(Error::Checkpoint(format!("record `{name}` must hold {len} values")));
        }
        Ok(r.data
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect())
    }

    fn bytes(&self, name: &str) -> Result<&[u8]> {
        Ok(&self.get(name, Dtype::Bytes)?.data)
    }
}

fn moments_name(group: &str, part: &str) -> String {
    format!("optim.{group}.{part}")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.cloud;
        let n = c.len();
        let mut w = Writer { records: Vec::new() };
        w.u64s("iteration", &[self.iteration as u64]);
        w.u64s("sh_degree", &[c.sh_degree() as u64]);
        w.f64s("cloud.position", &[n, 3], c.positions.as_flattened());
        w.f64s("cloud.log_scale", &[n, 3], c.log_scales.as_flattened());
        w.f64s("cloud.rotation", &[n, 4], c.rotations.as_flattened());
        w.f64s("cloud.sh", &[n, c.sh_stride()], &c.sh_coeffs);
        w.f64s("cloud.opacity_logit", &[n], &c.opacity_logits);
        w.f64s("cloud.semantic", &[n, SEMANTIC_DIM], c.semantic_features.as_flattened());
        w.f64s("medium", &[9], &self.medium.to_array());
        w.f64s("log_gamma", &[1], &[self.log_gamma]);
        let mut put_moments = |name: &str, m: &Moments| {
            w.f64s(&moments_name(name, "m"), &[m.m.len()], &m.m);
            w.f64s(&moments_name(name, "v"), &[m.v.len()], &m.v);
            w.u64s(&moments_name(name, "step"), &[m.step]);
        };
        for (group, m) in &self.optimizer.groups {
            put_moments(group.name(), m);
        }
        put_moments("gamma", &self.optimizer.gamma);
        w.f64s("densify.accum", &[n], &self.grad_stats.accum);
        w.u32s("densify.count", &self.grad_stats.count);
        w.u64s("projector_seed", &[self.projector_seed]);
        let cams: Vec<f64> = self
            .cameras
            .iter()
            .flat_map(|cam| {
                let mut v = vec![cam.fx, cam.fy, cam.cx, cam.cy, cam.width as f64, cam.height as f64];
                v.extend(cam.rotation.iter().flatten());
                v.extend(cam.translation);
                v
            })
            .collect();
        w.f64s("cameras", &[self.cameras.len(), CAMERA_FIELDS], &cams);
        w.bytes("config", self.config_json.as_bytes());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let r = Reader::parse(bytes)?;
        let iteration = r.u64("iteration")? as usize;
        let mut cloud = GaussianCloud::new(r.u64("sh_degree")? as usize)
            .map_err(|e| Error::Checkpoint(format!("record `sh_degree`: {e}")))?;
        let positions = r.f64s_any("cloud.position")?;
        let n = positions.len() / 3;
        cloud.positions = positions.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        cloud.log_scales = r
            .f64s("cloud.log_scale", &[n, 3])?
            .chunks_exact(3)
            .map(|p| [p[0], p[1], p[2]])
            .collect();
        cloud.rotations = r
            .f64s("cloud.rotation", &[n, 4])?
            .chunks_exact(4)
            .map(|p| [p[0], p[1], p[2], p[3]])
            .collect();
        cloud.sh_coeffs = r.f64s("cloud.sh", &[n, cloud.sh_stride()])?;
        cloud.opacity_logits = r.f64s("cloud.opacity_logit", &[n])?;
        cloud.semantic_features = r
            .f64s("cloud.semantic", &[n, SEMANTIC_DIM])?
            .chunks_exact(SEMANTIC_DIM)
            .map(|f| f.try_into().expect("feature width"))
            .collect();
        cloud
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored cloud is invalid: {e}")))?;

        let medium = MediumParams::from_array(r.f64s("medium", &[9])?.try_into().expect("nine values"));
        let log_gamma = r.f64s("log_gamma", &[1])?[0];
        let get_moments = |name: &str| -> Result<Moments> {
            Ok(Moments {
                m: r.f64s_any(&moments_name(name, "m"))?,
                v: r.f64s_any(&moments_name(name, "v"))?,
                step: r.u64(&moments_name(name, "step"))?,
            })
        };
        let mut optimizer = OptimizerState::new(&cloud);
        for group in ParamGroup::ALL {
            optimizer.groups.insert(group, get_moments(group.name())?);
        }
        optimizer.gamma = get_moments("gamma")?;
        optimizer
            .ensure_congruent(&cloud)
            .map_err(|e| Error::Checkpoint(format!("optimizer state: {e}")))?;
        let grad_stats = GradStats {
            accum: r.f64s("densify.accum", &[n])?,
            count: r.u32s("densify.count", n)?,
        };
        let projector_seed = r.u64("projector_seed")?;
        let cameras = r
            .f64s_any("cameras")?
            .chunks_exact(CAMERA_FIELDS)
            .enumerate()
            .map(|(i, v)| {
                let rotation = [[v[6], v[7], v[8]], [v[9], v[10], v[11]], [v[12], v[13], v[14]]];
                Camera::new(
                    v[0],
                    v[1],
                    v[2],
                    v[3],
                    v[4] as usize,
                    v[5] as usize,
                    rotation,
                    [v[15], v[16], v[17]],
                )
                .map_err(|e| Error::Checkpoint(format!("camera {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let config_json = String::from_utf8(r.bytes("config")?.to_vec())
            .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
        Ok(Self {
            iteration,
            cloud,
            medium,
            log_gamma,
            optimizer,
            grad_stats,
            projector_seed,
            cameras,
            config_json,
        })
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a partial checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

const CAMERA_FIELDS: usize = 18;
