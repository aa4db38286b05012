//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "EMOE"
//! version   u32      FORMAT_VERSION
//! kind      u32      0 = backbone, 1 = expert
//! geometry  8 x u32  channels height width patch d_model d_txt d_ff timesteps
//! strings   u32 count, then per string: u32 byte length, UTF-8 bytes
//! tensors   u32 count, then per tensor: u32 rank, rank x u32 dims,
//!           prod(dims) x f64
//! crc       u32      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Tensors appear in [`Params::tensors`] order. A backbone file holds the
//! backbone tensors followed by the base expert's; an expert file holds the
//! expert tensors and its positive and negative descriptors as strings.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{EmoeError, Result};
use crate::math::{RngStream, Tensor};
use crate::text::ExpertDescriptor;
use crate::unet::{Backbone, ExpertWeights, Geometry, Params};

pub const MAGIC: &[u8; 4] = b"EMOE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Backbone,
    Expert,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            CheckpointKind::Backbone => 0,
            CheckpointKind::Expert => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub geometry: Geometry,
    pub strings: Vec<String>,
    pub tensors: Vec<Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| EmoeError::invalid(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn geometry_fields(g: &Geometry) -> [usize; 8] {
    [g.channels, g.height, g.width, g.patch, g.d_model, g.d_txt, g.d_ff, g.timesteps]
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION as usize)?;
        put_u32(&mut out, self.kind.code() as usize)?;
        for v in geometry_fields(&self.geometry) {
            put_u32(&mut out, v)?;
        }
        put_u32(&mut out, self.strings.len())?;
        for s in &self.strings {
            put_u32(&mut out, s.len())?;
            out.extend_from_slice(s.as_bytes());
        }
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: &str| EmoeError::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 4 + 4 {
            return Err(fail("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(EmoeError::Crc { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4).ok_or_else(|| fail("truncated magic"))? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = r.u32().ok_or_else(|| fail("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(fail(&format!("unsupported format version {version}")));
        }
        let kind = match r.u32().ok_or_else(|| fail("truncated header"))? {
            0 => CheckpointKind::Backbone,
            1 => CheckpointKind::Expert,
            k => return Err(fail(&format!("unknown checkpoint kind {k}"))),
        };
        let mut gf = [0usize; 8];
        for v in gf.iter_mut() {
            *v = r.u32().ok_or_else(|| fail("truncated geometry"))? as usize;
        }
        let geometry = Geometry {
            channels: gf[0],
            height: gf[1],
            width: gf[2],
            patch: gf[3],
            d_model: gf[4],
            d_txt: gf[5],
            d_ff: gf[6],
            timesteps: gf[7],
        };
        let n_strings = r.u32().ok_or_else(|| fail("truncated string table"))?;
        let mut strings = Vec::new();
        for _ in 0..n_strings {
            let len = r.u32().ok_or_else(|| fail("truncated string"))? as usize;
            let raw = r.take(len).ok_or_else(|| fail("truncated string"))?;
            strings.push(String::from_utf8(raw.to_vec()).map_err(|_| fail("string is not UTF-8"))?);
        }
        let n_tensors = r.u32().ok_or_else(|| fail("truncated tensor table"))?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let rank = r.u32().ok_or_else(|| fail("truncated tensor header"))? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| fail("truncated tensor shape"))?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fail("tensor size overflows"))?;
            let raw = r
                .take(len.checked_mul(8).ok_or_else(|| fail("tensor size overflows"))?)
                .ok_or_else(|| fail("truncated tensor data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| fail(&e.to_string()))?);
        }
        if r.pos != body.len() {
            return Err(fail("trailing bytes before CRC"));
        }
        Ok(Self {
            kind,
            geometry,
            strings,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EmoeError::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }

    fn expect(&self, kind: CheckpointKind, geometry: &Geometry, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(EmoeError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected a {kind:?} checkpoint, found {:?}", self.kind),
            });
        }
        if self.geometry != *geometry {
            return Err(EmoeError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("geometry {:?} does not match the config's {:?}", self.geometry, geometry),
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Copies `tensors` into a freshly shaped container, checking every shape.
fn fill<P: Params>(mut target: P, tensors: &mut std::vec::IntoIter<Tensor>, path: &Path) -> Result<P> {
    for slot in target.tensors_mut() {
        let t = tensors.next().ok_or_else(|| EmoeError::Checkpoint {
            path: path.to_path_buf(),
            reason: "too few tensors".into(),
        })?;
        if t.shape() != slot.shape() {
            return Err(EmoeError::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("tensor shape {:?}, expected {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
    }
    Ok(target)
}

fn finish(rest: std::vec::IntoIter<Tensor>, path: &Path) -> Result<()> {
    if rest.len() != 0 {
        return Err(EmoeError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("{} unexpected extra tensors", rest.len()),
        });
    }
    Ok(())
}

fn template_stream() -> RngStream {
    RngStream::new(0, 0)
}

pub fn backbone_checkpoint(g: &Geometry, backbone: &Backbone, base_expert: &ExpertWeights) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Backbone,
        geometry: *g,
        strings: Vec::new(),
        tensors: backbone
            .tensors()
            .into_iter()
            .chain(base_expert.tensors())
            .cloned()
            .collect(),
    }
}

pub fn expert_checkpoint(g: &Geometry, weights: &ExpertWeights, descriptor: &ExpertDescriptor) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Expert,
        geometry: *g,
        strings: vec![descriptor.positive.clone(), descriptor.negative.clone()],
        tensors: weights.tensors().into_iter().cloned().collect(),
    }
}

/// Backbone and base expert from a backbone file.
pub fn load_backbone(path: &Path, g: &Geometry) -> Result<(Backbone, ExpertWeights)> {
    let ck = Checkpoint::load(path)?;
    ck.expect(CheckpointKind::Backbone, g, path)?;
    let mut it = ck.tensors.into_iter();
    let backbone = fill(Backbone::init(&mut template_stream(), g), &mut it, path)?;
    let base = fill(ExpertWeights::init(&mut template_stream(), g), &mut it, path)?;
    finish(it, path)?;
    Ok((backbone, base))
}

pub fn load_expert(path: &Path, g: &Geometry) -> Result<(ExpertWeights, ExpertDescriptor)> {
    let ck = Checkpoint::load(path)?;
    ck.expect(CheckpointKind::Expert, g, path)?;
    let [positive, negative]: [String; 2] = ck.strings.try_into().map_err(|_| EmoeError::Checkpoint {
        path: path.to_path_buf(),
        reason: "expert checkpoint needs exactly two descriptor strings".into(),
    })?;
    let mut it = ck.tensors.into_iter();
    let weights = fill(ExpertWeights::init(&mut template_stream(), g), &mut it, path)?;
    finish(it, path)?;
    Ok((weights, ExpertDescriptor::new(positive, negative)?))
}

pub fn backbone_path(dir: &Path) -> PathBuf {
    dir.join("backbone.emoe")
}

pub fn expert_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("expert_{index}.emoe"))
}
