//! Frozen per-view spatial descriptors.
//!
//! Three interchangeable backends produce a fixed-length vector for one SA
//! view: precomputed embeddings looked up by key, a small seeded conv-net,
//! and a seeded linear projection of the raw pixels.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lightfield::{MultiViewSAArray, CHANNELS};
use crate::selection::ViewSequence;

pub const DEFAULT_DESCRIPTION_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDescription {
    pub values: Vec<f64>,
}

impl SpatialDescription {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Borrowed RGB view handed to a backend.
#[derive(Debug, Clone, Copy)]
pub struct ViewInput<'a> {
    pub pixels: &'a [u8],
    pub width: usize,
    pub height: usize,
}

pub type EmbeddingKey = (String, u8, u8);

const EMBEDDING_MAGIC: &[u8; 4] = b"LFEM";
const EMBEDDING_VERSION: u32 = 1;

/// Exact-key index over an `LFEM` embedding file. Record order is kept so
/// that re-saving reproduces the input bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    records: Vec<(EmbeddingKey, Vec<f32>)>,
    index: HashMap<EmbeddingKey, usize>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        EmbeddingIndex {
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, image_id: &str, u: u8, v: u8, values: Vec<f32>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::shape("EmbeddingIndex::insert", self.dim, values.len()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding ({image_id}, {u}, {v})")));
        }
        if image_id.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("image id of {} bytes", image_id.len())));
        }
        let key = (image_id.to_string(), u, v);
        if self.index.contains_key(&key) {
            return Err(Error::Format {
                kind: "embedding",
                reason: format!("duplicate key ({image_id}, {u}, {v})"),
            });
        }
        self.index.insert(key.clone(), self.records.len());
        self.records.push((key, values));
        Ok(())
    }

    pub fn get(&self, image_id: &str, u: u8, v: u8) -> Option<&[f32]> {
        self.index
            .get(&(image_id.to_string(), u, v))
            .map(|&i| self.records[i].1.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for ((id, u, v), values) in &self.records {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.push(*u);
            out.push(*v);
            for x in values {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "embedding");
        if r.take(4)? != EMBEDDING_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut index = EmbeddingIndex::new(dim);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail("image id is not UTF-8"))?
                .to_string();
            let u = r.u8()?;
            let v = r.u8()?;
            let values = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            index.insert(&id, u, v, values)?;
        }
        if !r.is_done() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Little-endian cursor shared by the binary file readers.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        ByteReader { bytes, pos: 0, kind }
    }

    pub(crate) fn fail(&self, reason: &str) -> Error {
        Error::Format {
            kind: self.kind,
            reason: format!("{reason} (at byte {})", self.pos),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail("truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// A 3x3 same-padded convolution layer.
#[derive(Debug, Clone, PartialEq)]
struct Conv3x3 {
    in_ch: usize,
    out_ch: usize,
    /// `[out][in][ky][kx]`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv3x3 {
    fn seeded(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> Self {
        let bound = (6.0 / (in_ch * 9) as f64).sqrt();
        Conv3x3 {
            in_ch,
            out_ch,
            weights: (0..out_ch * in_ch * 9).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: (0..out_ch).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    /// Channel-major input `[ch][y][x]`; returns ReLU activations.
    fn forward_relu(&self, input: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_ch * w * h];
        for o in 0..self.out_ch {
            let plane = &mut out[o * w * h..(o + 1) * w * h];
            plane.iter_mut().for_each(|p| *p = self.bias[o]);
            for i in 0..self.in_ch {
                let src = &input[i * w * h..(i + 1) * w * h];
                let k = &self.weights[(o * self.in_ch + i) * 9..(o * self.in_ch + i + 1) * 9];
                for y in 0..h {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        for kx in 0..3 {
                            let weight = k[ky * 3 + kx];
                            let x_lo = if kx == 0 { 1 } else { 0 };
                            let x_hi = if kx == 2 { w - 1 } else { w };
                            for x in x_lo..x_hi {
                                plane[y * w + x] += weight * srow[x + kx - 1];
                            }
                        }
                    }
                }
            }
            plane.iter_mut().for_each(|p| *p = p.max(0.0));
        }
        out
    }
}

fn max_pool2(input: &[f64], ch: usize, w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = vec![f64::NEG_INFINITY; ch * ow * oh];
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(c * oh + y / 2) * ow + x / 2];
                *o = o.max(input[(c * h + y) * w + x]);
            }
        }
    }
    (out, ow, oh)
}

fn adaptive_avg_pool(input: &[f64], ch: usize, w: usize, h: usize, grid: usize) -> Vec<f64> {
    let bin = |i: usize, len: usize| (i * len / grid, ((i + 1) * len).div_ceil(grid).max(i * len / grid + 1));
    let mut out = Vec::with_capacity(ch * grid * grid);
    for c in 0..ch {
        for gy in 0..grid {
            let (y0, y1) = bin(gy, h);
            for gx in 0..grid {
                let (x0, x1) = bin(gx, w);
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += input[(c * h + y) * w + x];
                    }
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

/// Seeded, frozen two-conv network: conv3x3 → ReLU → maxpool2 → conv3x3 →
/// ReLU → 4x4 adaptive average pool → dense.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCnn {
    pub width: usize,
    pub height: usize,
    conv1: Conv3x3,
    conv2: Conv3x3,
    dense: crate::numerics::Matrix,
    dense_bias: Vec<f64>,
}

const TOY_CONV1: usize = 8;
const TOY_CONV2: usize = 16;
const TOY_POOL_GRID: usize = 4;

impl ToyCnn {
    pub fn new(width: usize, height: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if width < 2 || height < 2 || out_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "toy CNN needs >= 2x2 input and dim >= 1, got {width}x{height} -> {out_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = Conv3x3::seeded(&mut rng, CHANNELS, TOY_CONV1);
        let conv2 = Conv3x3::seeded(&mut rng, TOY_CONV1, TOY_CONV2);
        let fan_in = TOY_CONV2 * TOY_POOL_GRID * TOY_POOL_GRID;
        let bound = (3.0 / fan_in as f64).sqrt();
        let dense = crate::numerics::Matrix::new(
            out_dim,
            fan_in,
            (0..out_dim * fan_in).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?;
        let dense_bias = vec![0.0; out_dim];
        Ok(ToyCnn {
            width,
            height,
            conv1,
            conv2,
            dense,
            dense_bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.dense.rows()
    }

    fn forward(&self, pixels: &[u8]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut planes = vec![0.0; CHANNELS * w * h];
        for (i, px) in pixels.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                planes[c * w * h + i] = px[c] as f64 / 255.0 - 0.5;
            }
        }
        let a1 = self.conv1.forward_relu(&planes, w, h);
        let (p1, pw, ph) = max_pool2(&a1, TOY_CONV1, w, h);
        let a2 = self.conv2.forward_relu(&p1, pw, ph);
        let pooled = adaptive_avg_pool(&a2, TOY_CONV2, pw, ph, TOY_POOL_GRID);
        let mut out = self.dense_bias.clone();
        self.dense.mul_vec_acc(&pooled, &mut out);
        out
    }
}

/// Seeded Gaussian projection of the pixels scaled to `[0, 1]`. No bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomProjection {
    pub width: usize,
    pub height: usize,
    matrix: crate::numerics::Matrix,
}

impl RandomProjection {
    pub fn new(width: usize, height: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let fan_in = width * height * CHANNELS;
        if fan_in == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument("random projection dims must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data = (0..out_dim * fan_in)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Ok(RandomProjection {
            width,
            height,
            matrix: crate::numerics::Matrix::new(out_dim, fan_in, data)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &crate::numerics::Matrix {
        &self.matrix
    }

    fn forward(&self, pixels: &[u8]) -> Vec<f64> {
        let x: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let mut out = vec![0.0; self.dim()];
        self.matrix.mul_vec_acc(&x, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DescriptorBackend {
    EmbeddingFile(EmbeddingIndex),
    ToyCnn(ToyCnn),
    RandomProjection(RandomProjection),
}

impl DescriptorBackend {
    pub fn dim(&self) -> usize {
        match self {
            DescriptorBackend::EmbeddingFile(e) => e.dim(),
            DescriptorBackend::ToyCnn(t) => t.dim(),
            DescriptorBackend::RandomProjection(r) => r.dim(),
        }
    }

    /// Expected view size, `None` when pixels are not read.
    pub fn input_size(&self) -> Option<(usize, usize)> {
        match self {
            DescriptorBackend::EmbeddingFile(_) => None,
            DescriptorBackend::ToyCnn(t) => Some((t.width, t.height)),
            DescriptorBackend::RandomProjection(r) => Some((r.width, r.height)),
        }
    }

    pub fn describe(&self, view: ViewInput<'_>, image_id: &str, u: usize, v: usize) -> Result<SpatialDescription> {
        let values = match self {
            DescriptorBackend::EmbeddingFile(index) => {
                let key_u = u8::try_from(u).ok();
                let key_v = u8::try_from(v).ok();
                let found = key_u.zip(key_v).and_then(|(ku, kv)| index.get(image_id, ku, kv));
                match found {
                    Some(values) => values.iter().map(|&x| x as f64).collect(),
                    None => {
                        return Err(Error::MissingEmbedding {
                            image_id: image_id.to_string(),
                            u,
                            v,
                        })
                    }
                }
            }
            DescriptorBackend::ToyCnn(net) => {
                check_view(view, net.width, net.height)?;
                net.forward(view.pixels)
            }
            DescriptorBackend::RandomProjection(proj) => {
                check_view(view, proj.width, proj.height)?;
                proj.forward(view.pixels)
            }
        };
        Ok(SpatialDescription { values })
    }
}

fn check_view(view: ViewInput<'_>, width: usize, height: usize) -> Result<()> {
    if view.width != width || view.height != height || view.pixels.len() != width * height * CHANNELS {
        return Err(Error::shape(
            "describe",
            format!("{}x{} view", view.width, view.height),
            format!("{width}x{height} backend input"),
        ));
    }
    Ok(())
}

fn describe_at(
    backend: &DescriptorBackend,
    array: &MultiViewSAArray,
    (u, v): (usize, usize),
) -> Result<SpatialDescription> {
    let at = |e: Error| Error::AtPosition {
        u,
        v,
        source: Box::new(e),
    };
    let pixels = match backend {
        // Embedding lookups only need the key; the grid may be pixel-less.
        DescriptorBackend::EmbeddingFile(_) => array.view(u, v).unwrap_or(&[]),
        _ => array
            .view(u, v)
            .ok_or_else(|| at(Error::InvalidArgument("position is not a valid view".into())))?,
    };
    let view = ViewInput {
        pixels,
        width: array.width,
        height: array.height,
    };
    backend.describe(view, &array.image_id, u, v).map_err(at)
}

/// Describes every view of `seq`, fanning out over the current rayon pool.
/// Output order always follows `seq`.
pub fn describe_sequence(
    backend: &DescriptorBackend,
    array: &MultiViewSAArray,
    seq: &ViewSequence,
) -> Result<Vec<SpatialDescription>> {
    seq.positions
        .par_iter()
        .map(|&p| describe_at(backend, array, p))
        .collect()
}

pub fn describe_sequence_serial(
    backend: &DescriptorBackend,
    array: &MultiViewSAArray,
    seq: &ViewSequence,
) -> Result<Vec<SpatialDescription>> {
    seq.positions
        .iter()
        .map(|&p| describe_at(backend, array, p))
        .collect()
}

/// Serializable backend choice, as given on the command line:
/// `toy-cnn[:dim[:seed]]`, `random-projection[:dim[:seed]]`, `embedding:<path>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    EmbeddingFile { path: PathBuf },
    ToyCnn { dim: usize, seed: u64 },
    RandomProjection { dim: usize, seed: u64 },
}

impl BackendSpec {
    pub fn build(&self, width: usize, height: usize) -> Result<DescriptorBackend> {
        Ok(match self {
            BackendSpec::EmbeddingFile { path } => DescriptorBackend::EmbeddingFile(EmbeddingIndex::load(path)?),
            BackendSpec::ToyCnn { dim, seed } => DescriptorBackend::ToyCnn(ToyCnn::new(width, height, *dim, *seed)?),
            BackendSpec::RandomProjection { dim, seed } => {
                DescriptorBackend::RandomProjection(RandomProjection::new(width, height, *dim, *seed)?)
            }
        })
    }

    pub fn reads_pixels(&self) -> bool {
        !matches!(self, BackendSpec::EmbeddingFile { .. })
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::EmbeddingFile { path } => write!(f, "embedding:{}", path.display()),
            BackendSpec::ToyCnn { dim, seed } => write!(f, "toy-cnn:{dim}:{seed}"),
            BackendSpec::RandomProjection { dim, seed } => write!(f, "random-projection:{dim}:{seed}"),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("backend {s:?}: expected toy-cnn[:dim[:seed]], random-projection[:dim[:seed]] or embedding:<path>"));
        if let Some(path) = s.strip_prefix("embedding:") {
            if path.is_empty() {
                return Err(bad());
            }
            return Ok(BackendSpec::EmbeddingFile { path: path.into() });
        }
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let dim = match parts.next() {
            Some(d) => d.parse().map_err(|_| bad())?,
            None => DEFAULT_DESCRIPTION_DIM,
        };
        let seed = match parts.next() {
            Some(d) => d.parse().map_err(|_| bad())?,
            None => 0,
        };
        if parts.next().is_some() || dim == 0 {
            return Err(bad());
        }
        match kind {
            "toy-cnn" => Ok(BackendSpec::ToyCnn { dim, seed }),
            "random-projection" => Ok(BackendSpec::RandomProjection { dim, seed }),
            _ => Err(bad()),
        }
    }
}
