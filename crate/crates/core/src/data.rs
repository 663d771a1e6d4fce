//! Datasets: synthetic generators, the `VNDD` container, CSV import and IDX
//! reading.
//!
//! `VNDD` layout (little-endian): magic `VNDD`, `u32` version, `u8` feature
//! dtype (0 = f64, 1 = u8), `u32` rank, `u64` dims, feature payload, `u32`
//! class count, one `u32` label per example, one `u8` split tag per example
//! (0 train, 1 test, 2 ood), then a length-prefixed provenance string.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{Reader, Writer};
use crate::error::{Result, VndError};
use crate::exec::stream_rng;
use crate::model::{Targets, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"VNDD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Ood,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Ood => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            2 => Ok(Split::Ood),
            _ => Err(VndError::Format(format!("unknown split tag {t}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "ood" => Ok(Split::Ood),
            other => Err(VndError::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    U8,
}

/// Features (row-major, first dimension = example), labels and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    /// `[n, d]` or `[n, c, h, w]`.
    pub shape: Vec<usize>,
    pub features: Vec<f64>,
    /// Storage type of the features; `U8` datasets hold integers in `0..=255`
    /// and are scaled to `[0, 1]` when converted to tensors.
    pub dtype: Dtype,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Vec<Split>,
    pub provenance: String,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.len() != 2 && self.shape.len() != 4 {
            return Err(VndError::Format(format!(
                "features must be rank 2 or 4, got {:?}",
                self.shape
            )));
        }
        let n = self.shape[0];
        if self.labels.len() != n || self.splits.len() != n {
            return Err(VndError::Format(format!(
                "{n} examples but {} labels and {} split tags",
                self.labels.len(),
                self.splits.len()
            )));
        }
        if self.features.len() != n * self.row_len() {
            return Err(VndError::Format("feature payload does not match shape".into()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(VndError::Format(format!("label {l} outside {} classes", self.classes)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(VndError::Format("non-finite feature".into()));
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    fn scale(&self) -> f64 {
        match self.dtype {
            Dtype::F64 => 1.0,
            Dtype::U8 => 1.0 / 255.0,
        }
    }

    /// Features of the given rows as a model input tensor.
    pub fn tensor(&self, idx: &[usize]) -> Tensor {
        let d = self.row_len();
        let s = self.scale();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(self.features[i * d..(i + 1) * d].iter().map(|v| v * s));
        }
        if self.shape.len() == 2 {
            Tensor::Flat(Array2::from_shape_vec((idx.len(), d), data).expect("row-major"))
        } else {
            let (c, h, w) = (self.shape[1], self.shape[2], self.shape[3]);
            Tensor::Image(Array4::from_shape_vec((idx.len(), c, h, w), data).expect("row-major"))
        }
    }

    pub fn targets(&self, idx: &[usize]) -> Targets {
        Targets::Classes(idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn split(&self, split: Split) -> (Tensor, Targets) {
        let idx = self.indices(split);
        (self.tensor(&idx), self.targets(&idx))
    }

    /// Concatenation of datasets with identical per-example shape.
    pub fn concat(parts: &[DatasetHandle]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| VndError::InvalidParameter("nothing to concatenate".into()))?;
        let mut out = first.clone();
        for p in &parts[1..] {
            if p.shape[1..] != first.shape[1..] || p.dtype != first.dtype {
                return Err(VndError::ShapeMismatch("datasets differ in feature shape".into()));
            }
            out.shape[0] += p.shape[0];
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
            out.splits.extend_from_slice(&p.splits);
            out.classes = out.classes.max(p.classes);
            out.provenance = format!("{} + {}", out.provenance, p.provenance);
        }
        Ok(out)
    }

    /// First `n` examples (stable order).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let d = self.row_len();
        let mut out = self.clone();
        out.shape[0] = n;
        out.features.truncate(n * d);
        out.labels.truncate(n);
        out.splits.truncate(n);
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = Writer::default();
        w.buf.extend_from_slice(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u8(match self.dtype {
            Dtype::F64 => 0,
            Dtype::U8 => 1,
        });
        w.u32(self.shape.len() as u32);
        for d in &self.shape {
            w.u64(*d as u64);
        }
        match self.dtype {
            Dtype::F64 => w.f64s(&self.features),
            Dtype::U8 => w.buf.extend(self.features.iter().map(|&v| v as u8)),
        }
        w.u32(self.classes as u32);
        for l in &self.labels {
            w.u32(*l as u32);
        }
        w.buf.extend(self.splits.iter().map(|s| s.tag()));
        w.str(&self.provenance);
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        if r.take(4)? != DATASET_MAGIC {
            return Err(VndError::Format("not a dataset file: bad magic".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(VndError::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let dtype = match r.u8()? {
            0 => Dtype::F64,
            1 => Dtype::U8,
            t => return Err(VndError::Format(format!("unknown feature dtype {t}"))),
        };
        let rank = r.u32()? as usize;
        if rank != 2 && rank != 4 {
            return Err(VndError::Format(format!("feature rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| VndError::Format("shape overflows".into()))?;
        let features = match dtype {
            Dtype::F64 => r.f64s(count)?,
            Dtype::U8 => r.take(count)?.iter().map(|&b| f64::from(b)).collect(),
        };
        let classes = r.u32()? as usize;
        let n = shape[0];
        let labels = (0..n)
            .map(|_| r.u32().map(|l| l as usize))
            .collect::<Result<Vec<_>>>()?;
        let splits = r
            .take(n)?
            .iter()
            .map(|&t| Split::from_tag(t))
            .collect::<Result<Vec<_>>>()?;
        let provenance = r.str()?;
        r.finish()?;
        let out = Self {
            shape,
            features,
            dtype,
            labels,
            classes,
            splits,
            provenance,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn flat(points: Vec<[f64; 2]>, labels: Vec<usize>, classes: usize, split: Split, provenance: String) -> DatasetHandle {
    let n = labels.len();
    DatasetHandle {
        shape: vec![n, 2],
        features: points.into_iter().flatten().collect(),
        dtype: Dtype::F64,
        labels,
        classes,
        splits: vec![split; n],
        provenance,
    }
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|_| VndError::InvalidParameter(format!("noise must be >= 0, got {sd}")))
}

/// Two interleaved half circles, `n / 2` per class (class 0 gets the odd
/// example), with isotropic Gaussian noise. Classes alternate in the output.
pub fn two_moons(n: usize, noise: f64, seed: u64, stream: u64, split: Split) -> Result<DatasetHandle> {
    let dist = normal(noise)?;
    let mut rng = stream_rng(seed, stream);
    let n_outer = n.div_ceil(2);
    let n_inner = n / 2;
    let angle = |i: usize, m: usize| if m > 1 { PI * i as f64 / (m - 1) as f64 } else { 0.0 };
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer.max(n_inner) {
        if i < n_outer {
            let t = angle(i, n_outer);
            points.push([t.cos(), t.sin()]);
            labels.push(0);
        }
        if i < n_inner {
            let t = angle(i, n_inner);
            points.push([1.0 - t.cos(), 0.5 - t.sin()]);
            labels.push(1);
        }
    }
    for p in &mut points {
        p[0] += dist.sample(&mut rng);
        p[1] += dist.sample(&mut rng);
    }
    Ok(flat(
        points,
        labels,
        2,
        split,
        format!("two_moons(n={n}, noise={noise}, seed={seed}, stream={stream})"),
    ))
}

/// `classes` isotropic Gaussian blobs with centres on a circle of radius 3.
pub fn gaussian_blobs(
    n: usize,
    classes: usize,
    noise: f64,
    seed: u64,
    stream: u64,
    split: Split,
) -> Result<DatasetHandle> {
    if classes == 0 {
        return Err(VndError::InvalidParameter("blobs need at least one class".into()));
    }
    let dist = normal(noise)?;
    let mut rng = stream_rng(seed, stream);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let a = 2.0 * PI * c as f64 / classes as f64;
        points.push([
            3.0 * a.cos() + dist.sample(&mut rng),
            3.0 * a.sin() + dist.sample(&mut rng),
        ]);
        labels.push(c);
    }
    Ok(flat(
        points,
        labels,
        classes,
        split,
        format!("gaussian_blobs(n={n}, classes={classes}, noise={noise}, seed={seed}, stream={stream})"),
    ))
}

/// Half-width of the box that contains the two-moons support for `noise`,
/// centred on the moons.
fn moons_box(noise: f64) -> ([f64; 2], [f64; 2]) {
    let margin = 0.5 + 5.0 * noise;
    ([-1.0 - margin, -0.5 - margin], [2.0 + margin, 1.0 + margin])
}

/// Points on the white squares of a checkerboard over `[-6, 7]^2`, outside a
/// margin around the two-moons support. Labels are the square parity.
pub fn checkerboard_ood(n: usize, noise: f64, seed: u64, stream: u64) -> Result<DatasetHandle> {
    if !(noise >= 0.0) {
        return Err(VndError::InvalidParameter(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = stream_rng(seed, stream);
    let (lo, hi) = moons_box(noise);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while points.len() < n {
        let x = rng.random_range(-6.0..7.0);
        let y = rng.random_range(-6.0..7.0);
        if x > lo[0] && x < hi[0] && y > lo[1] && y < hi[1] {
            continue;
        }
        let cell = ((x / 1.5).floor() as i64 + (y / 1.5).floor() as i64).rem_euclid(2);
        if cell == 0 {
            points.push([x, y]);
            labels.push(((x / 3.0).floor() as i64).rem_euclid(2) as usize);
        }
    }
    Ok(flat(
        points,
        labels,
        2,
        Split::Ood,
        format!("checkerboard_ood(n={n}, noise={noise}, seed={seed}, stream={stream})"),
    ))
}

/// Parses `f1,...,fd,label[,split]` rows. A first line that does not parse
/// as numbers is treated as a header; rows without a split column are train.
pub fn import_csv(text: &str, provenance: &str) -> Result<DatasetHandle> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .peekable();
    if let Some((_, first)) = lines.peek() {
        if first
            .split(',')
            .next()
            .is_some_and(|c| c.trim().parse::<f64>().is_err())
        {
            lines.next();
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut width = None;
    for (no, line) in lines {
        let mut cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let split = match cols.last().map(|c| Split::parse(c)) {
            Some(Ok(s)) => {
                cols.pop();
                s
            }
            _ => Split::Train,
        };
        if cols.len() < 2 {
            return Err(VndError::Format(format!("line {}: need features and a label", no + 1)));
        }
        let label_str = cols.pop().expect("len >= 2");
        let label = label_str
            .parse::<usize>()
            .map_err(|_| VndError::Format(format!("line {}: bad label `{label_str}`", no + 1)))?;
        if *width.get_or_insert(cols.len()) != cols.len() {
            return Err(VndError::Format(format!(
                "line {}: expected {} features",
                no + 1,
                width.unwrap_or(0)
            )));
        }
        for c in cols {
            features.push(
                c.parse::<f64>()
                    .map_err(|_| VndError::Format(format!("line {}: bad number `{c}`", no + 1)))?,
            );
        }
        labels.push(label);
        splits.push(split);
    }
    let d = width.ok_or_else(|| VndError::Format("CSV has no data rows".into()))?;
    let out = DatasetHandle {
        shape: vec![labels.len(), d],
        features,
        dtype: Dtype::F64,
        classes: labels.iter().max().map_or(0, |m| m + 1),
        labels,
        splits,
        provenance: provenance.to_string(),
    };
    out.validate()?;
    Ok(out)
}

/// Unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX file with u8 payload (`0x0000 08 NN` magic, big-endian
/// dims). `take` keeps only the first examples along dimension 0.
pub fn parse_idx(bytes: &[u8], take: Option<usize>) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(VndError::Format("truncated IDX header".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(VndError::Format(format!(
            "bad IDX magic {:02x}{:02x}{:02x}{:02x}; only unsigned-byte payloads are supported",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(VndError::Format("IDX rank 0".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(VndError::Format("truncated IDX header".into()));
    }
    let mut dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| VndError::Format("IDX dims overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() != total {
        return Err(VndError::Format(format!(
            "truncated IDX payload: header declares {total} bytes, file has {}",
            payload.len()
        )));
    }
    let mut data = payload.to_vec();
    if let Some(n) = take {
        let n = n.min(dims[0]);
        let per = total.checked_div(dims[0]).unwrap_or(0);
        data.truncate(n * per);
        dims[0] = n;
    }
    Ok(IdxTensor { dims, data })
}

pub fn read_idx(path: &Path, take: Option<usize>) -> Result<IdxTensor> {
    parse_idx(&std::fs::read(path)?, take)
}

/// Image dataset from an IDX image tensor (`[n, h, w]`) and label vector.
pub fn idx_dataset(images: &IdxTensor, labels: &IdxTensor, split: Split, provenance: &str) -> Result<DatasetHandle> {
    if images.dims.len() != 3 || labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
        return Err(VndError::Format(format!(
            "IDX images {:?} and labels {:?} do not match",
            images.dims, labels.dims
        )));
    }
    let n = images.dims[0];
    let out = DatasetHandle {
        shape: vec![n, 1, images.dims[1], images.dims[2]],
        features: images.data.iter().map(|&b| f64::from(b)).collect(),
        dtype: Dtype::U8,
        classes: labels.data.iter().max().map_or(0, |&m| m as usize + 1),
        labels: labels.data.iter().map(|&l| l as usize).collect(),
        splits: vec![split; n],
        provenance: provenance.to_string(),
    };
    out.validate()?;
    Ok(out)
}
