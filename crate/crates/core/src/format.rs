//! TDM1 (dense) and TCM1 (clustered) model containers, plus size accounting.
//!
//! All multi-byte fields are little-endian.
//!
//! TDM1:
//! ```text
//! "TDM1" | version u32 = 1 | tensor_count u32
//! per tensor: name_len u16 | name (UTF-8) | ndims u8 | dims u32 × ndims
//!             | dtype u8 (0 = FP32) | FP32 payload
//! ```
//!
//! TCM1:
//! ```text
//! "TCM1" | version u32 = 1 | mode u8 (0 = entire model, 1 = per layer)
//! [mode 0 only: shared_len u16 | FP32 centroids × shared_len]
//! tensor_count u32
//! per tensor: tensor header as in TDM1 | storage u8
//!   storage 0: FP32 payload
//!   storage 1: codebook_len u16 | [mode 1 only: FP32 centroids × codebook_len]
//!              | u8 index payload
//! ```
//! In mode 0 every clustered tensor's `codebook_len` must equal `shared_len`.
//! Loaders reject trailing bytes.

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::clustering::{ClusterMode, Codebook};
use crate::error::{Error, ParseErrorKind, Result};
use crate::model::{
    is_clusterable, is_metadata, ClusteredModel, ClusteredTensor, DenseModel, Model, NamedTensor,
    StoredTensor,
};
use crate::tensor::Tensor;

pub const DENSE_MAGIC: [u8; 4] = *b"TDM1";
pub const CLUSTERED_MAGIC: [u8; 4] = *b"TCM1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const STORAGE_DENSE: u8 = 0;
const STORAGE_CLUSTERED: u8 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn header(&mut self, name: &str, shape: &[usize]) {
        self.u16(name.len() as u16);
        self.buf.extend_from_slice(name.as_bytes());
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d as u32);
        }
        self.u8(DTYPE_F32);
    }
}

fn check_writable(name: &str, shape: &[usize]) -> Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(Error::Config(format!("tensor name of {} bytes is too long", name.len())));
    }
    if shape.len() > u8::MAX as usize || shape.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::Config(format!("{name}: shape {shape:?} not representable")));
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(self.pos, ParseErrorKind::Truncated));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let at = self.pos;
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::parse(at, ParseErrorKind::InvalidShape))?;
        let raw = self.take(bytes)?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(at, ParseErrorKind::NonFinite));
        }
        Ok(vals)
    }
    fn magic(&mut self, expect: [u8; 4]) -> Result<()> {
        let at = self.pos;
        if self.take(4)? != expect {
            return Err(Error::parse(at, ParseErrorKind::BadMagic));
        }
        let at = self.pos;
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::parse(at, ParseErrorKind::UnsupportedVersion(v)));
        }
        Ok(())
    }
    /// Reads a tensor header, returning `(name, shape, element_count)`.
    fn header(&mut self) -> Result<(String, Vec<usize>, usize)> {
        let len = self.u16()? as usize;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::parse(at, ParseErrorKind::InvalidUtf8))?
            .to_owned();
        let at = self.pos;
        let ndims = self.u8()? as usize;
        if ndims == 0 {
            return Err(Error::parse(at, ParseErrorKind::InvalidShape));
        }
        let mut shape = Vec::with_capacity(ndims);
        let mut count = 1usize;
        for _ in 0..ndims {
            let at = self.pos;
            let d = self.u32()? as usize;
            count = match count.checked_mul(d) {
                Some(c) if d > 0 => c,
                _ => return Err(Error::parse(at, ParseErrorKind::InvalidShape)),
            };
            shape.push(d);
        }
        let at = self.pos;
        let dtype = self.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::parse(at, ParseErrorKind::UnsupportedDtype(dtype)));
        }
        Ok((name, shape, count))
    }
    fn codebook(&mut self, len: usize) -> Result<Codebook> {
        let at = self.pos;
        let vals = self.f32s(len)?;
        Codebook::new(vals).map_err(|e| Error::parse(at, ParseErrorKind::InvalidCodebook(e.to_string())))
    }
    fn finish(&self) -> Result<()> {
        let rest = self.buf.len() - self.pos;
        if rest != 0 {
            return Err(Error::parse(self.pos, ParseErrorKind::TrailingBytes(rest)));
        }
        Ok(())
    }
}

fn unique_name(seen: &mut std::collections::HashSet<String>, name: &str, at: usize) -> Result<()> {
    if !seen.insert(name.to_owned()) {
        return Err(Error::parse(at, ParseErrorKind::DuplicateName(name.to_owned())));
    }
    Ok(())
}

pub fn save_dense(model: &DenseModel) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&DENSE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(model.tensors().len() as u32);
    for t in model.tensors() {
        check_writable(&t.name, t.tensor.shape())?;
        w.header(&t.name, t.tensor.shape());
        w.f32s(t.tensor.data());
    }
    Ok(w.buf)
}

pub fn load_dense(bytes: &[u8]) -> Result<DenseModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(DENSE_MAGIC)?;
    let count = r.u32()?;
    let mut seen = std::collections::HashSet::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let (name, shape, n) = r.header()?;
        unique_name(&mut seen, &name, at)?;
        let data = r.f32s(n)?;
        tensors.push(NamedTensor::new(name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    DenseModel::new(tensors)
}

pub fn save_clustered(model: &ClusteredModel) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&CLUSTERED_MAGIC);
    w.u32(FORMAT_VERSION);
    match model.shared_codebook() {
        Some(cb) => {
            w.u8(0);
            w.u16(cb.len() as u16);
            w.f32s(cb.centroids());
        }
        None => w.u8(1),
    }
    w.u32(model.tensors().len() as u32);
    for t in model.tensors() {
        check_writable(t.name(), t.shape())?;
        w.header(t.name(), t.shape());
        match t {
            StoredTensor::Dense(nt) => {
                w.u8(STORAGE_DENSE);
                w.f32s(nt.tensor.data());
            }
            StoredTensor::Clustered(ct) => {
                w.u8(STORAGE_CLUSTERED);
                w.u16(ct.codebook().len() as u16);
                if model.mode() == ClusterMode::PerLayer {
                    w.f32s(ct.codebook().centroids());
                }
                w.buf.extend_from_slice(ct.indices());
            }
        }
    }
    Ok(w.buf)
}

pub fn load_clustered(bytes: &[u8]) -> Result<ClusteredModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(CLUSTERED_MAGIC)?;
    let at = r.pos;
    let mode = match r.u8()? {
        0 => ClusterMode::EntireModel,
        1 => ClusterMode::PerLayer,
        m => return Err(Error::parse(at, ParseErrorKind::UnknownMode(m))),
    };
    let shared = if mode == ClusterMode::EntireModel {
        let len = r.u16()? as usize;
        Some(Arc::new(r.codebook(len)?))
    } else {
        None
    };
    let count = r.u32()?;
    let mut seen = std::collections::HashSet::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let (name, shape, n) = r.header()?;
        unique_name(&mut seen, &name, at)?;
        let at = r.pos;
        match r.u8()? {
            STORAGE_DENSE => {
                let data = r.f32s(n)?;
                tensors.push(StoredTensor::Dense(NamedTensor::new(name, Tensor::new(shape, data)?)));
            }
            STORAGE_CLUSTERED => {
                let at = r.pos;
                let len = r.u16()? as usize;
                let codebook = match &shared {
                    Some(cb) => {
                        if len != cb.len() {
                            return Err(Error::parse(
                                at,
                                ParseErrorKind::InvalidCodebook(format!(
                                    "length {len} differs from shared table of {}",
                                    cb.len()
                                )),
                            ));
                        }
                        cb.clone()
                    }
                    None => Arc::new(r.codebook(len)?),
                };
                let at = r.pos;
                let indices = r.take(n)?.to_vec();
                if let Some(pos) = indices.iter().position(|&i| usize::from(i) >= codebook.len()) {
                    return Err(Error::parse(
                        at + pos,
                        ParseErrorKind::IndexOutOfRange {
                            index: indices[pos],
                            codebook_len: codebook.len(),
                        },
                    ));
                }
                tensors.push(StoredTensor::Clustered(ClusteredTensor::new(
                    name, shape, codebook, indices,
                )?));
            }
            s => return Err(Error::parse(at, ParseErrorKind::UnknownStorage(s))),
        }
    }
    r.finish()?;
    ClusteredModel::new(mode, shared, tensors)
}

pub fn save_model(model: &Model) -> Result<Vec<u8>> {
    match model {
        Model::Dense(m) => save_dense(m),
        Model::Clustered(m) => save_clustered(m),
    }
}

/// Loads either format, dispatching on the magic bytes.
pub fn load_model(bytes: &[u8]) -> Result<Model> {
    if bytes.starts_with(&CLUSTERED_MAGIC) {
        load_clustered(bytes).map(Model::Clustered)
    } else {
        load_dense(bytes).map(Model::Dense)
    }
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_model(&bytes)
}

pub fn write_model_file(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    let bytes = save_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parameter storage footprint. Container headers and metadata tensors are
/// not counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SizeBreakdown {
    /// Bytes of clusterable tensors (4 per value dense, 1 per value clustered).
    pub clusterable_bytes: u64,
    /// Bytes of tensors never clustered (always 4 per value).
    pub excluded_bytes: u64,
    /// Centroid tables, 4 bytes per entry.
    pub codebook_bytes: u64,
    /// `clusterable_bytes + excluded_bytes`.
    pub param_bytes: u64,
    /// `param_bytes + codebook_bytes`.
    pub total: u64,
}

impl SizeBreakdown {
    fn new(clusterable_bytes: u64, excluded_bytes: u64, codebook_bytes: u64) -> Self {
        let param_bytes = clusterable_bytes + excluded_bytes;
        Self {
            clusterable_bytes,
            excluded_bytes,
            codebook_bytes,
            param_bytes,
            total: param_bytes + codebook_bytes,
        }
    }

    /// Clusterable payload plus tables: the part clustering acts on.
    pub fn clusterable_total(&self) -> u64 {
        self.clusterable_bytes + self.codebook_bytes
    }
}

pub fn dense_size_bytes(model: &DenseModel) -> SizeBreakdown {
    let (mut cl, mut ex) = (0u64, 0u64);
    for t in model.tensors().iter().filter(|t| !is_metadata(&t.name)) {
        let b = 4 * t.tensor.len() as u64;
        if is_clusterable(&t.name, t.tensor.shape()) {
            cl += b;
        } else {
            ex += b;
        }
    }
    SizeBreakdown::new(cl, ex, 0)
}

pub fn clustered_size_bytes(model: &ClusteredModel) -> SizeBreakdown {
    let (mut cl, mut ex, mut cb) = (0u64, 0u64, 0u64);
    for t in model.tensors().iter().filter(|t| !is_metadata(t.name())) {
        match t {
            StoredTensor::Clustered(ct) => {
                cl += ct.len() as u64;
                if model.mode() == ClusterMode::PerLayer {
                    cb += ct.codebook().byte_size() as u64;
                }
            }
            StoredTensor::Dense(nt) => {
                let b = 4 * nt.tensor.len() as u64;
                if is_clusterable(&nt.name, nt.tensor.shape()) {
                    cl += b;
                } else {
                    ex += b;
                }
            }
        }
    }
    if let Some(shared) = model.shared_codebook() {
        cb += shared.byte_size() as u64;
    }
    SizeBreakdown::new(cl, ex, cb)
}

pub fn model_size_bytes(model: &Model) -> SizeBreakdown {
    match model {
        Model::Dense(m) => dense_size_bytes(m),
        Model::Clustered(m) => clustered_size_bytes(m),
    }
}

/// Size of a model that has not been materialised: `clusterable_params`
/// weights in `clustered_tensors` tensors, all clustered to `clusters`
/// entries, plus `excluded_params` dense values.
pub fn planned_size_bytes(
    clusterable_params: u64,
    excluded_params: u64,
    mode: ClusterMode,
    clustered_tensors: u64,
    clusters: u64,
) -> SizeBreakdown {
    let tables = match mode {
        ClusterMode::EntireModel => 1,
        ClusterMode::PerLayer => clustered_tensors,
    };
    SizeBreakdown::new(clusterable_params, 4 * excluded_params, 4 * clusters * tables)
}

/// `dense_size / clustered_size`.
pub fn compression_ratio(dense_size: u64, clustered_size: u64) -> Result<f64> {
    if dense_size == 0 || clustered_size == 0 {
        return Err(Error::Domain(format!(
            "compression ratio needs positive sizes, got {dense_size} and {clustered_size}"
        )));
    }
    Ok(dense_size as f64 / clustered_size as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{cluster_model, ClusteringConfig};

    fn scalar_model() -> DenseModel {
        DenseModel::new(vec![NamedTensor::new("w", Tensor::scalar(1.5).unwrap())]).unwrap()
    }

    #[test]
    fn single_scalar_file_is_25_bytes() {
        let bytes = save_dense(&scalar_model()).unwrap();
        assert_eq!(bytes.len(), 25);
        assert_eq!(&bytes[..4], &[0x54, 0x44, 0x4D, 0x31]);
        assert_eq!(load_dense(&bytes).unwrap(), scalar_model());
    }

    #[test]
    fn dense_parse_errors() {
        let bytes = save_dense(&scalar_model()).unwrap();
        let err = |b: &[u8]| match load_dense(b) {
            Err(Error::Parse { offset, kind }) => (offset, kind),
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err(&bytes[..24]), (21, ParseErrorKind::Truncated));

        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(err(&b), (0, ParseErrorKind::BadMagic));

        let mut b = bytes.clone();
        b[4] = 2;
        assert_eq!(err(&b), (4, ParseErrorKind::UnsupportedVersion(2)));

        let mut b = bytes.clone();
        b[14] = 0xFF;
        assert_eq!(err(&b), (14, ParseErrorKind::InvalidUtf8));

        let mut b = bytes.clone();
        b[20] = 1;
        assert_eq!(err(&b), (20, ParseErrorKind::UnsupportedDtype(1)));

        let mut b = bytes.clone();
        b.push(0);
        assert_eq!(err(&b), (25, ParseErrorKind::TrailingBytes(1)));

        let mut b = bytes;
        b[21..25].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(err(&b), (21, ParseErrorKind::NonFinite));
    }

    #[test]
    fn entire_model_file_has_one_table() {
        let w = |n: &str, seed: f32| {
            NamedTensor::new(
                n,
                Tensor::new(vec![8, 8], (0..64).map(|i| (i as f32 * seed).sin()).collect()).unwrap(),
            )
        };
        let m = DenseModel::new(vec![w("a.weight", 0.3), w("b.weight", 0.7), w("c.weight", 1.1)]).unwrap();
        let (cm, _) = cluster_model(&m, &ClusteringConfig::new(4, ClusterMode::EntireModel, 1)).unwrap();
        let bytes = save_clustered(&cm).unwrap();
        // 4 magic + 4 version + 1 mode + 2 len + 16 centroids + 4 count
        // + 3 × (2 + 8 name + 1 + 8 dims + 1 dtype + 1 storage + 2 len + 64 indices)
        assert_eq!(bytes.len(), 31 + 3 * 87);
        let back = load_clustered(&bytes).unwrap();
        assert_eq!(back, cm);
        assert_eq!(back.codebook_count(), 1);
        assert_eq!(save_clustered(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_index_detected_on_load() {
        let m = DenseModel::new(vec![NamedTensor::new(
            "a.weight",
            Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        )])
        .unwrap();
        let (cm, _) = cluster_model(&m, &ClusteringConfig::new(2, ClusterMode::PerLayer, 1)).unwrap();
        let mut bytes = save_clustered(&cm).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 9;
        assert!(matches!(
            load_clustered(&bytes),
            Err(Error::Parse {
                kind: ParseErrorKind::IndexOutOfRange { index: 9, codebook_len: 2 },
                ..
            })
        ));
    }

    #[test]
    fn codebook_sizes() {
        let cb64 = Codebook::new((0..64).map(|i| i as f32).collect()).unwrap();
        let cb256 = Codebook::new((0..256).map(|i| i as f32).collect()).unwrap();
        assert_eq!(cb64.byte_size(), 256);
        assert_eq!(cb256.byte_size(), 1024);
    }

    #[test]
    fn ratio_domain() {
        assert!(matches!(compression_ratio(0, 4), Err(Error::Domain(_))));
        assert!(matches!(compression_ratio(4, 0), Err(Error::Domain(_))));
        assert_eq!(compression_ratio(8, 2).unwrap(), 4.0);
    }

    #[test]
    fn all_excluded_ratio_is_one() {
        let m = DenseModel::new(vec![
            NamedTensor::new("a.bias", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()),
            NamedTensor::new("w", Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap()),
        ])
        .unwrap();
        let cm = ClusteredModel::new(
            ClusterMode::PerLayer,
            None,
            m.tensors().iter().cloned().map(StoredTensor::Dense).collect(),
        )
        .unwrap();
        let d = dense_size_bytes(&m);
        let c = clustered_size_bytes(&cm);
        assert_eq!(d.total, 28);
        assert_eq!(compression_ratio(d.total, c.total).unwrap(), 1.0);
    }
}
