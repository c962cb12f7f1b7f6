//! Binary persistence.
//!
//! Tensor container layout (all integers little-endian):
//!
//! ```text
//! "STSG" | version u8 | header length u32 | header JSON | payload
//! ```
//!
//! The header is `{"kind", "tensors": [{"name", "dtype", "shape"}], "meta",
//! "payload_bytes"}`; the payload holds the tensors back to back, row-major,
//! in header order.
//!
//! Token files:
//!
//! ```text
//! "STSK" | version u8 | id length u32 | id UTF-8 | frames/s f64 | vocab u32 | length u64 | u16 tokens
//! ```

use std::io::Write;
use std::path::Path;

use ndarray::{Array, ArrayD, Dimension, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::codebook::{Codebook, TokenSequence, MAX_VOCAB};
use crate::dsp::MelFrameMatrix;
use crate::error::{Error, Result, StoreError};
use crate::nn::layers::{BatchNorm, Conv1d, Linear};
use crate::nn::{ClassifierHead, StudentArch, StudentModel};
use crate::reduce::PcaModel;
use crate::sgns::{EmbeddingTable, SgnsConfig};

pub const CONTAINER_MAGIC: &[u8; 4] = b"STSG";
pub const TOKEN_MAGIC: &[u8; 4] = b"STSK";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U16,
    U32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
            DType::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U16(_) => DType::U16,
            TensorData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::U16 => TensorData::U16(
                bytes.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::U32 => TensorData::U32(
                bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

macro_rules! tensor_ctor {
    ($fn:ident, $t:ty, $variant:ident) => {
        pub fn $fn<D: Dimension>(name: &str, a: &Array<$t, D>) -> Self {
            Self {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                data: TensorData::$variant(a.iter().copied().collect()),
            }
        }
    };
}

impl Tensor {
    tensor_ctor!(f32, f32, F32);
    tensor_ctor!(f64, f64, F64);
    tensor_ctor!(u16, u16, U16);
    tensor_ctor!(u32, u32, U32);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    tensors: Vec<TensorSpec>,
    meta: Value,
    payload_bytes: u64,
}

/// A kind tag, JSON metadata and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn corrupt(msg: impl Into<String>) -> Error {
    StoreError::Corrupt(msg.into()).into()
}

fn invariant(e: Error) -> Error {
    match e {
        Error::Store(s) => Error::Store(s),
        other => StoreError::Invariant(other.to_string()).into(),
    }
}

fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<()> {
    let found = bytes.get(..4).ok_or_else(|| corrupt("file shorter than its magic"))?;
    if found != magic {
        return Err(StoreError::Magic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        }
        .into());
    }
    match bytes.get(4) {
        None => Err(corrupt("missing version byte")),
        Some(&FORMAT_VERSION) => Ok(()),
        Some(&v) => Err(StoreError::Version(v).into()),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn with(mut self, t: Tensor) -> Self {
        self.tensors.push(t);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut specs = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if element_count(&t.shape) != Some(t.data.len()) {
                return Err(StoreError::Invariant(format!(
                    "tensor {} has shape {:?} but {} elements",
                    t.name,
                    t.shape,
                    t.data.len()
                ))
                .into());
            }
            t.data.write_le(&mut payload);
            specs.push(TensorSpec {
                name: t.name.clone(),
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
            });
        }
        let header = Header {
            kind: self.kind.clone(),
            tensors: specs,
            meta: self.meta.clone(),
            payload_bytes: payload.len() as u64,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
        let mut out = Vec::with_capacity(9 + json.len() + payload.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes, CONTAINER_MAGIC)?;
        let mut r = Reader { bytes, pos: 5 };
        let n = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(n, "header")?)
            .map_err(|e| corrupt(format!("header is not valid JSON: {e}")))?;
        let mut declared = 0usize;
        for t in &header.tensors {
            let bytes = element_count(&t.shape)
                .and_then(|n| n.checked_mul(t.dtype.size()))
                .and_then(|b| b.checked_add(declared));
            declared = bytes.ok_or_else(|| corrupt(format!("tensor {} is impossibly large", t.name)))?;
        }
        if declared as u64 != header.payload_bytes {
            return Err(StoreError::CountMismatch {
                declared,
                actual: header.payload_bytes as usize,
            }
            .into());
        }
        let payload = r.rest();
        if (payload.len() as u64) < header.payload_bytes {
            return Err(corrupt(format!(
                "truncated payload: {} of {} bytes",
                payload.len(),
                header.payload_bytes
            )));
        }
        if payload.len() as u64 > header.payload_bytes {
            return Err(corrupt(format!(
                "{} trailing bytes after payload",
                payload.len() as u64 - header.payload_bytes
            )));
        }
        let mut offset = 0;
        let tensors = header
            .tensors
            .into_iter()
            .map(|spec| {
                let len = element_count(&spec.shape).unwrap() * spec.dtype.size();
                let data = TensorData::read_le(spec.dtype, &payload[offset..offset + len]);
                offset += len;
                Tensor {
                    name: spec.name,
                    shape: spec.shape,
                    data,
                }
            })
            .collect();
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| corrupt(format!("{} file lacks tensor {name:?}", self.kind)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    fn array<T: Clone, D: Dimension>(
        &self,
        name: &str,
        dtype: DType,
        pick: impl Fn(&TensorData) -> Option<&Vec<T>>,
    ) -> Result<Array<T, D>> {
        let t = self.tensor(name)?;
        let data = pick(&t.data).ok_or_else(|| StoreError::Kind {
            expected: format!("{dtype:?} tensor {name}"),
            found: format!("{:?}", t.data.dtype()),
        })?;
        ArrayD::from_shape_vec(IxDyn(&t.shape), data.clone())
            .and_then(|a| a.into_dimensionality::<D>())
            .map_err(|e| StoreError::Invariant(format!("tensor {name}: {e}")).into())
    }

    pub fn f64<D: Dimension>(&self, name: &str) -> Result<Array<f64, D>> {
        self.array(name, DType::F64, |d| match d {
            TensorData::F64(v) => Some(v),
            _ => None,
        })
    }

    pub fn f32<D: Dimension>(&self, name: &str) -> Result<Array<f32, D>> {
        self.array(name, DType::F32, |d| match d {
            TensorData::F32(v) => Some(v),
            _ => None,
        })
    }

    pub fn u16<D: Dimension>(&self, name: &str) -> Result<Array<u16, D>> {
        self.array(name, DType::U16, |d| match d {
            TensorData::U16(v) => Some(v),
            _ => None,
        })
    }

    pub fn u32<D: Dimension>(&self, name: &str) -> Result<Array<u32, D>> {
        self.array(name, DType::U32, |d| match d {
            TensorData::U32(v) => Some(v),
            _ => None,
        })
    }

    /// Deserializes `meta[key]`.
    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| corrupt(format!("{} metadata lacks {key:?}", self.kind)))?;
        serde_json::from_value(v.clone()).map_err(|e| corrupt(format!("metadata {key:?}: {e}")))
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Types stored in the tensor container.
pub trait Persist: Sized {
    const KIND: &'static str;

    /// Checks the object's invariants and packs it.
    fn to_container(&self) -> Result<Container>;

    /// Unpacks and checks invariants.
    fn from_container(c: &Container) -> Result<Self>;
}

pub fn to_bytes<T: Persist>(obj: &T) -> Result<Vec<u8>> {
    obj.to_container().map_err(invariant)?.to_bytes()
}

pub fn from_bytes<T: Persist>(bytes: &[u8]) -> Result<T> {
    let c = Container::from_bytes(bytes)?;
    if c.kind != T::KIND {
        return Err(StoreError::Kind {
            expected: T::KIND.to_string(),
            found: c.kind,
        }
        .into());
    }
    T::from_container(&c).map_err(invariant)
}

pub fn save_object<T: Persist>(obj: &T, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(obj)?)
}

pub fn load_object<T: Persist>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

impl Persist for PcaModel {
    const KIND: &'static str = "pca";

    fn to_container(&self) -> Result<Container> {
        self.check_invariants()?;
        Ok(Container::new(Self::KIND, json!({ "seed": self.seed, "degenerate": self.degenerate }))
            .with(Tensor::f64("mean", &self.mean))
            .with(Tensor::f64("components", &self.components))
            .with(Tensor::f64("explained_variance", &self.explained_variance))
            .with(Tensor::f64("explained_variance_ratio", &self.explained_variance_ratio)))
    }

    fn from_container(c: &Container) -> Result<Self> {
        let m = Self {
            mean: c.f64("mean")?,
            components: c.f64("components")?,
            explained_variance: c.f64("explained_variance")?,
            explained_variance_ratio: c.f64("explained_variance_ratio")?,
            degenerate: c.meta("degenerate")?,
            seed: c.meta("seed")?,
        };
        m.check_invariants()?;
        Ok(m)
    }
}

impl Persist for Codebook {
    const KIND: &'static str = "codebook";

    fn to_container(&self) -> Result<Container> {
        self.check_invariants()?;
        let meta = json!({
            "seed": self.seed,
            "iterations_run": self.iterations_run,
        });
        // Kept out of the JSON header: a codebook built from given centroids
        // has a NaN objective, which JSON cannot carry.
        Ok(Container::new(Self::KIND, meta)
            .with(Tensor::f64("centroids", &self.centroids))
            .with(Tensor::f64("final_objective", &ndarray::arr1(&[self.final_objective])))
            .with(Tensor::f64("objective_history", &ndarray::arr1(&self.objective_history))))
    }

    fn from_container(c: &Container) -> Result<Self> {
        let b = Self {
            centroids: c.f64("centroids")?,
            seed: c.meta("seed")?,
            iterations_run: c.meta("iterations_run")?,
            final_objective: c.f64::<ndarray::Ix1>("final_objective")?.first().copied().ok_or_else(|| {
                StoreError::Invariant("final_objective must hold one value".into())
            })?,
            objective_history: c.f64::<ndarray::Ix1>("objective_history")?.to_vec(),
        };
        b.check_invariants()?;
        Ok(b)
    }
}

impl Persist for EmbeddingTable {
    const KIND: &'static str = "embeddings";

    fn to_container(&self) -> Result<Container> {
        self.check_invariants()?;
        let mut c = Container::new(Self::KIND, json!({ "config": self.config }))
            .with(Tensor::f32("input_vectors", &self.input_vectors));
        if let Some(out) = &self.output_vectors {
            c = c.with(Tensor::f32("output_vectors", out));
        }
        Ok(c)
    }

    fn from_container(c: &Container) -> Result<Self> {
        let t = Self {
            input_vectors: c.f32("input_vectors")?,
            output_vectors: if c.has("output_vectors") { Some(c.f32("output_vectors")?) } else { None },
            config: c.meta::<SgnsConfig>("config")?,
        };
        t.check_invariants()?;
        Ok(t)
    }
}

fn linear_tensors(c: Container, prefix: &str, l: &Linear) -> Container {
    c.with(Tensor::f64(&format!("{prefix}.weight"), &l.weight))
        .with(Tensor::f64(&format!("{prefix}.bias"), &l.bias))
}

fn linear_from(c: &Container, prefix: &str) -> Result<Linear> {
    Ok(Linear {
        weight: c.f64(&format!("{prefix}.weight"))?,
        bias: c.f64(&format!("{prefix}.bias"))?,
    })
}

fn bn_tensors(c: Container, prefix: &str, bn: &BatchNorm) -> Container {
    c.with(Tensor::f64(&format!("{prefix}.gamma"), &bn.gamma))
        .with(Tensor::f64(&format!("{prefix}.beta"), &bn.beta))
        .with(Tensor::f64(&format!("{prefix}.running_mean"), &bn.running_mean))
        .with(Tensor::f64(&format!("{prefix}.running_var"), &bn.running_var))
}

fn bn_from(c: &Container, prefix: &str) -> Result<BatchNorm> {
    Ok(BatchNorm {
        gamma: c.f64(&format!("{prefix}.gamma"))?,
        beta: c.f64(&format!("{prefix}.beta"))?,
        running_mean: c.f64(&format!("{prefix}.running_mean"))?,
        running_var: c.f64(&format!("{prefix}.running_var"))?,
    })
}

impl Persist for ClassifierHead {
    const KIND: &'static str = "classifier_head";

    fn to_container(&self) -> Result<Container> {
        self.check_invariants()?;
        let c = Container::new(Self::KIND, json!({}));
        let c = linear_tensors(c, "hidden", &self.hidden);
        Ok(linear_tensors(c, "output", &self.output))
    }

    fn from_container(c: &Container) -> Result<Self> {
        let h = Self {
            hidden: linear_from(c, "hidden")?,
            output: linear_from(c, "output")?,
        };
        h.check_invariants()?;
        Ok(h)
    }
}

impl Persist for StudentModel {
    const KIND: &'static str = "student";

    fn to_container(&self) -> Result<Container> {
        self.check_invariants()?;
        let c = Container::new(Self::KIND, json!({ "arch": self.arch }))
            .with(Tensor::f64("embedding", &self.embedding))
            .with(Tensor::f64("conv.weight", &self.conv.weight))
            .with(Tensor::f64("conv.bias", &self.conv.bias));
        let c = bn_tensors(c, "bn1", &self.bn1);
        let c = linear_tensors(c, "proj", &self.proj);
        let c = bn_tensors(c, "bn2", &self.bn2);
        Ok(linear_tensors(c, "head", &self.head))
    }

    fn from_container(c: &Container) -> Result<Self> {
        let m = Self {
            arch: c.meta::<StudentArch>("arch")?,
            embedding: c.f64("embedding")?,
            conv: Conv1d {
                weight: c.f64("conv.weight")?,
                bias: c.f64("conv.bias")?,
            },
            bn1: bn_from(c, "bn1")?,
            proj: linear_from(c, "proj")?,
            bn2: bn_from(c, "bn2")?,
            head: linear_from(c, "head")?,
        };
        m.check_invariants()?;
        Ok(m)
    }
}

impl Persist for MelFrameMatrix {
    const KIND: &'static str = "mel_frames";

    fn to_container(&self) -> Result<Container> {
        let meta = json!({
            "frames_per_second": self.frames_per_second,
            "normalized": self.normalized,
        });
        Ok(Container::new(Self::KIND, meta).with(Tensor::f64("frames", &self.frames)))
    }

    fn from_container(c: &Container) -> Result<Self> {
        Ok(Self {
            frames: c.f64("frames")?,
            frames_per_second: c.meta("frames_per_second")?,
            normalized: c.meta("normalized")?,
        })
    }
}

/// Rows of values keyed by an id: teacher logits per token sequence, or
/// feature vectors per clip or frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyedMatrix {
    pub ids: Vec<String>,
    pub values: ndarray::Array2<f64>,
}

impl KeyedMatrix {
    pub fn check_invariants(&self) -> Result<()> {
        if self.ids.len() != self.values.nrows() {
            return Err(Error::Data(format!(
                "{} ids for {} rows",
                self.ids.len(),
                self.values.nrows()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate row id {dup:?}")));
        }
        Ok(())
    }

    pub fn row_of(&self, id: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.ids.iter().position(|i| i == id).map(|i| self.values.row(i))
    }
}

impl Persist for KeyedMatrix {
    const KIND: &'static str = "keyed_matrix";

    fn to_container(&self) -> Result<Container> {
        self.check_invariants()?;
        Ok(Container::new(Self::KIND, json!({ "ids": self.ids })).with(Tensor::f64("values", &self.values)))
    }

    fn from_container(c: &Container) -> Result<Self> {
        let m = Self {
            ids: c.meta("ids")?,
            values: c.f64("values")?,
        };
        m.check_invariants()?;
        Ok(m)
    }
}

/// A token sequence together with the vocabulary size it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFile {
    pub sequence: TokenSequence,
    pub vocab_size: u32,
}

impl TokenFile {
    pub fn check_invariants(&self) -> Result<()> {
        let v = self.vocab_size as usize;
        if v == 0 || v > MAX_VOCAB {
            return Err(StoreError::Invariant(format!(
                "vocabulary size {v} outside 1..={MAX_VOCAB}"
            ))
            .into());
        }
        if let Some(&t) = self.sequence.tokens.iter().find(|&&t| usize::from(t) >= v) {
            return Err(StoreError::Invariant(format!("token {t} not below vocabulary size {v}")).into());
        }
        if !(self.sequence.frames_per_second > 0.0) {
            return Err(StoreError::Invariant("frames per second must be positive".into()).into());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_invariants()?;
        let id = self.sequence.clip_id.as_bytes();
        let mut out = Vec::with_capacity(33 + id.len() + 2 * self.sequence.tokens.len());
        out.extend_from_slice(TOKEN_MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&self.sequence.frames_per_second.to_le_bytes());
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        out.extend_from_slice(&(self.sequence.tokens.len() as u64).to_le_bytes());
        for t in &self.sequence.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes, TOKEN_MAGIC)?;
        let mut r = Reader { bytes, pos: 5 };
        let n = r.u32("clip id length")? as usize;
        let clip_id = String::from_utf8(r.take(n, "clip id")?.to_vec())
            .map_err(|_| corrupt("clip id is not UTF-8"))?;
        let frames_per_second = r.f64("frame rate")?;
        let vocab_size = r.u32("vocabulary size")?;
        let length = r.u64("length")?;
        let rest = r.rest();
        let declared = length.checked_mul(2).ok_or_else(|| corrupt("impossible token count"))?;
        if (rest.len() as u64) < declared {
            return Err(corrupt(format!("truncated tokens: {} of {declared} bytes", rest.len())));
        }
        if rest.len() as u64 != declared {
            return Err(StoreError::CountMismatch {
                declared: declared as usize,
                actual: rest.len(),
            }
            .into());
        }
        let tokens = rest.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        let f = Self {
            sequence: TokenSequence {
                clip_id,
                tokens,
                frames_per_second,
            },
            vocab_size,
        };
        f.check_invariants()?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// The kind tag of a container file without decoding its payload.
pub fn peek_kind(path: &Path) -> Result<String> {
    Ok(Container::read(path)?.kind)
}
