//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UGSEP"  u32 version  u32 len  <len bytes of JSON {"run": RunConfig, "stack": StackConfig}>
//! u32 record count, then per record:
//!   u32 len  <name>  u8 dtype (0 = f32, 1 = f64, 2 = q8)  u32 ndim  ndim × u64 extents
//!   f32/f64: row-major payload
//!   q8:      u8 format (0 = int8, 1 = fp8-e4m3)  rows·cols code bytes  rows × f32 scales
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ugsep_core::numeric::{Dtype, ParamMut, ParamRef, Params};
use ugsep_core::quant::{quantize_stack, QuantFormat, QuantScheme, QuantizedMatrix};
use ugsep_core::ugsep::{Stack, StackConfig};
use ugsep_core::{Scalar, Tensor};

use crate::config::RunConfig;
use crate::CliError;

pub const MAGIC: &[u8; 5] = b"UGSEP";
pub const VERSION: u32 = 1;

const TAG_F32: u8 = 0;
const TAG_F64: u8 = 1;
const TAG_Q8: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub run: RunConfig,
    pub stack: StackConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    F32(Stack<f32>),
    F64(Stack<f64>),
    Q8F32(Stack<f32, QuantizedMatrix>),
    Q8F64(Stack<f64, QuantizedMatrix>),
}

impl Model {
    pub fn is_quantized(&self) -> bool {
        matches!(self, Model::Q8F32(_) | Model::Q8F64(_))
    }

    pub fn stack_config(&self) -> &StackConfig {
        match self {
            Model::F32(s) => &s.cfg,
            Model::F64(s) => &s.cfg,
            Model::Q8F32(s) => &s.cfg,
            Model::Q8F64(s) => &s.cfg,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: Model,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Usage(format!("invalid checkpoint: {}", msg.into()))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_header(out: &mut Vec<u8>, name: &str, tag: u8, shape: &[usize]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(tag);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn dtype_tag(d: Dtype) -> u8 {
    match d {
        Dtype::F32 => TAG_F32,
        Dtype::F64 => TAG_F64,
    }
}

fn put_dense<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) {
    put_header(out, name, dtype_tag(S::DTYPE), t.shape());
    for &v in t.data() {
        v.write_le(out);
    }
}

/// A weight type that can be stored as one checkpoint record.
pub trait WeightRecord<S: Scalar>: Sized {
    fn dims(&self) -> Vec<usize>;

    fn write(&self, name: &str, out: &mut Vec<u8>);

    fn read(rec: &RawRecord) -> Result<Self, CliError>;
}

impl<S: Scalar> WeightRecord<S> for Tensor<S> {
    fn dims(&self) -> Vec<usize> {
        self.shape().to_vec()
    }

    fn write(&self, name: &str, out: &mut Vec<u8>) {
        put_dense(out, name, self);
    }

    fn read(rec: &RawRecord) -> Result<Self, CliError> {
        rec.dense()
    }
}

impl<S: Scalar> WeightRecord<S> for QuantizedMatrix {
    fn dims(&self) -> Vec<usize> {
        self.shape().to_vec()
    }

    fn write(&self, name: &str, out: &mut Vec<u8>) {
        put_header(out, name, TAG_Q8, &self.shape());
        out.push(self.format().tag());
        out.extend_from_slice(self.codes());
        for &s in self.scales() {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }

    fn read(rec: &RawRecord) -> Result<Self, CliError> {
        let RawPayload::Q8 { format, codes, scales } = &rec.payload else {
            return Err(bad(format!("{} is not a q8 record", rec.name)));
        };
        if rec.shape.len() != 2 {
            return Err(bad(format!("{} must be 2-D", rec.name)));
        }
        Ok(QuantizedMatrix::from_parts(
            rec.shape[0],
            rec.shape[1],
            *format,
            codes.clone(),
            scales.clone(),
        )?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawPayload {
    Dense { tag: u8, bytes: Vec<u8> },
    Q8 {
        format: QuantFormat,
        codes: Vec<u8>,
        scales: Vec<f32>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: RawPayload,
}

impl RawRecord {
    fn dense<S: Scalar>(&self) -> Result<Tensor<S>, CliError> {
        let RawPayload::Dense { tag, bytes } = &self.payload else {
            return Err(bad(format!("{} is quantized where a dense array is expected", self.name)));
        };
        if *tag != dtype_tag(S::DTYPE) {
            return Err(bad(format!("{} has mixed dtypes", self.name)));
        }
        let w = S::DTYPE.size_in_bytes();
        let data = bytes.chunks_exact(w).map(S::read_le).collect();
        Ok(Tensor::new(self.shape.clone(), data)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<RawRecord, CliError> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| bad("record name is not UTF-8"))?;
        let tag = self.u8()?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("extent overflow"))?;
        let payload = match tag {
            TAG_F32 | TAG_F64 => {
                let w = if tag == TAG_F32 { 4 } else { 8 };
                let n = numel.checked_mul(w).ok_or_else(|| bad("extent overflow"))?;
                RawPayload::Dense {
                    tag,
                    bytes: self.take(n)?.to_vec(),
                }
            }
            TAG_Q8 => {
                if ndim != 2 {
                    return Err(bad(format!("q8 record {name} must be 2-D")));
                }
                let format = QuantFormat::from_tag(self.u8()?).ok_or_else(|| bad("unknown quant format"))?;
                let codes = self.take(numel)?.to_vec();
                let scales = self
                    .take(shape[0].checked_mul(4).ok_or_else(|| bad("extent overflow"))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                RawPayload::Q8 { format, codes, scales }
            }
            t => return Err(bad(format!("unknown dtype tag {t} for {name}"))),
        };
        Ok(RawRecord { name, shape, payload })
    }
}

/// Serialises any stack whose weights can be stored.
pub fn encode<S: Scalar, W: WeightRecord<S>>(run: &RunConfig, stack: &Stack<S, W>) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        run: run.clone(),
        stack: stack.cfg.clone(),
    })
    .expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);

    let mut body = Vec::new();
    let mut count = 0u32;
    stack.visit("", &mut |name, r| {
        count += 1;
        match r {
            ParamRef::Weight(w) => w.write(&name, &mut body),
            ParamRef::Vector(t) => put_dense(&mut body, &name, t),
        }
    });
    put_u32(&mut out, count);
    out.extend_from_slice(&body);
    out
}

fn fill<S: Scalar, W: WeightRecord<S>>(stack: &mut Stack<S, W>, records: &[RawRecord]) -> Result<(), CliError> {
    let mut it = records.iter();
    let mut err = None;
    stack.visit_mut("", &mut |name, slot| {
        if err.is_some() {
            return;
        }
        let Some(rec) = it.next() else {
            err = Some(bad(format!("missing record {name}")));
            return;
        };
        if rec.name != name {
            err = Some(bad(format!("expected record {name}, found {}", rec.name)));
            return;
        }
        let res = match slot {
            ParamMut::Weight(w) => W::read(rec).and_then(|v| {
                let want = WeightRecord::<S>::dims(w);
                if want == rec.shape {
                    *w = v;
                    Ok(())
                } else {
                    Err(bad(format!("{name}: shape {:?}, expected {want:?}", rec.shape)))
                }
            }),
            ParamMut::Vector(t) => rec.dense::<S>().and_then(|v| {
                if v.shape() == t.shape() {
                    *t = v;
                    Ok(())
                } else {
                    Err(bad(format!("{name}: shape {:?}, expected {:?}", v.shape(), t.shape())))
                }
            }),
        };
        if let Err(e) = res {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = it.next() {
        return Err(bad(format!("unexpected record {}", extra.name)));
    }
    Ok(())
}

fn build<S: Scalar>(cfg: &StackConfig, records: &[RawRecord], quantized: bool) -> Result<Model, CliError>
where
    Model: From<Stack<S>> + From<Stack<S, QuantizedMatrix>>,
{
    let template = Stack::<S>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    if quantized {
        let mut q = quantize_stack(&template, QuantScheme::int8())?;
        fill(&mut q, records)?;
        Ok(q.into())
    } else {
        let mut d = template;
        fill(&mut d, records)?;
        Ok(d.into())
    }
}

impl From<Stack<f32>> for Model {
    fn from(s: Stack<f32>) -> Self {
        Model::F32(s)
    }
}

impl From<Stack<f64>> for Model {
    fn from(s: Stack<f64>) -> Self {
        Model::F64(s)
    }
}

impl From<Stack<f32, QuantizedMatrix>> for Model {
    fn from(s: Stack<f32, QuantizedMatrix>) -> Self {
        Model::Q8F32(s)
    }
}

impl From<Stack<f64, QuantizedMatrix>> for Model {
    fn from(s: Stack<f64, QuantizedMatrix>) -> Self {
        Model::Q8F64(s)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CliError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(bad("missing UGSEP magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("format version {version} is not supported (expected {VERSION})")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("header: {e}")))?;
    header.stack.validate()?;
    let count = r.u32()? as usize;
    let records = (0..count).map(|_| r.record()).collect::<Result<Vec<_>, _>>()?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let quantized = records.iter().any(|rec| matches!(rec.payload, RawPayload::Q8 { .. }));
    let vector_tag = records.iter().find_map(|rec| match rec.payload {
        RawPayload::Dense { tag, .. } => Some(tag),
        RawPayload::Q8 { .. } => None,
    });
    let model = match vector_tag {
        Some(TAG_F32) => build::<f32>(&header.stack, &records, quantized)?,
        Some(TAG_F64) => build::<f64>(&header.stack, &records, quantized)?,
        _ => return Err(bad("no dense records")),
    };
    Ok(Checkpoint { run: header.run, model })
}

pub fn save<S: Scalar, W: WeightRecord<S>>(path: &Path, run: &RunConfig, stack: &Stack<S, W>) -> Result<(), CliError> {
    std::fs::write(path, encode(run, stack))
        .map_err(|e| CliError::Failure(format!("cannot write checkpoint {}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}
