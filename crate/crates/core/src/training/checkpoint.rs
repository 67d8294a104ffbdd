//! Binary checkpoint files.
//!
//! Layout: magic `GLAD`, version u32, config blob (u32 length + canonical
//! text), record count u32, then per record: name length u16, name bytes,
//! dtype u8 (0 = f32, 1 = f64), ndim u8, dims u32 × ndim, little-endian
//! payload. All integers little-endian.

use std::path::Path;

use crate::config::{parse_pairs, RunConfig};
use crate::error::{GladError, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"GLAD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl RecordData {
    pub fn shape(&self) -> &[usize] {
        match self {
            RecordData::F32(t) => t.shape(),
            RecordData::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            RecordData::F32(_) => DType::F32,
            RecordData::F64(_) => DType::F64,
        }
    }

    /// The payload as `T`, converting if the stored type differs.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            RecordData::F32(t) => t.cast(),
            RecordData::F64(t) => t.cast(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            RecordData::F32(t) => t.data().iter().for_each(|x| x.write_le(out)),
            RecordData::F64(t) => t.data().iter().for_each(|x| x.write_le(out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub data: RecordData,
}

impl Record {
    pub fn new<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => RecordData::F32(t.cast()),
            DType::F64 => RecordData::F64(t.cast()),
        };
        Record {
            name: name.into(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed optimizer steps.
    pub step: u64,
    /// Serialized position of the data stream.
    pub rng_state: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn blob(&self) -> String {
        let mut s = self.config.to_text();
        s.push_str(&format!("state.step = {}\n", self.step));
        s.push_str(&format!("state.rng = {}\n", self.rng_state));
        s
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let blob = self.blob();
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            let shape = r.data.shape();
            if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
                return Err(GladError::Contract(format!("record {} cannot be encoded", r.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.data.dtype().code());
            out.push(shape.len() as u8);
            for &d in shape {
                let d = u32::try_from(d)
                    .map_err(|_| GladError::Contract(format!("record {} dimension too large", r.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            r.data.write(&mut out);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4).ok().map(|m| m != MAGIC).unwrap_or(true) {
            return Err(GladError::Format {
                offset: 0,
                msg: "bad magic, expected GLAD".into(),
            });
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(GladError::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let blob_len = rd.u32()? as usize;
        let blob_at = rd.pos;
        let blob = std::str::from_utf8(rd.take(blob_len)?).map_err(|_| GladError::Format {
            offset: blob_at,
            msg: "config blob is not UTF-8".into(),
        })?;
        let (config, step, rng_state) = parse_blob(blob).map_err(|e| GladError::Format {
            offset: blob_at,
            msg: format!("config blob: {e}"),
        })?;
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = rd.u16()? as usize;
            let at = rd.pos;
            let name = std::str::from_utf8(rd.take(n)?)
                .map_err(|_| GladError::Format {
                    offset: at,
                    msg: "record name is not UTF-8".into(),
                })?
                .to_string();
            let at = rd.pos;
            let dtype = DType::from_code(rd.u8()?).ok_or_else(|| GladError::Format {
                offset: at,
                msg: format!("unknown dtype in record {name}"),
            })?;
            let ndim = rd.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(rd.u32()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| GladError::Format {
                    offset: rd.pos,
                    msg: format!("record {name} is too large"),
                })?;
            let at = rd.pos;
            let payload = rd.take(len)?;
            let shape_err = |e: GladError| GladError::Format {
                offset: at,
                msg: format!("record {name}: {e}"),
            };
            let data = match dtype {
                DType::F32 => RecordData::F32(
                    Tensor::new(&shape, payload.chunks_exact(4).map(f32::read_le).collect()).map_err(shape_err)?,
                ),
                DType::F64 => RecordData::F64(
                    Tensor::new(&shape, payload.chunks_exact(8).map(f64::read_le).collect()).map_err(shape_err)?,
                ),
            };
            records.push(Record { name, data });
        }
        if rd.pos != bytes.len() {
            return Err(GladError::Format {
                offset: rd.pos,
                msg: "trailing bytes after last record".into(),
            });
        }
        Ok(Checkpoint {
            config,
            step,
            rng_state,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| GladError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GladError::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn parse_blob(blob: &str) -> Result<(RunConfig, u64, String)> {
    let mut config = RunConfig::default();
    let (mut step, mut rng) = (None, None);
    for (k, v) in parse_pairs(blob)? {
        match k.as_str() {
            "state.step" => step = Some(v.parse().map_err(|_| GladError::Config(format!("bad step {v:?}")))?),
            "state.rng" => rng = Some(v),
            _ => config.set(&k, &v)?,
        }
    }
    config.validate()?;
    match (step, rng) {
        (Some(s), Some(r)) => Ok((config, s, r)),
        _ => Err(GladError::Config("missing state.step or state.rng".into())),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(GladError::Format {
                offset: self.bytes.len(),
                msg: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
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
}
