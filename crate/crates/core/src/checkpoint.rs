//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "TLSRECK1"
//! version  u32
//! config   dim, heads, sessions, session_len, lag_buckets, blocks: u32 each
//!          dropout: f64, variant: u8, norm_epsilon: f64
//! users    u64
//! items    u64
//! count    u32      number of parameter tensors
//! tensor   name_len: u16, name bytes (UTF-8), ndims: u8, dims: u32 × ndims,
//!          values: f64 × product(dims)
//! ```
//!
//! Tensors appear in the model's fixed parameter order, so saving a loaded
//! checkpoint reproduces the original bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterSet, Variant};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TLSRECK1";
const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint is truncated".into())
    } else {
        Error::Io {
            path: "<checkpoint stream>".into(),
            source: e,
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 32 bits")))
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let c = model.config();
    let mut buf = Vec::with_capacity(64 + model.params().scalar_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (v, what) in [
        (c.dim, "dim"),
        (c.heads, "heads"),
        (c.sessions, "sessions"),
        (c.session_len, "session_len"),
        (c.lag_buckets, "lag_buckets"),
        (c.blocks, "blocks"),
    ] {
        buf.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    buf.push(c.variant.code());
    buf.extend_from_slice(&c.norm_epsilon.to_le_bytes());
    buf.extend_from_slice(&(model.user_count() as u64).to_le_bytes());
    buf.extend_from_slice(&(model.item_count() as u64).to_le_bytes());
    buf.extend_from_slice(&to_u32(model.params().len(), "tensor count")?.to_le_bytes());
    for (name, t) in model.params().iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io_err)?;
    out.flush().map_err(io_err)
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(io_err)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Model> {
    let mut r = Cursor { inner: input };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig {
        dim: r.usize()?,
        heads: r.usize()?,
        sessions: r.usize()?,
        session_len: r.usize()?,
        lag_buckets: r.usize()?,
        blocks: r.usize()?,
        dropout: r.f64()?,
        variant: {
            let code = r.u8()?;
            Variant::from_code(code).ok_or_else(|| Error::Format(format!("unknown variant code {code}")))?
        },
        norm_epsilon: r.f64()?,
    };
    let users = r.u64()? as usize;
    let items = r.u64()? as usize;
    let count = r.usize()?;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let mut name = vec![0u8; len];
        r.inner.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndims = r.u8()? as usize;
        let shape = (0..ndims).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?);
        names.push(name);
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(io_err)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Model::from_parts(config, users, items, ParameterSet::new(names, tensors)?)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Checks that a model was built for the shapes of `split`.
pub fn check_compatible(model: &Model, split: &DatasetSplit) -> Result<()> {
    let c = model.config();
    let mut problems = Vec::new();
    let mut cmp = |what: &str, model_v: usize, data_v: usize| {
        if model_v != data_v {
            problems.push(format!("{what}: checkpoint {model_v}, data {data_v}"));
        }
    };
    cmp("users", model.user_count(), split.user_count());
    cmp("items", model.item_count(), split.item_count());
    cmp("sessions_per_instance", c.sessions, split.sessions_per_instance);
    cmp("max_session_length", c.session_len, split.max_session_length);
    cmp("lag_buckets", c.lag_buckets, split.lag_buckets);
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "checkpoint does not match the instance file ({})",
            problems.join("; ")
        )))
    }
}
