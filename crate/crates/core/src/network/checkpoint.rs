//! RBC1 checkpoint files.
//!
//! Layout: magic `RBC1`, format version (u32), tensor count (u32), then per
//! tensor: name length (u32), name bytes, rank (u32), dims (u32 each) and
//! the data as little-endian f64. A `meta.context_mode` tensor of shape
//! `[1]` records the context ablation.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::observation::ContextMode;

use super::{Layout, NetworkDims, NetworkParams, Tensor};

const MAGIC: &[u8; 4] = b"RBC1";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_MODE: &str = "meta.context_mode";

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len() as u32);
    for d in shape {
        put_u32(buf, *d as u32);
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, Tensor::ALL.len() as u32 + 1);
    put_tensor(&mut buf, META_MODE, &[1], &[params.mode().code() as f64]);
    for t in Tensor::ALL {
        put_tensor(&mut buf, t.name(), params.layout().shape(t), params.get(t));
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(self.context, "truncated checkpoint"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], context: &str) -> Result<NetworkParams> {
    let mut r = Reader {
        bytes,
        at: 0,
        context,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(context, "not an RBC1 checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            context,
            format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(context, "tensor name is not utf-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = r
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    if r.at != bytes.len() {
        return Err(Error::format(context, "trailing bytes after tensors"));
    }

    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::format(context, format!("missing tensor {name}")))
    };
    let (_, _, mode) = find(META_MODE)?;
    let mode = mode
        .first()
        .and_then(|c| ContextMode::from_code(*c as u32))
        .ok_or_else(|| Error::format(context, "bad context mode"))?;

    let shape_of = |t: Tensor| find(t.name()).map(|(_, s, _)| s.clone());
    let qw = shape_of(Tensor::QueryW)?;
    let f1 = shape_of(Tensor::Fc1W)?;
    let f2 = shape_of(Tensor::Fc2W)?;
    let wh = shape_of(Tensor::LstmWh)?;
    if qw.len() != 2 || f1.len() != 2 || f2.len() != 2 || wh.len() != 2 {
        return Err(Error::format(context, "weight tensors must be rank 2"));
    }
    let dims = NetworkDims {
        query_dim: qw[1],
        visual_dim: qw[0],
        extra_dim: f1[1].checked_sub(qw[0]).ok_or_else(|| Error::format(context, "fc1 narrower than visual input"))?,
        fc1: f1[0],
        fc2: f2[0],
        lstm: wh[1],
    };
    dims.validate().map_err(|e| Error::format(context, e.to_string()))?;
    let layout = Arc::new(Layout::new(dims));
    let mut data = vec![0.0; layout.len()];
    for t in Tensor::ALL {
        let (_, shape, values) = find(t.name())?;
        if shape.as_slice() != layout.shape(t) {
            return Err(Error::format(
                context,
                format!("tensor {} has shape {:?}, expected {:?}", t.name(), shape, layout.shape(t)),
            ));
        }
        data[layout.range(t)].copy_from_slice(values);
    }
    Ok(NetworkParams::from_parts(layout, mode, data))
}

pub fn write_checkpoint(path: &Path, params: &NetworkParams) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(params)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<NetworkParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
