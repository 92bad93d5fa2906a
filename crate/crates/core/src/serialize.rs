//! Little-endian weight file.
//!
//! ```text
//! "HIMB"  u32 version=1
//! config: scale C C_r n N1 N2 (u32)  lambda (f32)  N_state C_h (u32)  u32 len + len x u8 direction tags
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{HiMambaConfig, ModelWeights};
use crate::scan::DirectionOrder;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HIMB";
pub const VERSION: u32 = 1;

pub fn to_bytes(w: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = &w.config;
    for v in [c.scale, c.channels, c.region_channels, c.region_size, c.blocks_per_group, c.groups] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.expansion.to_le_bytes());
    for v in [c.state_size, c.ffn_hidden, c.dir_cycle.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(c.dir_cycle.iter().map(|d| d.tag()));

    let params = w.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        self.u32(what).map(|v| v as usize)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected \"HIMB\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let scale = r.usize("scale")?;
    let channels = r.usize("C")?;
    let region_channels = r.usize("C_r")?;
    let region_size = r.usize("n")?;
    let blocks_per_group = r.usize("N1")?;
    let groups = r.usize("N2")?;
    let expansion = r.f32("lambda")?;
    let state_size = r.usize("N_state")?;
    let ffn_hidden = r.usize("C_h")?;
    let ndir = r.usize("dir_cycle length")?;
    let dir_cycle = (0..ndir)
        .map(|_| {
            let tag = r.u8("direction tag")?;
            DirectionOrder::from_tag(tag).ok_or_else(|| {
                r.pos -= 1;
                r.err(format!("unknown direction tag {tag}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let config = HiMambaConfig {
        scale,
        channels,
        region_channels,
        region_size,
        blocks_per_group,
        groups,
        expansion,
        state_size,
        ffn_hidden,
        dir_cycle,
    };
    let config_end = r.pos;
    config.validate().map_err(|e| Error::Format { offset: config_end as u64, message: format!("invalid config: {e}") })?;

    let template = ModelWeights::init(&config, 0)?;
    let expected = template.named_params();
    let count = r.usize("tensor count")?;
    if count != expected.len() {
        r.pos -= 4;
        return Err(r.err(format!("config implies {} tensors, file declares {count}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want) in expected {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Format { offset: start as u64, message: "tensor name is not UTF-8".into() })?;
        if name != want_name {
            return Err(Error::Format { offset: start as u64, message: format!("expected tensor {want_name:?}, found {name:?}") });
        }
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.usize("dim")).collect::<Result<Vec<_>>>()?;
        if shape != want.shape() {
            return Err(Error::Format { offset: start as u64, message: format!("{name}: shape {shape:?}, expected {:?}", want.shape()) });
        }
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f32("tensor data").map(f64::from)).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    ModelWeights::from_params(&config, tensors)
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(w))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    from_bytes(&fs::read(path)?)
}
