//! Binary checkpoint format.
//!
//! Layout: magic, u32 version, u32 length + network description text, every
//! parameter tensor (per layer weight then bias) as little-endian f64, the
//! optimizer accumulators in the same order, then the u64 step count.

use std::io::{Read, Write};
use std::path::Path;

use super::{LayerSpec, QNet, RmsProp, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ODRLQNET";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(net: &QNet, path: &Path) -> Result<()> {
    let bytes = encode(net);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<QNet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub(crate) fn encode(net: &QNet) -> Vec<u8> {
    let text = net.spec_text();
    let mut out = Vec::with_capacity(24 + text.len() + 16 * net.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for set in [&net.params, &net.accum] {
        for p in set.iter().flatten() {
            for v in p.weight.data.iter().chain(&p.bias.data) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&net.step.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fill(&mut self, t: &mut Tensor) -> Result<()> {
        let raw = self.take(8 * t.data.len())?;
        for (v, b) in t.data.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
        Ok(())
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<QNet> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Format("not a network checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(len)?)
        .map_err(|_| Error::Format("network description is not UTF-8".into()))?;
    let mut input = None;
    let mut layers = Vec::new();
    let mut opt = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts[0] {
            "input" => {
                let dims: Vec<usize> = parts[1..].iter().filter_map(|s| s.parse().ok()).collect();
                if dims.len() != 3 || parts.len() != 4 {
                    return Err(Error::Format(format!("bad input line `{line}`")));
                }
                input = Some((dims[0], dims[1], dims[2]));
            }
            "rmsprop" => {
                let v: Vec<f64> = parts[1..].iter().filter_map(|s| s.parse().ok()).collect();
                if v.len() != 3 || parts.len() != 4 {
                    return Err(Error::Format(format!("bad optimizer line `{line}`")));
                }
                opt = Some(RmsProp {
                    lr: v[0],
                    decay: v[1],
                    eps: v[2],
                });
            }
            _ => layers.push(LayerSpec::parse(line)?),
        }
    }
    let input = input.ok_or_else(|| Error::Format("checkpoint has no input line".into()))?;
    let mut net = QNet::new(input, layers, 0).map_err(|e| Error::Format(format!("bad network description: {e}")))?;
    if let Some(o) = opt {
        net.optimizer = o;
    }
    for set in [&mut net.params, &mut net.accum] {
        for p in set.iter_mut().flatten() {
            cur.fill(&mut p.weight)?;
            cur.fill(&mut p.bias)?;
        }
    }
    net.step = cur.u64()?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - cur.pos
        )));
    }
    Ok(net)
}
