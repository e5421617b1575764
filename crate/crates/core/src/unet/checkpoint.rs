//! Binary checkpoint format.
//!
//! Layout, little endian throughout:
//!
//! ```text
//! magic   b"SSEGCKPT"
//! version u32
//! config  u32 length + UTF-8 `key=value` lines
//! meta    u32 length + UTF-8 `key=value` lines
//! count   u32
//! params  count x (u32 name length, name, u32 rank, rank x u64 dims, f32 data)
//! digest  32-byte SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DownsamplingSpec, UNet, UNetConfig};
use crate::autodiff::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
    /// Hash of the training configuration that produced the weights.
    pub fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: UNet<f32>,
    pub meta: CheckpointMeta,
}

fn config_text(c: &UNetConfig) -> String {
    format!(
        "base_channels={}\ndepth={}\ndownsampling={}\ninput_size={}x{}\npadding={}\n",
        c.base_channels, c.depth, c.downsampling, c.input_size.0, c.input_size.1, c.padding
    )
}

fn meta_text(m: &CheckpointMeta) -> String {
    format!(
        "run_id={}\nseed={}\nepoch={}\nval_loss={:e}\nfingerprint={}\n",
        m.run_id, m.seed, m.epoch, m.val_loss, m.fingerprint
    )
}

fn key_values(text: &str) -> Result<BTreeMap<&str, &str>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Checkpoint(format!("malformed line `{l}`")))
        })
        .collect()
}

fn field<'a>(kv: &BTreeMap<&str, &'a str>, key: &str) -> Result<&'a str> {
    kv.get(key)
        .copied()
        .ok_or_else(|| Error::Checkpoint(format!("missing field `{key}`")))
}

fn parsed<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let v = field(kv, key)?;
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("bad value `{v}` for `{key}`")))
}

fn parse_config(text: &str) -> Result<UNetConfig> {
    let kv = key_values(text)?;
    let size = field(&kv, "input_size")?;
    let (h, w) = size
        .split_once('x')
        .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
        .ok_or_else(|| Error::Checkpoint(format!("bad input_size `{size}`")))?;
    Ok(UNetConfig {
        base_channels: parsed(&kv, "base_channels")?,
        depth: parsed(&kv, "depth")?,
        downsampling: field(&kv, "downsampling")?.parse::<DownsamplingSpec>()?,
        input_size: (h, w),
        padding: parsed(&kv, "padding")?,
    })
}

fn parse_meta(text: &str) -> Result<CheckpointMeta> {
    let kv = key_values(text)?;
    Ok(CheckpointMeta {
        run_id: field(&kv, "run_id")?.to_string(),
        seed: parsed(&kv, "seed")?,
        epoch: parsed(&kv, "epoch")?,
        val_loss: parsed(&kv, "val_loss")?,
        fingerprint: field(&kv, "fingerprint")?.to_string(),
    })
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(model: &UNet<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut buf, &config_text(model.config()));
    put_str(&mut buf, &meta_text(meta));
    put_u32(&mut buf, model.params().len());
    for (name, t) in model.params().iter() {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.ndim());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = parse_config(r.string()?)?;
    let meta = parse_meta(r.string()?)?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("bad shape".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        model: UNet::from_parts(config, params)?,
        meta,
    })
}

/// Writes atomically via a temporary sibling file.
pub fn write_checkpoint(path: &Path, model: &UNet<f32>, meta: &CheckpointMeta) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model, meta)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(reason) => Error::format(path, reason),
        other => other,
    })
}
