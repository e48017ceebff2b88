//! Versioned binary checkpoints.
//!
//! ```text
//! magic   b"E4MRCKPT"
//! u32     version
//! u32     config length, then that many bytes of key=value lines (incl. head)
//! u32     tensor count
//! per tensor:
//!   u16 name length, name bytes, u8 group, u32 rows, u32 cols,
//!   rows * cols little-endian f32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::config::{E4merConfig, HeadKind};
use super::model::{E4mer, Param, ParamGroup};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"E4MRCKPT";
pub const VERSION: u32 = 1;

pub fn encode(model: &E4mer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut cfg = model.config().to_key_values();
    cfg.push_str(&format!("head={}\n", model.head().as_str()));
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.group.code());
        out.extend_from_slice(&(p.value.rows as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols as u32).to_le_bytes());
        for v in &p.value.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-utf8 text".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<E4mer> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let text = r.str(n)?;
    let kv = crate::training::config::parse_key_values(&text)?;
    let head = HeadKind::parse(kv.get("head").ok_or_else(|| Error::Checkpoint("no head key".into()))?)?;
    let config = E4merConfig::from_key_values(&kv, &E4merConfig::supervised())
        .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.str(len)?;
        let group = ParamGroup::from_code(r.take(1)?[0]).ok_or_else(|| Error::Checkpoint("bad group".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        params.push(Param { name, group, value: Tensor::from_vec(rows, cols, data) });
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    E4mer::from_params(config, head, params)
}

pub fn save(model: &E4mer, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<E4mer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(format!("loading {}", path.display())))
}

/// The config echo of a checkpoint without decoding tensors.
pub fn read_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    r.u32()?;
    let n = r.u32()? as usize;
    crate::training::config::parse_key_values(&r.str(n)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> E4merConfig {
        E4merConfig::supervised().with_input(4, [2, 2, 2, 4, 2, 1])
    }

    #[test]
    fn round_trip_rounds_to_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = E4mer::new(tiny(), HeadKind::Reconstruction, &mut rng).unwrap();
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.head(), HeadKind::Reconstruction);
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.group, b.group);
            for (x, y) in a.value.data.iter().zip(&b.value.data) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        assert_eq!(encode(&back), encode(&m));
    }

    #[test]
    fn corrupt_inputs_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bytes = encode(&E4mer::new(tiny(), HeadKind::Classifier, &mut rng).unwrap());
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
    }
}
