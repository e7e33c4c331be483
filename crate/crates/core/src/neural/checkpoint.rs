//! Parameter checkpoints: a flat map from name to a float64 block.
//!
//! Binary layout (little-endian):
//! `b"NSMMCKPT"`, `u32` version, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u64` rows, `u64` cols, `rows*cols` `f64`s.
//! Entries are written in name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{NeuralError, ParamStore, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NSMMCKPT";
const VERSION: u32 = 1;

pub fn save_binary(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.params.len() as u32).to_le_bytes());
    for (name, t) in &store.params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| NeuralError::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_binary(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(NeuralError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NeuralError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| NeuralError::Format(e.to_string()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| NeuralError::Format("size overflow".into()))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| NeuralError::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.insert(name, Tensor { rows, cols, data });
    }
    if r.pos != buf.len() {
        return Err(NeuralError::Format("trailing bytes".into()));
    }
    Ok(out)
}

pub fn save_json(store: &ParamStore, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&store.params)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let text = std::fs::read_to_string(path)?;
    let map: BTreeMap<String, Tensor> = serde_json::from_str(&text)?;
    for (name, t) in &map {
        if t.rows * t.cols != t.data.len() {
            return Err(NeuralError::Shape {
                name: name.clone(),
                detail: format!("{}x{} with {} values", t.rows, t.cols, t.data.len()),
            });
        }
    }
    Ok(map)
}

/// Overwrites the parameters of `store` that appear in the file. Every entry
/// must exist in `store` with the same shape; moments are reset.
fn apply(store: &mut ParamStore, loaded: BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in &loaded {
        let cur = store
            .get(name)
            .ok_or_else(|| NeuralError::Unknown(name.clone()))?;
        if (cur.rows, cur.cols) != (t.rows, t.cols) {
            return Err(NeuralError::Shape {
                name: name.clone(),
                detail: format!(
                    "file has {}x{}, model expects {}x{}",
                    t.rows, t.cols, cur.rows, cur.cols
                ),
            });
        }
    }
    for (name, t) in loaded {
        store.insert(&name, t);
    }
    Ok(())
}

pub fn load_binary(store: &mut ParamStore, path: &Path) -> Result<()> {
    apply(store, read_binary(path)?)
}

pub fn load_json(store: &mut ParamStore, path: &Path) -> Result<()> {
    apply(store, read_json(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::MlpSpec;
    use crate::stochastics::RngKey;

    fn fresh(seed: u64) -> ParamStore {
        let mut s = ParamStore::init(&MlpSpec::policy(6, 8), "policy", RngKey::new(seed)).unwrap();
        s.insert("hit_logit", Tensor::scalar(0.123456789e-3));
        s
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        let a = fresh(1);
        save_binary(&a, &p).unwrap();
        let mut b = fresh(2);
        assert!(!a.same_params(&b));
        load_binary(&mut b, &p).unwrap();
        assert!(a.same_params(&b));
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        let a = fresh(3);
        save_json(&a, &p).unwrap();
        let mut b = fresh(4);
        load_json(&mut b, &p).unwrap();
        assert!(a.same_params(&b));
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        save_binary(&fresh(1), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_binary(&mut fresh(1), &p), Err(NeuralError::Format(_))));
        std::fs::write(&p, b"NOTACKPT").unwrap();
        assert!(matches!(load_binary(&mut fresh(1), &p), Err(NeuralError::Format(_))));
    }
}
