//! CKPT1: a flat container of named little-endian tensors.
//!
//! Layout: magic `CKPT1`, u32 tensor count, then per tensor a u16 name
//! length, the UTF-8 name, a u8 dtype (0 = f64, 1 = f32), a u8 rank,
//! u32 dims and the raw data.

use std::path::Path;

use crate::error::{CkfError, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"CKPT1";
const F64: u8 = 0;
const F32: u8 = 1;

/// Serializes every tensor as f64, in name order.
pub fn encode(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(params.len()).map_err(|_| CkfError::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| CkfError::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F64);
        let rank = u8::try_from(t.shape().len()).map_err(|_| CkfError::Checkpoint(format!("{name}: rank too high")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| CkfError::Checkpoint(format!("{name}: dim too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
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
            .ok_or_else(|| CkfError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CkfError::Checkpoint("bad magic".into()));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CkfError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            F64 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect(),
            F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect(),
            other => return Err(CkfError::Checkpoint(format!("{name}: unknown dtype {other}"))),
        };
        if params.contains(&name) {
            return Err(CkfError::Checkpoint(format!("duplicate tensor {name}")));
        }
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(CkfError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    std::fs::write(path, encode(params)?).map_err(|e| CkfError::io(path, e))
}

/// Reads a checkpoint; a missing file names the command that writes it.
pub fn load(path: &Path, producer: &'static str) -> Result<ParamStore> {
    if !path.exists() {
        return Err(CkfError::MissingArtifact {
            path: path.to_path_buf(),
            command: producer,
        });
    }
    decode(&std::fs::read(path).map_err(|e| CkfError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn sample() -> ParamStore {
        let mut rng = SplitMix64::new(1);
        let mut p = ParamStore::new();
        p.insert("b.matrix", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        p.insert("a.scalar", Tensor::scalar(-0.0)).unwrap();
        p.insert("c.row", Tensor::row(&[f64::MIN_POSITIVE, 1e300, -2.5]))
            .unwrap();
        p
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode(&sample()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::row(&[1.0, 2.0])).unwrap();
        let b = encode(&p).unwrap();
        assert_eq!(&b[..5], b"CKPT1");
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..11], &1u16.to_le_bytes());
        assert_eq!(b[11], b'w');
        assert_eq!((b[12], b[13]), (0, 2));
        assert_eq!(&b[14..18], &1u32.to_le_bytes());
        assert_eq!(&b[18..22], &2u32.to_le_bytes());
        assert_eq!(&b[22..30], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 38);
    }

    #[test]
    fn reads_f32_tensors() {
        let mut b = Vec::from(&MAGIC[..]);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(b'x');
        b.extend_from_slice(&[F32, 1]);
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&(-2.0f32).to_le_bytes());
        let p = decode(&b).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample()).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(CkfError::Checkpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CkfError::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(CkfError::Checkpoint(_))));
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        let one = encode(&p).unwrap();
        let mut dup = one.clone();
        dup[5..9].copy_from_slice(&2u32.to_le_bytes());
        dup.extend_from_slice(&one[9..]);
        assert!(matches!(decode(&dup), Err(CkfError::Checkpoint(_))));
    }

    #[test]
    fn missing_file_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(&dir.path().join("cf.ckpt"), "train-cf").unwrap_err();
        assert!(err.to_string().contains("run `train-cf` first"), "{err}");
    }
}
