//! Binary checkpoint format.
//!
//! ```text
//! "SPTN"            4 bytes
//! version           u32
//! tensor count      u32
//! per tensor:       u32 name length, UTF-8 name, u32 rank, u64 dims[rank],
//!                   u8 dtype (0 = f32), u8 frozen
//! payloads          f32 row-major, tensors in header order
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::ParamStore;

pub const MAGIC: &[u8; 4] = b"SPTN";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Serializes every tensor as f32, recording `frozen = !requires_grad`.
pub fn to_bytes<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
        out.push(u8::from(!t.requires_grad()));
    }
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Load {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!(
                "truncated file while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn from_bytes<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ParamStore<T>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err("not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported format version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut headers = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64("dims")?;
            dims.push(
                usize::try_from(d)
                    .map_err(|_| r.err(format!("{name}: dimension {d} too large")))?,
            );
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(r.err(format!("{name}: unsupported dtype code {dtype}")));
        }
        let frozen = match r.u8("frozen flag")? {
            0 => false,
            1 => true,
            f => return Err(r.err(format!("{name}: invalid frozen flag {f}"))),
        };
        headers.push((name, dims, frozen));
    }
    let payload: usize = headers
        .iter()
        .map(|(_, d, _)| d.iter().product::<usize>())
        .sum::<usize>()
        * 4;
    if bytes.len() - r.pos != payload {
        return Err(r.err(format!(
            "payload is {} bytes, header declares {payload}",
            bytes.len() - r.pos
        )));
    }
    let mut store = ParamStore::new();
    for (name, dims, frozen) in headers {
        let n: usize = dims.iter().product();
        let data = r
            .take(n * 4, "payload")?
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let mut t = Tensor::new(dims, data)?;
        t.set_requires_grad(!frozen);
        store
            .insert(name.clone(), t)
            .map_err(|_| r.err(format!("duplicate tensor name {name}")))?;
    }
    Ok(store)
}

pub fn save<T: Scalar>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let mut a = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        a.set_requires_grad(true);
        s.insert("blocks.0.adapter.up.weight", a).unwrap();
        s.insert("cls_token", Tensor::new(vec![1], vec![0.25]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn hand_layout() {
        let b = to_bytes(&store());
        assert_eq!(&b[..4], b"SPTN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        let name_len = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        assert_eq!(&b[16..16 + name_len], b"blocks.0.adapter.up.weight");
        // header: 12 + (4+26+4+16+2) + (4+9+4+8+2) = 91; payload 3 floats
        assert_eq!(b.len(), 91 + 12);
        assert_eq!(&b[91..95], &1.5f32.to_le_bytes());
        assert_eq!(b[16 + name_len + 4 + 16], DTYPE_F32);
        assert_eq!(b[16 + name_len + 4 + 16 + 1], 0);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let b = to_bytes(&store());
        let back: ParamStore<f32> = from_bytes(&b, Path::new("mem")).unwrap();
        assert!(back
            .get("blocks.0.adapter.up.weight")
            .unwrap()
            .requires_grad());
        assert!(!back.get("cls_token").unwrap().requires_grad());
        assert_eq!(to_bytes(&back), b);
    }

    #[test]
    fn short_payload_is_rejected() {
        let b = to_bytes(&store());
        let err = from_bytes::<f32>(&b[..b.len() - 1], Path::new("x.ckpt"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("x.ckpt") && err.contains("payload"), "{err}");
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad, Path::new("x")).is_err());
    }
}
