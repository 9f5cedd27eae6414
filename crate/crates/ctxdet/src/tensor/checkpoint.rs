//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "CTK1" | u32 version | u64 global step | u32 entry count
//!   per entry: u16 name length | name bytes | u8 dtype | u8 rank
//!              | rank x u32 extents | row-major IEEE-754 payload
//!
//! Round-trips are bit-exact for both dtypes.

use super::{DType, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CTK1";

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => DTYPE_F32,
        DType::F64 => DTYPE_F64,
    }
}

pub fn save_checkpoint<F: Real>(path: &Path, params: &ParamStore<F>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&params.step.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {name:?}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(dtype_tag(F::DTYPE));
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Loads a checkpoint into element type `F`.
///
/// f32 payloads widen losslessly into an f64 store; loading an f64 payload
/// into an f32 store is rejected as lossy.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<ParamStore<F>> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let step = r.u64()?;
    let n_entries = r.u32()?;
    let mut params = ParamStore::new();
    params.step = step;
    for _ in 0..n_entries {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let tensor = match dtype {
            DTYPE_F32 => {
                let bytes = r.take(numel * 4)?;
                let data: Vec<f64> = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect();
                Tensor::<F>::from_f64(shape, &data)?
            }
            DTYPE_F64 => {
                if F::DTYPE == DType::F32 {
                    return Err(Error::Format(format!(
                        "checkpoint entry {name:?} is f64; loading into an f32 run would lose precision"
                    )));
                }
                let bytes = r.take(numel * 8)?;
                let data: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Tensor::<F>::from_f64(shape, &data)?
            }
            other => {
                return Err(Error::Format(format!("unknown dtype tag {other}")));
            }
        };
        params.insert(name, tensor);
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_bit_exact_f64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = Rng::seed_from_u64(3);
        let mut params = ParamStore::<f64>::new();
        params.step = 1234;
        params.insert("a.w", Tensor::gaussian(vec![3, 4], 1.0, &mut rng));
        params.insert("b.bias", Tensor::gaussian(vec![7], 0.01, &mut rng));
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.step, 1234);
        for (name, t) in params.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // byte-identical on re-save
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn f32_widens_into_f64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut params = ParamStore::<f32>::new();
        params.insert("w", Tensor::new(vec![2], vec![1.25f32, -0.5]).unwrap());
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.get("w").unwrap().data(), &[1.25f64, -0.5]);
        // and narrowing an f64 checkpoint is refused
        let mut p64 = ParamStore::<f64>::new();
        p64.insert("w", Tensor::new(vec![1], vec![0.1]).unwrap());
        let path64 = dir.path().join("m64.ckpt");
        save_checkpoint(&path64, &p64).unwrap();
        assert!(load_checkpoint::<f32>(&path64).is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}
