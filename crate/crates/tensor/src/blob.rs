//! Binary container for named tensors.
//!
//! Layout (little endian): magic `SSAEWTS1`, dtype tag length `u8` + tag,
//! entry count `u32`, then per entry: name length `u32` + UTF-8 name, rank
//! `u32`, dims `u64` each, raw element bytes.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SSAEWTS1";

pub fn encode<T: Scalar>(entries: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.len() as u8);
    out.extend_from_slice(T::DTYPE.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TensorError::Blob(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>, TensorError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(TensorError::Blob("bad magic".into()));
    }
    let tag_len = r.take(1)?[0] as usize;
    let tag = String::from_utf8_lossy(r.take(tag_len)?).into_owned();
    if tag != T::DTYPE {
        return Err(TensorError::Dtype { expected: T::DTYPE, found: tag });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| TensorError::Blob("non UTF-8 name".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| TensorError::Blob(format!("{name}: shape overflow")))?;
        let raw = r.take(n.checked_mul(T::BYTES).ok_or_else(|| TensorError::Blob("size overflow".into()))?)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((name, Tensor::try_new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Blob("trailing bytes".into()));
    }
    Ok(out)
}
