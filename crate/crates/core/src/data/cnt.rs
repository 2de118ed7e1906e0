//! The CNT1 named-tensor container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CNT1"  u32 count
//! count × { u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 rank,
//!           rank × u32 extent, product(extents) × f32 }
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"CNT1";
pub const DTYPE_F32: u8 = 0;

/// One named entry as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Length { expected, actual: data.len() });
        }
        Ok(TensorRecord { name: name.into(), dims, data })
    }

    /// Stores a tensor with trailing unit extents dropped (rank ≥ 1).
    pub fn from_tensor(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        let mut dims = t.shape().dims().to_vec();
        while dims.len() > 1 && dims.last() == Some(&1) {
            dims.pop();
        }
        TensorRecord { name: name.into(), dims, data: t.data().to_vec() }
    }

    /// Inverse of [`TensorRecord::from_tensor`]; ranks above 4 are rejected.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        if self.dims.is_empty() || self.dims.len() > 4 {
            return Err(Error::data(format!(
                "tensor `{}` has rank {}; only ranks 1-4 map to a tensor",
                self.name,
                self.dims.len()
            )));
        }
        let mut d = [1usize; 4];
        d[..self.dims.len()].copy_from_slice(&self.dims);
        Tensor::from_vec(Shape::from(d), self.data.clone())
    }
}

pub fn encode(records: &[TensorRecord]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let payload: usize = records.iter().map(|r| 12 + r.name.len() + 4 * (r.dims.len() + r.data.len())).sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(records.len()).map_err(|_| Error::data("too many tensors for CNT1"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        if !seen.insert(r.name.as_str()) {
            return Err(Error::data(format!("duplicate tensor name `{}`", r.name)));
        }
        let name_len =
            u16::try_from(r.name.len()).map_err(|_| Error::data(format!("tensor name too long: `{}`", r.name)))?;
        let rank = u8::try_from(r.dims.len()).map_err(|_| Error::data(format!("rank of `{}` exceeds 255", r.name)))?;
        let expected: usize = r.dims.iter().product();
        if expected != r.data.len() {
            return Err(Error::Length { expected, actual: r.data.len() });
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in &r.dims {
            let d = u32::try_from(d).map_err(|_| Error::data(format!("extent of `{}` exceeds u32", r.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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
}

pub fn decode(bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"CNT1\"", String::from_utf8_lossy(magic))));
    }
    let count = cur.u32("entry count")?;
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let start = cur.pos as u64;
        let name_len = cur.u16("name length")? as usize;
        let name_at = cur.pos as u64;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::format(name_at, "tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(start, format!("duplicate tensor name `{name}`")));
        }
        let dtype_at = cur.pos as u64;
        let dtype = cur.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(dtype_at, format!("unknown dtype code {dtype} for `{name}`")));
        }
        let rank = cur.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = cur.u32("extent")? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::format(cur.pos as u64 - 4, format!("extents of `{name}` overflow")))?;
            dims.push(d);
        }
        let bytes_needed = len
            .checked_mul(4)
            .ok_or_else(|| Error::format(cur.pos as u64, format!("payload of `{name}` overflows")))?;
        let payload = cur.take(bytes_needed, "payload")?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.push(TensorRecord { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after the last entry"));
    }
    Ok(records)
}

pub fn write_tensor_file(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let bytes = encode(records)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<TensorRecord>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_eight_bytes() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes, b"CNT1\0\0\0\0");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn bad_magic_at_offset_zero() {
        let err = decode(b"XXXX\0\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncation_and_dtype_errors_carry_offsets() {
        let r = TensorRecord::new("a", vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = encode(&[r]).unwrap();
        // 8 header + 2 + 1 name + dtype at 11
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 17, .. }), "{err}");
        let mut bad = bytes.clone();
        bad[11] = 7;
        assert!(matches!(decode(&bad).unwrap_err(), Error::Format { offset: 11, .. }));
    }

    #[test]
    fn exact_layout() {
        let r = TensorRecord::new("w", vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(std::slice::from_ref(&r)).unwrap();
        let mut want = b"CNT1".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u16.to_le_bytes());
        want.push(b'w');
        want.extend([0u8, 2]);
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1f32.to_le_bytes());
        want.extend((-2f32).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(decode(&bytes).unwrap(), vec![r]);
    }

    #[test]
    fn tensor_conversion_drops_trailing_ones() {
        let t = Tensor::from_vec([3, 2, 1, 1], vec![0.0; 6]).unwrap();
        let r = TensorRecord::from_tensor("fc.weight", &t);
        assert_eq!(r.dims, [3, 2]);
        assert_eq!(r.to_tensor().unwrap(), t);
        let v = TensorRecord::from_tensor("b", &Tensor::vector(vec![1.0]));
        assert_eq!(v.dims, [1]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let r = TensorRecord::new("a", vec![1], vec![0.0]).unwrap();
        assert!(encode(&[r.clone(), r]).is_err());
    }
}
