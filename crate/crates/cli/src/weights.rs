//! The ESNW weights container.
//!
//! Layout, all integers little-endian: magic `ESNW`, version `u32`, tensor
//! count `u32`, then per tensor a `u16` name length, the UTF-8 name, a
//! dtype byte (0 = f32), a rank byte, one `u32` per dim and the payload.

use esnet_core::ParamStore;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"ESNW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeightsError {
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("tensor {name}: unsupported dtype {dtype}")]
    Dtype { name: String, dtype: u8 },
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("{0}")]
    Invalid(String),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(WeightsError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WeightsError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, WeightsError> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

pub fn encode(store: &ParamStore<f32>) -> Result<Vec<u8>, WeightsError> {
    let mut out = Vec::with_capacity(12 + 4 * store.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(store.len()).map_err(|_| WeightsError::Invalid("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in store.entries() {
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| WeightsError::Invalid(format!("name too long: {}", e.name)))?;
        let rank = u8::try_from(e.dims.len())
            .map_err(|_| WeightsError::Invalid(format!("{}: rank too large", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in &e.dims {
            let d = u32::try_from(d)
                .map_err(|_| WeightsError::Invalid(format!("{}: dim {d} too large", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>, WeightsError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.array::<4>()?;
    if &magic != MAGIC {
        return Err(WeightsError::Magic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightsError::Version(version));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| WeightsError::Invalid(format!("name at byte {at} is not UTF-8")))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(WeightsError::Dtype { name, dtype });
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| WeightsError::Invalid(format!("{name}: dims {dims:?} overflow")))?;
        let data = r
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        store
            .push(name, dims, data)
            .map_err(|e| WeightsError::Invalid(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::Trailing(bytes.len() - r.pos));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tensors() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.push("a", vec![1], vec![1.5]).unwrap();
        s.push(
            "b",
            vec![2, 3],
            vec![0.0, -1.0, 2.0, f32::MIN_POSITIVE, 3.25, -0.0],
        )
        .unwrap();
        s
    }

    #[test]
    fn size_follows_the_field_list() {
        // 12 header + (2+1+1+1+4+4) + (2+1+1+1+8+24)
        assert_eq!(encode(&two_tensors()).unwrap().len(), 62);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = two_tensors();
        let bytes = encode(&s).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        let bits = |s: &ParamStore<f32>| -> Vec<u32> {
            s.entries()
                .iter()
                .flat_map(|e| e.data.iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&back), bits(&s));
    }

    #[test]
    fn rejects_tampering() {
        let good = encode(&two_tensors()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(WeightsError::Magic(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode(&bad), Err(WeightsError::Version(2)));
        let mut bad = good.clone();
        bad[15] = 1;
        assert!(matches!(
            decode(&bad),
            Err(WeightsError::Dtype { dtype: 1, .. })
        ));
        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(WeightsError::Truncated(_))
        ));
        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode(&long), Err(WeightsError::Trailing(1)));
        let mut dup = good;
        dup[27] = b'a';
        assert!(matches!(decode(&dup), Err(WeightsError::Invalid(_))));
    }
}
