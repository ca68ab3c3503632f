//! PMT1: a minimal little-endian tensor container.
//!
//! Layout: the ASCII magic `PMT1`, one dtype byte (0 = f32, 1 = f64, 2 = u8),
//! one rank byte, `rank` little-endian u32 dimensions, then the row-major
//! payload in little-endian order. Nothing else follows the payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PMT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PmtData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PmtTensor {
    pub dims: Vec<u32>,
    pub data: PmtData,
}

impl PmtTensor {
    pub fn f64(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(dims, PmtData::F64(data))
    }

    pub fn f32(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, PmtData::F32(data))
    }

    pub fn u8(dims: &[usize], data: Vec<u8>) -> Result<Self> {
        Self::new(dims, PmtData::U8(data))
    }

    fn new(dims: &[usize], data: PmtData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} exceeds 255", dims.len())));
        }
        let dims = dims
            .iter()
            .map(|&d| u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32"))))
            .collect::<Result<Vec<_>>>()?;
        let t = PmtTensor { dims, data };
        if t.numel() != t.len() {
            return Err(Error::Format(format!(
                "dims {:?} imply {} elements but {} were given",
                t.dims,
                t.numel(),
                t.len()
            )));
        }
        Ok(t)
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            PmtData::F32(_) => DType::F32,
            PmtData::F64(_) => DType::F64,
            PmtData::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    fn len(&self) -> usize {
        match &self.data {
            PmtData::F32(v) => v.len(),
            PmtData::F64(v) => v.len(),
            PmtData::U8(v) => v.len(),
        }
    }

    /// Values widened to f64, whatever the stored dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            PmtData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            PmtData::F64(v) => v.clone(),
            PmtData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + self.numel() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype() as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            PmtData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            PmtData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            PmtData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing PMT1 magic".into()));
        }
        let dtype = DType::from_code(bytes[4])?;
        let rank = bytes[5] as usize;
        let header = 6 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::Format("truncated dimension list".into()));
        }
        let dims: Vec<u32> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let numel = numel.ok_or_else(|| Error::Format("element count overflows".into()))?;
        let payload = &bytes[header..];
        if payload.len() != numel * dtype.size() {
            return Err(Error::Format(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                numel * dtype.size()
            )));
        }
        let data = match dtype {
            DType::F32 => PmtData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => PmtData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => PmtData::U8(payload.to_vec()),
        };
        Ok(PmtTensor { dims, data })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::io("<reader>", e))?;
        Self::decode(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = PmtTensor::u8(&[2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"PMT1");
        assert_eq!(bytes[4], 2);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &3u32.to_le_bytes());
        assert_eq!(&bytes[14..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn rejects_bad_payload_length() {
        let mut bytes = PmtTensor::f64(&[2], vec![1.0, 2.0]).unwrap().encode();
        bytes.pop();
        assert!(matches!(PmtTensor::decode(&bytes), Err(Error::Format(_))));
        assert!(PmtTensor::f64(&[3], vec![1.0]).is_err());
        assert!(PmtTensor::decode(b"PMT2\x01\x00").is_err());
    }

    #[test]
    fn scalar_tensor_has_rank_zero() {
        let t = PmtTensor::f64(&[], vec![4.5]).unwrap();
        let back = PmtTensor::decode(&t.encode()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.numel(), 1);
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bitwise(bits in proptest::collection::vec(any::<u64>(), 0..64)) {
            let data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let t = PmtTensor::f64(&[data.len()], data.clone()).unwrap();
            let back = PmtTensor::decode(&t.encode()).unwrap();
            match back.data {
                PmtData::F64(v) => {
                    let a: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
                    prop_assert_eq!(a, bits);
                }
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn f32_and_u8_round_trip(bits in proptest::collection::vec(any::<u32>(), 1..32), rows in 1usize..4) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let t = PmtTensor::f32(&[data.len()], data).unwrap();
            prop_assert_eq!(PmtTensor::decode(&t.encode()).unwrap().encode(), t.encode());
            let bytes: Vec<u8> = bits.iter().map(|&b| b as u8).collect();
            let n = bytes.len();
            let t = PmtTensor::u8(&[rows, n], bytes.repeat(rows)).unwrap();
            prop_assert_eq!(PmtTensor::decode(&t.encode()).unwrap(), t);
        }
    }
}
