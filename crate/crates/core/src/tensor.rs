//! GTF1 binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                                   |
//! |----------------|-------------------------------------------|
//! | 4              | magic `GTF1`                              |
//! | 1              | dtype code: 1 = f32, 2 = f64              |
//! | 1              | rank                                      |
//! | 8 × rank       | dims as u64                               |
//! | rest           | row-major payload                         |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GTF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Dense row-major tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        let len = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        };
        if n != len {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {len}"
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("rank {} too large", shape.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, v: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(v))
    }

    pub fn from_f32(shape: Vec<usize>, v: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(v))
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: TensorData::F64(vec![v]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn into_f64(self) -> Vec<f64> {
        match self.data {
            TensorData::F32(v) => v.into_iter().map(|x| x as f64).collect(),
            TensorData::F64(v) => v,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dt = self.dtype();
        let mut out = Vec::with_capacity(6 + 8 * self.shape.len() + dt.size() * self.len());
        out.extend_from_slice(MAGIC);
        out.push(dt.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::Format("truncated header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let dtype = DType::from_code(bytes[4])?;
        let rank = bytes[5] as usize;
        let header = 6 + 8 * rank;
        if bytes.len() < header {
            return Err(Error::Format("truncated dims".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for k in 0..rank {
            let at = 6 + 8 * k;
            let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::Format("element count overflows".into()))?;
            shape.push(d);
        }
        let payload = &bytes[header..];
        let expected = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Tensor { shape, data })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::Format(format!("read failed: {e}")))?;
        Tensor::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_f32(vec![2], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"GTF1");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..14], &2u64.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(3.25);
        let b = t.to_bytes();
        assert_eq!(b.len(), 6 + 8);
        let back = Tensor::from_bytes(&b).unwrap();
        assert!(back.shape().is_empty());
        assert_eq!(back.to_f64(), vec![3.25]);
    }

    #[test]
    fn rejects_bad_input() {
        let t = Tensor::from_f64(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = t.to_bytes();
        b[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&b), Err(Error::Format(_))));
        let b = t.to_bytes();
        assert!(matches!(Tensor::from_bytes(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut b = t.to_bytes();
        b.push(0);
        assert!(Tensor::from_bytes(&b).is_err());
        let mut b = t.to_bytes();
        b[4] = 7;
        assert!(Tensor::from_bytes(&b).is_err());
        assert!(Tensor::from_f64(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(
            shape in prop::collection::vec(0usize..5, 0..4),
            seed in any::<u64>(),
            f32_mode in any::<bool>(),
        ) {
            let n: usize = shape.iter().product();
            // Arbitrary bit patterns, including NaN payloads and signed zeros.
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); s };
            let t = if f32_mode {
                Tensor::from_f32(shape, (0..n).map(|_| f32::from_bits((next() >> 32) as u32)).collect()).unwrap()
            } else {
                Tensor::from_f64(shape, (0..n).map(|_| f64::from_bits(next())).collect()).unwrap()
            };
            let bytes = t.to_bytes();
            let back = Tensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
