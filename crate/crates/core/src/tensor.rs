//! Minimal binary tensor container.
//!
//! Layout: the 8-byte magic `PSTENSR0`, the rank as `u32` LE, each dimension as
//! `u32` LE, then the row-major `f32` LE payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PSTENSR0";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Shape(format!("dimensions must be positive, got {dims:?}")));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Shape(format!("dimension too large in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, payload has {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("payload value {i} is not finite")));
        }
        Ok(TensorFile { dims, data })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a buffer; `origin` only labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: String| Error::format(origin, reason);
        if bytes.len() < 12 {
            return Err(fail(format!("header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(fail("bad magic, not a tensor file".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let rank = word(8) as usize;
        let header = 12 + 4 * rank;
        if rank == 0 || bytes.len() < header {
            return Err(fail(format!("invalid or truncated rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|i| word(12 + 4 * i) as usize).collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fail(format!("dims {dims:?} overflow")))?;
        let payload = &bytes[header..];
        if payload.len() != count * 4 {
            return Err(fail(format!(
                "dims {dims:?} need {} payload bytes, found {}",
                count * 4,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        TensorFile::new(dims, data).map_err(|e| fail(e.to_string()))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], payload: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let tensor = TensorFile::new(dims.to_vec(), payload.to_vec())?;
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pst");
        write_tensor(&p, &[3], &[1.0, 2.0, 3.0]).unwrap();
        let t = read_tensor(&p).unwrap();
        assert_eq!(t.dims, vec![3]);
        assert_eq!(t.data, vec![1.0, 2.0, 3.0]);

        write_tensor(&p, &[2, 2, 1], &[0.0; 4]).unwrap();
        let t = read_tensor(&p).unwrap();
        assert_eq!(t.dims, vec![2, 2, 1]);
        assert_eq!(t.data, vec![0.0; 4]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(TensorFile::new(vec![4], vec![1.0, 2.0]).is_err());
        assert!(TensorFile::new(vec![0], vec![]).is_err());
        assert!(TensorFile::new(vec![1], vec![f32::NAN]).is_err());

        let good = TensorFile::new(vec![4], vec![1.0; 4]).unwrap().to_bytes();
        let origin = Path::new("mem");
        let truncated = &good[..good.len() - 4];
        assert!(matches!(
            TensorFile::from_bytes(truncated, origin),
            Err(Error::Format { .. })
        ));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(TensorFile::from_bytes(&bad_magic, origin).is_err());
        assert!(TensorFile::from_bytes(&good[..6], origin).is_err());
    }

    #[test]
    fn header_layout() {
        let bytes = TensorFile::new(vec![2, 1], vec![1.0, -1.0]).unwrap().to_bytes();
        assert_eq!(&bytes[..8], b"PSTENSR0");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(data in proptest::collection::vec(-1e30f32..1e30, 1..64)) {
            let t = TensorFile::new(vec![data.len()], data.clone()).unwrap();
            let back = TensorFile::from_bytes(&t.to_bytes(), Path::new("mem")).unwrap();
            let a: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
