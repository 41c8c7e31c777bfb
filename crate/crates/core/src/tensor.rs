//! Dense f64 tensor value type.
//!
//! Row-major flat storage, no broadcasting. A `Tensor` is a plain value: it
//! owns its data and an optional gradient buffer of identical extent, and it
//! carries a `requires_grad` flag that the tape consults when the tensor is
//! bound as a leaf. All math on tensors happens through [`crate::tape::Tape`].

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Little-endian binary format: magic, version, rank, extents, f64 payload.
pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform init on `[-bound, bound]`.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut Stream) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Xavier-uniform init for a weight of extent `rows x cols`.
    pub fn xavier(rows: usize, cols: usize, rng: &mut Stream) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform(vec![rows, cols], bound, rng)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent pair of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::contract(format!("expected rank 2, got {other:?}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // ── Serialization ────────────────────────────────────────────────

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(r.parse_error(format!("bad tensor magic {magic:?}")));
        }
        let version = r.read_u32()?;
        if version != TENSOR_VERSION {
            return Err(Error::Version {
                found: version,
                expected: TENSOR_VERSION,
            });
        }
        let rank = r.read_u32()? as usize;
        if rank > 8 {
            return Err(r.parse_error(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > (1 << 30) {
            return Err(r.parse_error(format!("implausible element count {numel}")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f64()?);
        }
        Tensor::new(shape, data)
    }
}

/// Reader that tracks its byte offset so parse errors can name a position.
pub struct ByteReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R) -> Self {
        ByteReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn parse_error(&self, message: String) -> Error {
        Error::Parse {
            offset: self.offset,
            message,
        }
    }

    pub fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Parse {
                offset: self.offset,
                message: "unexpected end of file".into(),
            }),
            Err(e) => Err(e.into()),
        }
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_u128(&mut self) -> Result<u128> {
        let mut b = [0u8; 16];
        self.read_exact(&mut b)?;
        Ok(u128::from_le_bytes(b))
    }

    pub fn read_f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero_with_one_element() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
    }

    #[test]
    fn roundtrip_preserves_shape_and_payload() {
        let mut r = rng::stream(5);
        let t = Tensor::uniform(vec![3, 4], 2.0, &mut r);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::read_from(&mut ByteReader::new(buf.as_slice())).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn truncated_stream_is_a_parse_error_with_offset() {
        let t = Tensor::zeros(vec![4, 4]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = Tensor::read_from(&mut ByteReader::new(buf.as_slice())).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 0),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        let err = Tensor::read_from(&mut ByteReader::new(buf.as_slice())).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn wrong_version_rejected() {
        let t = Tensor::zeros(vec![2]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf[4] = 9; // version byte
        let err = Tensor::read_from(&mut ByteReader::new(buf.as_slice())).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, .. }));
    }

    proptest! {
        #[test]
        fn serialization_roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 1..48)) {
            let n = values.len();
            let t = Tensor::new(vec![n], values).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = Tensor::read_from(&mut ByteReader::new(buf.as_slice())).unwrap();
            prop_assert_eq!(back.data(), t.data());
            prop_assert_eq!(back.shape(), t.shape());
        }
    }
}
