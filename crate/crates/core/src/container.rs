//! Versioned binary container: magic, version, JSON header, named
//! little-endian f32 tensors, trailing SHA-256 over all preceding bytes.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    pub fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn f32s<T: Scalar>(&mut self, xs: &[T]) {
        self.buf.reserve(xs.len() * 4);
        for &x in xs {
            self.buf.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    }

    pub fn tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.bytes(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.f32s(t.data());
    }

    /// Appends the content hash and returns `(bytes, hex hash)`.
    pub fn finish(mut self) -> (Vec<u8>, String) {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        (self.buf, hex::encode(digest))
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies magic, version and trailing hash before any field is read.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 8 + 32 {
            return Err(Error::Format(format!("file of {} bytes is truncated", bytes.len())));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if found != version {
            return Err(Error::VersionMismatch { expected: version, found });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 32);
        let expected = hex::encode(tail);
        let actual = sha256_hex(body);
        if expected != actual {
            return Err(Error::HashMismatch {
                expected,
                found: actual,
            });
        }
        Ok(Self { buf: body, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect())
    }

    pub fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = String::from_utf8(self.bytes()?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = self.u32()? as usize;
        if ndim > 4 {
            return Err(Error::Format(format!("tensor {name} has {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = self.f32s(shape.iter().product())?;
        let t = Tensor::new(shape, data)?;
        if !t.is_finite() {
            return Err(Error::Format(format!("tensor {name} holds non-finite values")));
        }
        Ok((name, t))
    }

    pub fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}
