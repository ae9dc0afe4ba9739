//! Little-endian byte helpers shared by the dataset and bundle formats.

use crate::error::{KeecError, Result};
use crate::numkit::Matrix;

#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    /// Row-major dump, preceded by nothing; callers write shapes themselves.
    pub fn matrix_rows(&mut self, m: &Matrix) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }

    /// Appends the CRC32 of everything written so far and returns the buffer.
    pub fn finish_with_crc(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }

    /// Verifies the trailing CRC32 and returns a reader over the payload.
    pub fn checked(data: &'a [u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(KeecError::Format("file truncated before checksum".into()));
        }
        let (payload, tail) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(KeecError::Checksum { stored, computed });
        }
        Ok(ByteReader::new(payload))
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(KeecError::Format(format!(
                "truncated: wanted {n} bytes at offset {}, {} available",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A u64 length that must fit in memory-sane bounds.
    pub fn len(&mut self, max: u64) -> Result<usize> {
        let v = self.u64()?;
        if v > max {
            return Err(KeecError::Format(format!("length field {v} exceeds limit {max}")));
        }
        Ok(v as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| KeecError::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len(1 << 16)?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| KeecError::Format("string field is not UTF-8".into()))
    }

    pub fn matrix_rows(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let v = self.f64_vec(rows * cols)?;
        Ok(Matrix::from_row_slice(rows, cols, &v))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(KeecError::Format(format!(
                "{} trailing bytes after payload",
                self.data.len() - self.pos
            )))
        }
    }
}
