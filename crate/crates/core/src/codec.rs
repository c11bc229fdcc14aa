//! Little-endian reader/writer shared by the binary container formats.
//!
//! Every container starts with an 8-byte magic and a `u32` version. The
//! reader validates lengths with checked arithmetic before allocating, so a
//! corrupted header cannot trigger a huge allocation.

use crate::error::FormatError;
use crate::linalg::{c64, CMat, RMat};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn header(&mut self, magic: &[u8; 8], version: u32) -> Result<(), FormatError> {
        let found = self.take(8)?;
        if found != magic {
            return Err(FormatError::MagicMismatch {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let v = self.u32()?;
        if v != version {
            return Err(FormatError::UnsupportedVersion {
                expected: version,
                found: v,
            });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A `u64` dimension field that must fit in `usize` and be at most `max`.
    pub fn dim(&mut self, field: &'static str, max: u64) -> Result<usize, FormatError> {
        let v = self.u64()?;
        if v > max {
            return Err(FormatError::BadHeader(field));
        }
        usize::try_from(v).map_err(|_| FormatError::BadHeader(field))
    }

    /// Checks that `count` items of `width` bytes are still available.
    fn reserve(&self, count: usize, width: usize) -> Result<usize, FormatError> {
        let bytes = count
            .checked_mul(width)
            .ok_or(FormatError::BadHeader("payload size"))?;
        let available = self.buf.len() - self.pos;
        if bytes > available {
            return Err(FormatError::Truncated {
                needed: self.pos.saturating_add(bytes),
                available: self.buf.len(),
            });
        }
        Ok(bytes)
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.reserve(count, 8)?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32s(&mut self, count: usize) -> Result<Vec<u32>, FormatError> {
        let bytes = self.reserve(count, 4)?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self, count: usize) -> Result<&'a [u8], FormatError> {
        self.reserve(count, 1)?;
        self.take(count)
    }

    /// Column-major real matrix; rejects non-finite entries.
    pub fn rmat(&mut self, rows: usize, cols: usize) -> Result<RMat, FormatError> {
        let n = rows
            .checked_mul(cols)
            .ok_or(FormatError::BadHeader("matrix size"))?;
        let data = self.f64s(n)?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(FormatError::NonFinite);
        }
        Ok(RMat::from_vec(rows, cols, data))
    }

    /// Column-major complex matrix stored as interleaved `(re, im)` pairs.
    pub fn cmat(&mut self, rows: usize, cols: usize) -> Result<CMat, FormatError> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(2))
            .ok_or(FormatError::BadHeader("matrix size"))?;
        let data = self.f64s(n)?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(FormatError::NonFinite);
        }
        Ok(CMat::from_iterator(
            rows,
            cols,
            data.chunks_exact(2).map(|p| c64(p[0], p[1])),
        ))
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        let rest = self.buf.len() - self.pos;
        if rest != 0 {
            return Err(FormatError::TrailingBytes(rest));
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn header(&mut self, magic: &[u8; 8], version: u32) {
        self.buf.extend_from_slice(magic);
        self.u32(version);
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

    pub fn rmat(&mut self, m: &RMat) {
        for v in m.iter() {
            self.f64(*v);
        }
    }

    pub fn cmat(&mut self, m: &CMat) {
        for v in m.iter() {
            self.f64(v.re);
            self.f64(v.im);
        }
    }
}
