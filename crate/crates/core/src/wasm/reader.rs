//! Forward-only byte cursor with LEB128 decoding.
//!
//! The cursor never moves backwards, so the number of bytes it has consumed is an
//! exact count of how often the underlying bytes were read. Decoder, validator,
//! interpreter and compiler all go through it.

use core::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadError {
    pub offset: usize,
    pub reason: &'static str,
}

impl fmt::Display for ReadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at offset {}", self.reason, self.offset)
    }
}

#[derive(Clone, Debug)]
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    consumed: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self::at(data, 0)
    }

    /// A cursor over `data` positioned at `pos`.
    pub fn at(data: &'a [u8], pos: usize) -> Self {
        Reader { data, pos, consumed: 0 }
    }

    #[inline]
    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Total number of bytes handed out by this cursor.
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn is_at_end(&self) -> bool {
        self.pos >= self.data.len()
    }

    pub fn remaining(&self) -> usize {
        self.data.len().saturating_sub(self.pos)
    }

    fn err(&self, reason: &'static str) -> ReadError {
        ReadError { offset: self.pos, reason }
    }

    #[inline]
    pub fn u8(&mut self) -> Result<u8, ReadError> {
        match self.data.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                self.consumed += 1;
                Ok(b)
            }
            None => Err(self.err("unexpected end of input")),
        }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], ReadError> {
        if self.remaining() < n {
            return Err(self.err("unexpected end of input"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        self.consumed += n;
        Ok(s)
    }

    /// Limits the cursor to `len` bytes from the current position.
    pub fn sub(&mut self, len: usize) -> Result<Reader<'a>, ReadError> {
        if self.remaining() < len {
            return Err(self.err("section extends past end of input"));
        }
        let r = Reader { data: &self.data[..self.pos + len], pos: self.pos, consumed: 0 };
        self.pos += len;
        self.consumed += len;
        Ok(r)
    }

    fn leb_unsigned(&mut self, bits: u32) -> Result<u64, ReadError> {
        let mut result: u64 = 0;
        let mut shift = 0u32;
        loop {
            let b = self.u8()?;
            if shift >= bits {
                return Err(self.err("integer representation too long"));
            }
            if shift + 7 > bits && (b & 0x7f) >> (bits - shift) != 0 {
                return Err(self.err("integer too large"));
            }
            result |= u64::from(b & 0x7f) << shift;
            shift += 7;
            if b & 0x80 == 0 {
                return Ok(result);
            }
        }
    }

    fn leb_signed(&mut self, bits: u32) -> Result<i64, ReadError> {
        let mut result: i64 = 0;
        let mut shift = 0u32;
        loop {
            let b = self.u8()?;
            if shift >= bits {
                return Err(self.err("integer representation too long"));
            }
            if shift + 7 > bits {
                // the unused high bits of the final byte must sign-extend the value
                let used = bits - shift;
                let high = (b & 0x7f) >> (used - 1);
                if high != 0 && high != (0x7f >> (used - 1)) {
                    return Err(self.err("integer too large"));
                }
            }
            result |= i64::from(b & 0x7f) << shift;
            shift += 7;
            if b & 0x80 == 0 {
                if shift < 64 && b & 0x40 != 0 {
                    result |= -1i64 << shift;
                }
                return Ok(result);
            }
        }
    }

    pub fn u32(&mut self) -> Result<u32, ReadError> {
        self.leb_unsigned(32).map(|v| v as u32)
    }

    pub fn i32(&mut self) -> Result<i32, ReadError> {
        self.leb_signed(32).map(|v| v as i32)
    }

    pub fn i64(&mut self) -> Result<i64, ReadError> {
        self.leb_signed(64)
    }

    /// Signed 33-bit LEB used by block types.
    pub fn s33(&mut self) -> Result<i64, ReadError> {
        self.leb_signed(33)
    }

    pub fn f32_bits(&mut self) -> Result<u32, ReadError> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64_bits(&mut self) -> Result<u64, ReadError> {
        let b = self.bytes(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub fn name(&mut self) -> Result<&'a str, ReadError> {
        let len = self.u32()? as usize;
        let off = self.pos;
        let b = self.bytes(len)?;
        core::str::from_utf8(b).map_err(|_| ReadError { offset: off, reason: "malformed UTF-8 name" })
    }
}

/// Appends the unsigned LEB128 encoding of `v`.
pub fn write_u32(out: &mut alloc::vec::Vec<u8>, mut v: u32) {
    loop {
        let b = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(b);
            return;
        }
        out.push(b | 0x80);
    }
}

/// Appends the signed LEB128 encoding of `v`.
pub fn write_i64(out: &mut alloc::vec::Vec<u8>, mut v: i64) {
    loop {
        let b = (v & 0x7f) as u8;
        v >>= 7;
        let done = (v == 0 && b & 0x40 == 0) || (v == -1 && b & 0x40 != 0);
        if done {
            out.push(b);
            return;
        }
        out.push(b | 0x80);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn rejects_overlong_u32() {
        let data = [0x80, 0x80, 0x80, 0x80, 0x80, 0x00];
        assert!(Reader::new(&data).u32().is_err());
        let data = [0xff, 0xff, 0xff, 0xff, 0x1f];
        assert!(Reader::new(&data).u32().is_err());
        let data = [0xff, 0xff, 0xff, 0xff, 0x0f];
        assert_eq!(Reader::new(&data).u32().unwrap(), u32::MAX);
    }

    #[test]
    fn signed_boundaries() {
        let mut out = Vec::new();
        write_i64(&mut out, i32::MIN as i64);
        assert_eq!(Reader::new(&out).i32().unwrap(), i32::MIN);
        // 0x7f in the last byte of an i32 is a valid sign extension
        let data = [0xff, 0xff, 0xff, 0xff, 0x7f];
        assert_eq!(Reader::new(&data).i32().unwrap(), -1);
        let data = [0xff, 0xff, 0xff, 0xff, 0x4f];
        assert!(Reader::new(&data).i32().is_err());
    }

    proptest! {
        #[test]
        fn leb_roundtrip(u in any::<u32>(), s in any::<i64>(), t in any::<i32>()) {
            let mut out = Vec::new();
            write_u32(&mut out, u);
            write_i64(&mut out, s);
            write_i64(&mut out, t as i64);
            let mut r = Reader::new(&out);
            prop_assert_eq!(r.u32().unwrap(), u);
            prop_assert_eq!(r.i64().unwrap(), s);
            prop_assert_eq!(r.i32().unwrap(), t);
            prop_assert!(r.is_at_end());
            prop_assert_eq!(r.consumed(), out.len());
        }
    }
}
