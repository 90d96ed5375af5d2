// Little-endian byte reader shared by the checkpoint and dataset formats.
// Every failure reports the byte offset where decoding stopped.

use crate::error::{Error, Result};

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            reason: reason.into(),
        })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.remaining()
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            self.pos -= 4;
            return self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            ));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, supported: u32, kind: &str) -> Result<()> {
        let v = self.u32("version")?;
        if v != supported {
            self.pos -= 4;
            return self.fail(format!(
                "unsupported {kind} version {v}; this build reads version {supported}"
            ));
        }
        Ok(())
    }
}

/// Sum of bytes modulo 2^64.
pub(crate) fn byte_sum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(u64::from(b)))
}
