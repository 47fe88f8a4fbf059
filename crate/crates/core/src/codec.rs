//! Little-endian byte helpers shared by the corpus and checkpoint containers.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    /// Length-prefixed (u32) block followed by its CRC32.
    pub fn checked_block(&mut self, payload: &[u8]) {
        self.u32(payload.len() as u32);
        self.bytes(payload);
        self.u32(crc32fast::hash(payload));
    }
}

pub(crate) fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::format(what, format!("{v} does not fit in u16")))
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(what, format!("{v} does not fit in u32")))
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], context: impl Into<String>) -> Self {
        ByteReader {
            data,
            pos: 0,
            context: context.into(),
        }
    }

    pub fn set_context(&mut self, context: impl Into<String>) {
        self.context = context.into();
    }

    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn error(&self, msg: impl Into<String>) -> Error {
        Error::format(self.context.clone(), msg)
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a block written by [`ByteWriter::checked_block`], verifying its CRC.
    pub fn checked_block(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        let payload = self.take(len)?;
        let crc = self.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checksum {
                context: self.context.clone(),
            });
        }
        Ok(payload)
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
