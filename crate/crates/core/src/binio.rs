//! Little-endian readers and writers for the checkpoint and dataset files.

use crate::error::{Error, Result};

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    /// u32 length followed by the UTF-8 bytes.
    pub fn text32(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn error(&self, expected: impl Into<String>, found: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(
                format!("{n} bytes of {what}"),
                format!("end of file after {} bytes", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    pub fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let start = self.offset();
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map_err(|_| Error::Format {
            offset: start,
            expected: format!("UTF-8 {what}"),
            found: "invalid bytes".into(),
        })
    }

    pub fn text32(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        self.utf8(n, what)
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(Error::Format {
                offset: at,
                expected: format!("magic {:?}", String::from_utf8_lossy(magic)),
                found: format!("{:?}", String::from_utf8_lossy(found)),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let at = self.offset();
        let v = self.u32("version")?;
        if v != expected {
            return Err(Error::Format {
                offset: at,
                expected: format!("version {expected}"),
                found: format!("version {v}"),
            });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(
                "end of file",
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut w = Writer::default();
        w.bytes(b"ABCD");
        w.u32(7);
        w.f64(-1.5);
        w.text32("héllo");
        let mut r = Reader::new(&w.buf);
        r.magic(b"ABCD").unwrap();
        r.version(7).unwrap();
        assert_eq!(r.f64("x").unwrap(), -1.5);
        assert_eq!(r.text32("s").unwrap(), "héllo");
        r.finish().unwrap();

        let mut r = Reader::new(&w.buf[..10]);
        r.magic(b"ABCD").unwrap();
        r.u32("v").unwrap();
        match r.f64("x") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        let mut r = Reader::new(&w.buf);
        assert!(matches!(
            r.magic(b"ABCE"),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
