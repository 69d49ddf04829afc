//! Little-endian binary framing shared by all artifact files.
//!
//! Every file starts with an 8-byte magic followed by a `u32` format version.
//! Strings are a `u32` byte length followed by UTF-8 bytes; sequences are a
//! `u64` element count followed by the elements.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum BinError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {what} version {found} (this build reads version {expected})")]
    VersionMismatch {
        what: String,
        expected: u32,
        found: u32,
    },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Stream(#[from] io::Error),
}

pub struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        BinWriter { inner }
    }

    pub fn header(&mut self, magic: &[u8; 8], version: u32) -> io::Result<()> {
        self.inner.write_all(magic)?;
        self.u32(version)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.inner.write_all(&[v])
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }

    pub fn len(&mut self, n: usize) -> io::Result<()> {
        self.u64(n as u64)
    }

    pub fn str(&mut self, s: &str) -> io::Result<()> {
        self.u32(s.len() as u32)?;
        self.inner.write_all(s.as_bytes())
    }

    pub fn u32s(&mut self, v: &[u32]) -> io::Result<()> {
        self.len(v.len())?;
        v.iter().try_for_each(|&x| self.u32(x))
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub struct BinReader<R: Read> {
    inner: R,
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R) -> Self {
        BinReader { inner }
    }

    pub fn header(&mut self, magic: &[u8; 8], version: u32, what: &str) -> Result<(), BinError> {
        let mut found = [0u8; 8];
        self.inner.read_exact(&mut found)?;
        if &found != magic {
            return Err(BinError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        let found = self.u32()?;
        if found != version {
            return Err(BinError::VersionMismatch {
                what: what.to_string(),
                expected: version,
                found,
            });
        }
        Ok(())
    }

    fn array<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub fn u8(&mut self) -> io::Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> io::Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn u64(&mut self) -> io::Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn f32(&mut self) -> io::Result<f32> {
        self.array().map(f32::from_le_bytes)
    }

    pub fn f64(&mut self) -> io::Result<f64> {
        self.array().map(f64::from_le_bytes)
    }

    /// Sequence length, rejected when it exceeds `max` (guards against
    /// allocating from a corrupt count).
    pub fn len(&mut self, max: usize) -> Result<usize, BinError> {
        let n = self.u64()?;
        if n > max as u64 {
            return Err(BinError::Corrupt(format!("length {n} exceeds bound {max}")));
        }
        Ok(n as usize)
    }

    pub fn str(&mut self) -> Result<String, BinError> {
        let n = self.u32()? as usize;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| BinError::Corrupt(e.to_string()))
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>, BinError> {
        let n = self.len(usize::MAX >> 4)?;
        (0..n).map(|_| self.u32().map_err(BinError::from)).collect()
    }

    /// Fails unless the stream is exhausted.
    pub fn finish(mut self) -> Result<(), BinError> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(BinError::Corrupt("trailing bytes".into())),
        }
    }
}

pub fn create(path: &Path) -> Result<BinWriter<BufWriter<File>>, BinError> {
    let file = File::create(path).map_err(|source| BinError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(BinWriter::new(BufWriter::new(file)))
}

pub fn open(path: &Path) -> Result<BinReader<BufReader<File>>, BinError> {
    let file = File::open(path).map_err(|source| BinError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(BinReader::new(BufReader::new(file)))
}

pub fn finish_file(w: BinWriter<BufWriter<File>>) -> Result<(), BinError> {
    let mut inner = w.into_inner();
    inner.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_mismatch_is_reported() {
        let mut w = BinWriter::new(Vec::new());
        w.header(b"TESTMAG1", 3).unwrap();
        let bytes = w.into_inner();
        let mut r = BinReader::new(&bytes[..]);
        match r.header(b"TESTMAG1", 4, "test") {
            Err(BinError::VersionMismatch { found: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut r = BinReader::new(&bytes[..]);
        assert!(matches!(r.header(b"OTHERMAG", 3, "test"), Err(BinError::BadMagic { .. })));
    }

    #[test]
    fn primitives_round_trip() {
        let mut w = BinWriter::new(Vec::new());
        w.u32(7).unwrap();
        w.f64(-0.125).unwrap();
        w.str("héllo").unwrap();
        w.u32s(&[1, 2, 3]).unwrap();
        let bytes = w.into_inner();
        let mut r = BinReader::new(&bytes[..]);
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), -0.125);
        assert_eq!(r.str().unwrap(), "héllo");
        assert_eq!(r.u32s().unwrap(), vec![1, 2, 3]);
        r.finish().unwrap();
    }
}
