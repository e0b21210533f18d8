//! NVCB: the on-disk tensor container shared by datasets and checkpoints.
//!
//! Layout, all little-endian:
//! magic `"NVCB"` | version u32 | entry count u32 | entries. Each entry:
//! name length u16 + UTF-8 name | dtype u8 (0 = f32, 1 = f64) | rank u8 |
//! dims as u32s | raw element data.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"NVCB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum NvcbData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NvcbData {
    pub fn len(&self) -> usize {
        match self {
            NvcbData::F32(v) => v.len(),
            NvcbData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64 regardless of storage type.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            NvcbData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            NvcbData::F64(v) => v.clone(),
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            NvcbData::F32(_) => 0,
            NvcbData::F64(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NvcbEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: NvcbData,
}

impl NvcbEntry {
    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        NvcbEntry {
            name: name.into(),
            dims: dims.to_vec(),
            data: NvcbData::F32(data),
        }
    }

    pub fn f64(name: impl Into<String>, dims: &[usize], data: Vec<f64>) -> Self {
        NvcbEntry {
            name: name.into(),
            dims: dims.to_vec(),
            data: NvcbData::F64(data),
        }
    }

    fn validate(&self) -> Result<()> {
        let numel: usize = self.dims.iter().product();
        if numel != self.data.len() {
            return Err(Error::Format(format!(
                "entry {}: dims {:?} imply {} elements, got {}",
                self.name,
                self.dims,
                numel,
                self.data.len()
            )));
        }
        if self.name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name too long: {}", self.name)));
        }
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("entry {}: rank too high", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NvcbContainer {
    entries: Vec<NvcbEntry>,
    by_name: BTreeMap<String, usize>,
}

impl NvcbContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: NvcbEntry) -> Result<()> {
        entry.validate()?;
        if self.by_name.contains_key(&entry.name) {
            return Err(Error::Format(format!("duplicate entry name {}", entry.name)));
        }
        self.by_name.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NvcbEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[NvcbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u16).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.data.dtype_code(), e.dims.len() as u8])?;
            for &d in &e.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            match &e.data {
                NvcbData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                NvcbData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut out = NvcbContainer::new();
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Format(format!("entry name not UTF-8: {e}")))?;
            let mut head = [0u8; 2];
            r.read_exact(&mut head)?;
            let (dtype, rank) = (head[0], head[1] as usize);
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(r)? as usize);
            }
            let numel: usize = dims.iter().product();
            let data = match dtype {
                0 => {
                    let mut buf = vec![0u8; numel * 4];
                    r.read_exact(&mut buf)?;
                    NvcbData::F32(
                        buf.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                1 => {
                    let mut buf = vec![0u8; numel * 8];
                    r.read_exact(&mut buf)?;
                    NvcbData::F64(
                        buf.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => return Err(Error::Format(format!("unknown dtype code {other}"))),
            };
            out.push(NvcbEntry { name, dims, data })?;
        }
        Ok(out)
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
        ));
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NvcbContainer {
        let mut c = NvcbContainer::new();
        c.push(NvcbEntry::f32("images", &[2, 3], vec![1.0, -2.5, 0.0, 3.5e-7, f32::MIN, f32::MAX]))
            .unwrap();
        c.push(NvcbEntry::f64(
            "poses",
            &[1, 4],
            vec![std::f64::consts::PI, -0.0, 1e-308, 42.0],
        ))
        .unwrap();
        c
    }

    #[test]
    fn round_trip_is_bitwise_lossless() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = NvcbContainer::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(c, back);
        // And the serialized form itself is stable.
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = NvcbContainer::new();
        c.push(NvcbEntry::f32("x", &[1], vec![0.0])).unwrap();
        assert!(matches!(
            c.push(NvcbEntry::f32("x", &[1], vec![0.0])),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn size_mismatch_rejected() {
        let mut c = NvcbContainer::new();
        assert!(c.push(NvcbEntry::f32("x", &[3], vec![0.0])).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(matches!(
            NvcbContainer::read_from(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nvcb");
        let c = sample();
        c.write_file(&path).unwrap();
        assert_eq!(NvcbContainer::read_file(&path).unwrap(), c);
    }
}
