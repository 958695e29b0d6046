//! Binary artifact formats.
//!
//! All on-disk numeric data is little-endian. Three container kinds exist:
//! feature cache files (`ANOF`, written by [`crate::backbone`]), memory bank
//! files (`ANOB`, written by [`crate::bank`]) and the named-tensor archive
//! (`ANOC`) defined here, which backs both backbone weights and model
//! checkpoints: a JSON descriptor followed by named float32 tensors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"ANOC";
pub const ARCHIVE_VERSION: u32 = 1;

pub(crate) fn write_u16(w: &mut impl Write, v: u16) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f32_slice(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_u16(r: &mut impl Read) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f32_vec(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_magic(r: &mut impl Read, expected: &[u8; 4]) -> std::io::Result<bool> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(&b == expected)
}

/// One named tensor inside an archive.
#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Container of named float32 tensors plus a JSON descriptor.
///
/// Layout: magic `ANOC`, version u32, descriptor length u32, descriptor JSON,
/// tensor count u32, then per tensor: name length u16, UTF-8 name, rank u8,
/// dims u32 each, row-major float32 data.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub descriptor: serde_json::Value,
    tensors: Vec<NamedTensor>,
    by_name: HashMap<String, usize>,
}

impl TensorArchive {
    pub fn new(descriptor: serde_json::Value) -> Self {
        TensorArchive {
            descriptor,
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name} shape/data mismatch"
        );
        self.by_name.insert(name.clone(), self.tensors.len());
        self.tensors.push(NamedTensor { name, shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.by_name.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total parameter count across all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(ARCHIVE_MAGIC).map_err(io_err)?;
        write_u32(&mut w, ARCHIVE_VERSION).map_err(io_err)?;
        let desc = serde_json::to_vec(&self.descriptor)
            .map_err(|e| Error::format(path, e.to_string()))?;
        write_u32(&mut w, desc.len() as u32).map_err(io_err)?;
        w.write_all(&desc).map_err(io_err)?;
        write_u32(&mut w, self.tensors.len() as u32).map_err(io_err)?;
        for t in &self.tensors {
            write_u16(&mut w, t.name.len() as u16).map_err(io_err)?;
            w.write_all(t.name.as_bytes()).map_err(io_err)?;
            w.write_all(&[t.shape.len() as u8]).map_err(io_err)?;
            for &d in &t.shape {
                write_u32(&mut w, d as u32).map_err(io_err)?;
            }
            write_f32_slice(&mut w, &t.data).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| Error::io(path, e);
        if !read_magic(&mut r, ARCHIVE_MAGIC).map_err(io_err)? {
            return Err(Error::format(path, "bad magic, expected ANOC"));
        }
        let version = read_u32(&mut r).map_err(io_err)?;
        if version != ARCHIVE_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let desc_len = read_u32(&mut r).map_err(io_err)? as usize;
        let mut desc = vec![0u8; desc_len];
        r.read_exact(&mut desc).map_err(io_err)?;
        let descriptor: serde_json::Value =
            serde_json::from_slice(&desc).map_err(|e| Error::format(path, e.to_string()))?;
        let count = read_u32(&mut r).map_err(io_err)? as usize;
        let mut archive = TensorArchive::new(descriptor);
        for _ in 0..count {
            let name_len = read_u16(&mut r).map_err(io_err)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io_err)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::format(path, format!("bad tensor name: {e}")))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(io_err)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r).map_err(io_err)? as usize);
            }
            let n: usize = shape.iter().product();
            let data = read_f32_vec(&mut r, n).map_err(io_err)?;
            archive.insert(name, shape, data);
        }
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.anoc");
        let mut a = TensorArchive::new(serde_json::json!({"kind": "test", "n": 3}));
        a.insert("w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        a.insert("b", vec![2], vec![-0.5, 0.5]);
        a.write(&path).unwrap();

        let back = TensorArchive::read(&path).unwrap();
        assert_eq!(back.descriptor["kind"], "test");
        assert_eq!(back.len(), 2);
        let w = back.get("w").unwrap();
        assert_eq!(w.shape, vec![2, 3]);
        assert_eq!(w.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(back.param_count(), 8);
    }

    #[test]
    fn archive_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.anoc");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            TensorArchive::read(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn archive_missing_file_is_io_error() {
        let err = TensorArchive::read(Path::new("/nonexistent/x.anoc")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
