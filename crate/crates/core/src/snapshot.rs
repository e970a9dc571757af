//! Versioned binary container for model parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"BCSN"
//! version    u32            (currently 1)
//! kind       str            ("encoder", "bccnn", "nnjm", ...)
//! dtype      u8             (4 = f32, 8 = f64)
//! n_meta     u32, then n_meta × (key: str, value: str)
//! n_lists    u32, then n_lists × (name: str, count: u32, count × str)
//! n_tensors  u32, then n_tensors × (name: str, rows: u32, cols: u32,
//!                                   rows·cols × dtype-wide LE floats)
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes. Sections are written
//! in key order so identical contents produce identical bytes. Floats are
//! stored as raw IEEE bits, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math::{DenseMatrix, DenseVector};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"BCSN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub lists: BTreeMap<String, Vec<String>>,
    pub tensors: BTreeMap<String, DenseMatrix<T>>,
}

impl<T: Scalar> Snapshot<T> {
    pub fn new(kind: &str) -> Self {
        Snapshot {
            kind: kind.to_string(),
            meta: BTreeMap::new(),
            lists: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Snapshot(format!("missing meta key {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Snapshot(format!("bad value {raw:?} for meta key {key:?}")))
    }

    pub fn put_matrix(&mut self, name: &str, m: &DenseMatrix<T>) {
        self.tensors.insert(name.to_string(), m.clone());
    }

    pub fn put_vector(&mut self, name: &str, v: &DenseVector<T>) {
        let m = DenseMatrix::from_vec(v.len(), 1, v.as_slice().to_vec()).expect("finite vector");
        self.tensors.insert(name.to_string(), m);
    }

    pub fn take_matrix(&mut self, name: &str) -> Result<DenseMatrix<T>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Snapshot(format!("missing tensor {name:?}")))
    }

    pub fn take_vector(&mut self, name: &str) -> Result<DenseVector<T>> {
        let m = self.take_matrix(name)?;
        if m.cols() != 1 {
            return Err(Error::Snapshot(format!("tensor {name:?} is not a column vector")));
        }
        Ok(DenseVector::from(m.as_slice().to_vec()))
    }

    pub fn take_list(&mut self, name: &str) -> Result<Vec<String>> {
        self.lists
            .remove(name)
            .ok_or_else(|| Error::Snapshot(format!("missing list {name:?}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Snapshot(format!("expected a {kind:?} snapshot, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.push(T::DTYPE);
        put_u32(&mut out, self.meta.len());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.lists.len());
        for (name, items) in &self.lists {
            put_str(&mut out, name);
            put_u32(&mut out, items.len());
            for s in items {
                put_str(&mut out, s);
            }
        }
        put_u32(&mut out, self.tensors.len());
        for (name, m) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, m.rows());
            put_u32(&mut out, m.cols());
            for &x in m.as_slice() {
                x.put_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let dtype = r.take(1)?[0];
        if dtype != T::DTYPE {
            return Err(Error::Snapshot(format!(
                "snapshot stores {}-byte floats, reader expects {}",
                dtype,
                T::DTYPE
            )));
        }
        let mut snap = Snapshot::new(&kind);
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            snap.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let n = r.u32()? as usize;
            let items = (0..n).map(|_| r.string()).collect::<Result<_>>()?;
            snap.lists.insert(name, items);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * T::BYTES)?;
            let data = raw.chunks_exact(T::BYTES).map(T::get_le).collect();
            let m = DenseMatrix::from_vec(rows, cols, data)
                .map_err(|e| Error::Snapshot(format!("tensor {name:?}: {e}")))?;
            snap.tensors.insert(name, m);
        }
        if r.pos != bytes.len() {
            return Err(Error::Snapshot("trailing bytes".into()));
        }
        Ok(snap)
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Replaces `path` with `bytes` via temp file + rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir()?,
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Snapshot("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let raw = self.take(4)?;
        Ok(u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Snapshot("invalid UTF-8".into()))
    }
}
