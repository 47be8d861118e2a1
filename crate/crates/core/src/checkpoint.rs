//! Checkpoint files: a named-tensor container holding model parameters,
//! batch-norm running statistics, optimizer moments, and trainer counters.
//!
//! Layout: magic "CKPT", version, entry count, then a manifest of
//! (name, shape, payload offset) records, then the raw little-endian f64
//! payloads in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    /// Adds a tensor; names must be unique within one checkpoint.
    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        if self.entries.iter().any(|(n, _, _)| n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        self.entries.push((name.to_string(), shape.to_vec(), values));
        Ok(())
    }

    pub fn insert_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.insert(name, &[1], vec![value])
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, v)| (s.as_slice(), v.as_slice()))
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|(_, v)| v.first().copied())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.entries
            .iter()
            .map(|(n, s, v)| (n.as_str(), s.as_slice(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let ctx = || path.display().to_string();
        let put = |w: &mut BufWriter<File>, bytes: &[u8]| {
            w.write_all(bytes).map_err(|e| Error::io(ctx(), e))
        };
        put(&mut w, MAGIC)?;
        put(&mut w, &VERSION.to_le_bytes())?;
        put(&mut w, &(self.entries.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (name, shape, values) in &self.entries {
            put(&mut w, &(name.len() as u32).to_le_bytes())?;
            put(&mut w, name.as_bytes())?;
            put(&mut w, &(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                put(&mut w, &(d as u32).to_le_bytes())?;
            }
            put(&mut w, &offset.to_le_bytes())?;
            offset += 8 * values.len() as u64;
        }
        for (_, _, values) in &self.entries {
            for v in values {
                put(&mut w, &v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
        let count = u32::from_le_bytes(u32buf) as usize;

        let mut manifest = Vec::with_capacity(count);
        let mut expect_offset = 0u64;
        for i in 0..count {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated manifest"))?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf).map_err(|_| bad("truncated manifest"))?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| bad(&format!("entry {i}: name is not utf-8")))?;
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated manifest"))?;
            let rank = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut u32buf).map_err(|_| bad("truncated manifest"))?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let mut u64buf = [0u8; 8];
            r.read_exact(&mut u64buf).map_err(|_| bad("truncated manifest"))?;
            let offset = u64::from_le_bytes(u64buf);
            if offset != expect_offset {
                return Err(bad(&format!(
                    "entry {name}: offset {offset} does not match expected {expect_offset}"
                )));
            }
            expect_offset += 8 * shape.iter().product::<usize>() as u64;
            manifest.push((name, shape));
        }

        let mut out = Checkpoint::new();
        for (name, shape) in manifest {
            let n = shape.iter().product::<usize>();
            let mut buf = vec![0u8; 8 * n];
            r.read_exact(&mut buf)
                .map_err(|_| bad(&format!("truncated payload for {name}")))?;
            let values = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.insert(&name, &shape, values)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path.display().to_string(), e))? != 0 {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(out)
    }
}
