//! Precomputed appearance vectors, one row per detection.
//!
//! Binary layout (little endian): `b"HTEM"`, `u32` row count, `u32` dimension,
//! then `count × dim` `f32` values in row-major order; row `i` belongs to
//! detection id `i`. The CSV fallback has one `detection_id,v0,...,v127` line per row.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 128;
const MAGIC: &[u8; 4] = b"HTEM";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    rows: Vec<Option<Vec<f32>>>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: u32, v: Vec<f32>) -> Result<()> {
        if v.len() != EMBEDDING_DIM {
            return Err(Error::EmbeddingDim {
                expected: EMBEDDING_DIM,
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {key}")));
        }
        let key = key as usize;
        if self.rows.len() <= key {
            self.rows.resize(key + 1, None);
        }
        self.rows[key] = Some(v);
        Ok(())
    }

    pub fn get(&self, key: u32) -> Option<&[f32]> {
        self.rows.get(key as usize).and_then(|r| r.as_deref())
    }

    /// Number of stored rows.
    pub fn len(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.rows.len() as u32).to_le_bytes())?;
        w.write_all(&(EMBEDDING_DIM as u32).to_le_bytes())?;
        for (i, row) in self.rows.iter().enumerate() {
            let row = row
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter(format!("binary embedding tables must be dense; row {i} missing")))?;
            for x in row {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::InvalidParameter(format!("embedding file: {m}"));
        let mut header = [0u8; 12];
        r.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let count = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        if dim != EMBEDDING_DIM {
            return Err(Error::EmbeddingDim {
                expected: EMBEDDING_DIM,
                actual: dim,
            });
        }
        let mut table = Self::new();
        let mut buf = vec![0u8; dim * 4];
        for i in 0..count {
            r.read_exact(&mut buf)?;
            let row = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            table.insert(i as u32, row)?;
        }
        Ok(table)
    }

    pub fn read_csv<R: Read>(r: R, path: &Path) -> Result<Self> {
        let mut table = Self::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let mut fields = line.split(',').map(str::trim);
            let key: u32 = fields
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e| err(format!("detection id: {e}")))?;
            let v = fields
                .map(|f| f.parse::<f32>().map_err(|e| err(format!("value {f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            table.insert(key, v).map_err(|e| err(e.to_string()))?;
        }
        Ok(table)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if let Some(row) = row {
                write!(w, "{i}")?;
                for x in row {
                    write!(w, ",{x}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Loads a table, choosing the format from the file's magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(MAGIC) {
            Self::read_binary(bytes.as_slice())
        } else {
            Self::read_csv(bytes.as_slice(), path)
        }
    }
}
