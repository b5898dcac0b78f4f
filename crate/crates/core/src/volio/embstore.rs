//! Dense row store: `u32 count`, `u32 dim` (little-endian) followed by
//! `count * dim` little-endian `f32` values, row-major. Row `i` is keyed by
//! line `i` of a companion id list.

use std::fs;
use std::path::{Path, PathBuf};

use super::container::{read_bytes, read_text};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RowStore {
    pub ids: Vec<String>,
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
}

impl RowStore {
    pub fn new(dim: usize) -> Self {
        RowStore {
            ids: Vec::new(),
            dim,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Contract(format!(
                "row of length {} pushed into a store of dimension {}",
                row.len(),
                self.dim
            )));
        }
        self.ids.push(id.into());
        self.rows.push(row.iter().map(|&v| v as f32).collect());
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.rows.len() * self.dim * 4);
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for row in &self.rows {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.rows[i].iter().map(|&v| v as f64).collect()
    }
}

pub fn ids_path(bin: &Path) -> PathBuf {
    bin.with_extension("ids")
}

pub fn write_store(bin: &Path, store: &RowStore) -> Result<()> {
    if let Some(p) = bin.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(bin, store.to_bytes())?;
    let mut ids = String::new();
    for id in &store.ids {
        ids.push_str(id);
        ids.push('\n');
    }
    fs::write(ids_path(bin), ids)?;
    Ok(())
}

pub fn parse_store(bytes: &[u8], ids_text: &str, path: &Path) -> Result<RowStore> {
    if bytes.len() < 8 {
        return Err(Error::format("row store", path, 0, "truncated header"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + count * dim * 4 {
        return Err(Error::format(
            "row store",
            path,
            0,
            format!("header says {count}x{dim} but payload has {} bytes", bytes.len() - 8),
        ));
    }
    let ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
    if ids.len() != count {
        return Err(Error::format(
            "row store id list",
            ids_path(path),
            ids.len(),
            format!("{} ids for {count} rows", ids.len()),
        ));
    }
    let rows = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>()
        .chunks(dim.max(1))
        .take(count)
        .map(|r| r.to_vec())
        .collect::<Vec<_>>();
    let rows = if dim == 0 { vec![Vec::new(); count] } else { rows };
    Ok(RowStore { ids, dim, rows })
}

pub fn read_store(bin: &Path) -> Result<RowStore> {
    let bytes = read_bytes(bin)?;
    let ids = read_text(&ids_path(bin))?;
    parse_store(&bytes, &ids, bin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_roundtrip() {
        let mut s = RowStore::new(3);
        s.push("a", &[1.0, -2.0, 0.5]).unwrap();
        s.push("b", &[0.0, 0.25, 8.0]).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &1.0f32.to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("emb.bin");
        write_store(&bin, &s).unwrap();
        assert_eq!(read_store(&bin).unwrap(), s);
        assert!(s.clone().push("c", &[1.0]).is_err());
    }

    #[test]
    fn mismatched_id_list_rejected() {
        let mut s = RowStore::new(1);
        s.push("a", &[1.0]).unwrap();
        assert!(parse_store(&s.to_bytes(), "a\nb\n", Path::new("x.bin")).is_err());
        assert!(parse_store(&s.to_bytes()[..9], "a\n", Path::new("x.bin")).is_err());
    }
}
