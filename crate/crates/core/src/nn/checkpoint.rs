//! `PVCK` checkpoint files: an ordered table of named tensors.
//!
//! Layout (little-endian): `b"PVCK"`, `u32` version, `u32` entry count, then
//! per entry a `u32` name length, the UTF-8 name bytes and a `PVT1` tensor
//! snapshot.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_u32, Tensor};

const MAGIC: &[u8; 4] = b"PVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTable {
    entries: Vec<(String, Tensor)>,
}

impl ParamTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_snapshot(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let bad = |m: &str| IoError::new(ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a PVCK checkpoint"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut table = ParamTable::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(bad("parameter name too long"));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let t = Tensor::read_snapshot(r)?;
            table.push(name, t);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ParamTable::read_from(&mut BufReader::new(f)).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData | std::io::ErrorKind::UnexpectedEof => {
                Error::Checkpoint(format!("{}: {e}", path.display()))
            }
            _ => Error::io(path, e),
        })
    }
}

/// Element-wise arithmetic mean of parameter tables that share names and
/// shapes. Entries are matched by name, so input order does not matter.
pub fn average_tables(tables: &[ParamTable]) -> Result<ParamTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Checkpoint("no checkpoints to average".into()))?;
    let k = tables.len() as f64;
    let mut out = ParamTable::new();
    for (name, t) in first.entries() {
        let mut columns: Vec<&[f64]> = Vec::with_capacity(tables.len());
        for table in tables {
            let other = table
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing")))?;
            if other.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?} vs {:?}",
                    other.shape(),
                    t.shape()
                )));
            }
            columns.push(other.data());
        }
        // Summing each element's values in sorted order makes the mean
        // independent of the order of `tables`, bit for bit.
        let mut vals = vec![0.0; columns.len()];
        let acc: Vec<f64> = (0..t.numel())
            .map(|i| {
                vals.iter_mut().zip(&columns).for_each(|(v, c)| *v = c[i]);
                vals.sort_by(f64::total_cmp);
                if vals[0] == vals[vals.len() - 1] {
                    vals[0]
                } else {
                    vals.iter().sum::<f64>() / k
                }
            })
            .collect();
        out.push(name.clone(), Tensor::new(t.shape().to_vec(), acc)?);
    }
    for table in &tables[1..] {
        if table.len() != first.len() {
            return Err(Error::Checkpoint("checkpoints hold different parameter sets".into()));
        }
    }
    Ok(out)
}
