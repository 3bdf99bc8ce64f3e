use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Stable string to index map. Indices are dense and assigned in insertion
/// order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        let mut v = Self::default();
        for n in names {
            v.intern(&n);
        }
        v
    }

    /// Index of `name`, inserting it if unseen.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Panics if `index` is out of range.
    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Writes `<string>\t<index>` lines in index order.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        for (i, n) in self.names.iter().enumerate() {
            writeln!(out, "{n}\t{i}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a sidecar. Indices must form a permutation of `0..n`.
    pub fn read_sidecar(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut entries: Vec<(usize, String)> = Vec::new();
        for (n, line) in file.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (name, idx) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err(n + 1, "expected <string>\\t<index>".into()))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(n + 1, format!("bad index {idx:?}")))?;
            entries.push((idx, name.to_owned()));
        }
        entries.sort_by_key(|e| e.0);
        let mut v = Self::default();
        for (expect, (idx, name)) in entries.into_iter().enumerate() {
            if idx != expect || v.get(&name).is_some() {
                return Err(parse_err(
                    0,
                    format!("indices are not a permutation near {name:?}"),
                ));
            }
            v.intern(&name);
        }
        Ok(v)
    }
}
