//! A small self-describing text container for dense matrices.
//!
//! ```text
//! w2s-container 1
//! @kind geometry
//! @p 4
//! [T 4 2]
//! <column 0, one value per token>
//! <column 1>
//! ```
//!
//! Each `[name rows cols]` block is followed by `cols` lines, one per column
//! (column-major). Values use the shortest representation that parses back
//! to the same `f64`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &str = "w2s-container 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub blocks: Vec<(String, DMatrix<f64>)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut c = Container::default();
        c.set("kind", kind);
        c
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        if let Some(slot) = self.meta.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.meta.push((key.to_string(), value));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing header field `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("header field `{key}` has bad value `{raw}`")))
    }

    pub fn push(&mut self, name: &str, m: DMatrix<f64>) {
        self.blocks.push((name.to_string(), m));
    }

    pub fn block(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("missing block `{name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "@{k} {v}");
        }
        for (name, m) in &self.blocks {
            let _ = writeln!(out, "[{name} {} {}]", m.nrows(), m.ncols());
            for col in m.column_iter() {
                let line: Vec<String> = col.iter().map(|x| format!("{x:?}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(Error::Format(format!("expected `{MAGIC}` on line 1"))),
        }
        let mut c = Container::default();
        while let Some((idx, raw)) = lines.next() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('@') {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                c.meta.push((k.to_string(), v.trim().to_string()));
                continue;
            }
            let Some(inner) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) else {
                return Err(Error::Format(format!("line {}: unexpected `{line}`", idx + 1)));
            };
            let parts: Vec<&str> = inner.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(Error::Format(format!("line {}: bad block header", idx + 1)));
            };
            let dim = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("line {}: bad dimension `{s}`", idx + 1)))
            };
            let (rows, cols) = (dim(rows)?, dim(cols)?);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..cols {
                let (cidx, col) = lines
                    .next()
                    .ok_or_else(|| Error::Format(format!("block `{name}` truncated")))?;
                let before = data.len();
                for tok in col.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|_| {
                        Error::Format(format!("line {}: bad number `{tok}`", cidx + 1))
                    })?);
                }
                if data.len() - before != rows {
                    return Err(Error::Format(format!(
                        "line {}: expected {rows} values, found {}",
                        cidx + 1,
                        data.len() - before
                    )));
                }
            }
            c.blocks
                .push((name.to_string(), DMatrix::from_column_slice(rows, cols, &data)));
        }
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
