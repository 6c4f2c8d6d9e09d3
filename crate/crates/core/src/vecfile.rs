//! Line-oriented vector files.
//!
//! ```text
//! #<magic> v<version> dim=<dim> count=<count>
//! <key>\t<f64> <f64> ...
//! #end
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! read back reproduces every value bit for bit. Keys may not contain tabs or
//! newlines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VecFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("integrity: {0}")]
    Integrity(String),
}

pub(crate) struct Header {
    pub dim: usize,
    pub count: usize,
}

pub(crate) fn write<'a, I>(path: &Path, magic: &str, version: u32, dim: usize, rows: I) -> Result<(), VecFileError>
where
    I: ExactSizeIterator<Item = (String, &'a [f64])>,
{
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "#{magic} v{version} dim={dim} count={}", rows.len())?;
    for (key, v) in rows {
        if key.contains(['\t', '\n', '\r']) {
            return Err(VecFileError::Integrity(format!("key {key:?} contains a tab or newline")));
        }
        if v.len() != dim {
            return Err(VecFileError::Integrity(format!("key {key:?} has length {} not {dim}", v.len())));
        }
        w.write_all(key.as_bytes())?;
        w.write_all(b"\t")?;
        for (i, x) in v.iter().enumerate() {
            if i > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{x}")?;
        }
        w.write_all(b"\n")?;
    }
    w.write_all(b"#end\n")?;
    w.flush()?;
    Ok(())
}

fn parse_header(line: &str, magic: &str, version: u32) -> Result<Header, VecFileError> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(&format!("#{magic}")) {
        return Err(VecFileError::Header(format!("expected `#{magic}`")));
    }
    let v = parts.next().unwrap_or("");
    if v != format!("v{version}") {
        return Err(VecFileError::Header(format!("unsupported version `{v}`, expected v{version}")));
    }
    let mut dim = None;
    let mut count = None;
    for p in parts {
        if let Some(d) = p.strip_prefix("dim=") {
            dim = d.parse().ok();
        } else if let Some(c) = p.strip_prefix("count=") {
            count = c.parse().ok();
        }
    }
    let dim = dim.filter(|&d| d >= 1).ok_or_else(|| VecFileError::Header("missing or invalid dim".into()))?;
    let count = count.ok_or_else(|| VecFileError::Header("missing count".into()))?;
    Ok(Header { dim, count })
}

/// Reads the file, calling `row` for each `(key, vector)`. Fails when a row
/// has the wrong length or the row count disagrees with the header.
pub(crate) fn read<F>(path: &Path, magic: &str, version: u32, mut row: F) -> Result<Header, VecFileError>
where
    F: FnMut(&str, Vec<f64>) -> Result<(), String>,
{
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| VecFileError::Header("empty file".into()))??;
    let header = parse_header(&first, magic, version)?;
    let mut n = 0;
    let mut ended = false;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if ended {
            return Err(VecFileError::Integrity(format!("data after end marker at line {lineno}")));
        }
        if line == "#end" {
            ended = true;
            continue;
        }
        let (key, rest) = line
            .split_once('\t')
            .ok_or_else(|| VecFileError::Line { line: lineno, message: "missing tab separator".into() })?;
        let v: Vec<f64> = rest
            .split(' ')
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| VecFileError::Line { line: lineno, message: e.to_string() })?;
        if v.len() != header.dim {
            return Err(VecFileError::Line {
                line: lineno,
                message: format!("vector length {} does not match dim {}", v.len(), header.dim),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(VecFileError::Line { line: lineno, message: "non-finite value".into() });
        }
        row(key, v).map_err(|message| VecFileError::Line { line: lineno, message })?;
        n += 1;
    }
    if !ended {
        return Err(VecFileError::Integrity("missing end marker (truncated file?)".into()));
    }
    if n != header.count {
        return Err(VecFileError::Integrity(format!("header says {} rows, found {n}", header.count)));
    }
    Ok(header)
}
