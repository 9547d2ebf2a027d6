//! Versioned flat text format for network weights.
//!
//! ```text
//! evb-gnn v1 F=4 H=16
//! 1.2345678901234567e-2
//! ...
//! ```
//!
//! One value per line in row-major order, written with 17 significant digits
//! so that every `f64` parses back to the same bits.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub magic: String,
    pub dims: BTreeMap<String, usize>,
    pub values: Vec<f64>,
}

impl FlatParams {
    pub fn dim(&self, key: &str) -> Result<usize> {
        self.dims
            .get(key)
            .copied()
            .ok_or_else(|| Error::Validation(format!("{} header lacks {key}=", self.magic)))
    }
}

/// `dims` keep the order given, so headers read naturally (`F=4 H=16`).
pub fn write_flat<W: Write>(mut out: W, magic: &str, dims: &[(&str, usize)], values: &[f64]) -> std::io::Result<()> {
    write!(out, "{magic} {FORMAT_VERSION}")?;
    for (k, v) in dims {
        write!(out, " {k}={v}")?;
    }
    writeln!(out)?;
    for v in values {
        writeln!(out, "{v:.16e}")?;
    }
    out.flush()
}

pub fn save_flat(path: impl AsRef<Path>, magic: &str, dims: &[(&str, usize)], values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_flat(&mut buf, magic, dims, values).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn parse_flat(text: &str, expected_magic: &str) -> Result<FlatParams> {
    let bad = |line: usize, message: String| Error::Format {
        path: expected_magic.into(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty parameter file".into()))?;
    let mut tokens = header.split_whitespace();
    let magic = tokens.next().unwrap_or("");
    if magic != expected_magic {
        return Err(bad(1, format!("expected `{expected_magic}`, found `{magic}`")));
    }
    let version = tokens.next().unwrap_or("");
    if version != FORMAT_VERSION {
        return Err(bad(1, format!("unsupported version `{version}`")));
    }
    let mut dims = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| bad(1, format!("malformed header field `{tok}`")))?;
        let v: usize = v.parse().map_err(|_| bad(1, format!("malformed dimension `{tok}`")))?;
        dims.insert(k.to_string(), v);
    }
    let values = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| bad(k + 2, format!("bad value `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlatParams {
        magic: magic.to_string(),
        dims,
        values,
    })
}

pub fn load_flat(path: impl AsRef<Path>, expected_magic: &str) -> Result<FlatParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_flat(&text, expected_magic).map_err(|e| match e {
        Error::Format { line, message, .. } => Error::Format {
            path: path.into(),
            line,
            message,
        },
        other => other,
    })
}
