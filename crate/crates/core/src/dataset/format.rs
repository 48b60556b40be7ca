//! Feature-table file encodings.
//!
//! Text:
//!
//! ```text
//! #itosr-features v1 n=<n> d=<d> c=<c> truth=<0|1>
//! id,label,f_1,...,f_d[,truth]
//! ```
//!
//! Floats are written with 9 significant digits, which is exact for `f32`.
//!
//! Binary: magic `ITOSRFT1`, then little-endian `u32 n, u32 d, u32 c`,
//! `u8` truth flag, `n*d` `f32` row-major features, `n` `i32` labels and, if
//! flagged, `n` `i32` truths.
//!
//! The reader sniffs the magic bytes, so either encoding loads through
//! [`read_table`].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::DatasetError;
use crate::matrix::Matrix;

pub const TEXT_MAGIC: &str = "#itosr-features";
pub const BINARY_MAGIC: &[u8; 8] = b"ITOSRFT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Encoding {
    #[default]
    Text,
    Binary,
}

/// Raw content of one feature-table file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub features: Matrix,
    /// `1..=c` for train rows, `0` for unlabeled test rows.
    pub labels: Vec<i32>,
    pub truth: Option<Vec<i32>>,
    pub c: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_table(path: &Path) -> Result<FeatureTable, DatasetError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| {
            DatasetError::MalformedHeader("neither binary magic nor UTF-8 text".into())
        })?;
        parse_text(text)
    }
}

pub fn write_table(
    path: &Path,
    table: &FeatureTable,
    encoding: Encoding,
) -> Result<(), DatasetError> {
    let n = table.features.rows();
    if table.labels.len() != n || table.truth.as_ref().is_some_and(|t| t.len() != n) {
        return Err(DatasetError::Invalid(
            "label/truth column length differs from row count".into(),
        ));
    }
    let bytes = match encoding {
        Encoding::Text => encode_text(table).into_bytes(),
        Encoding::Binary => encode_binary(table),
    };
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn encode_text(t: &FeatureTable) -> String {
    use std::fmt::Write as _;
    let (n, d) = t.features.shape();
    let mut s = format!(
        "{TEXT_MAGIC} v1 n={n} d={d} c={} truth={}\n",
        t.c,
        u8::from(t.truth.is_some())
    );
    for r in 0..n {
        write!(s, "{r},{}", t.labels[r]).unwrap();
        for &v in t.features.row(r) {
            write!(s, ",{:.8e}", v as f32).unwrap();
        }
        if let Some(truth) = &t.truth {
            write!(s, ",{}", truth[r]).unwrap();
        }
        s.push('\n');
    }
    s
}

fn encode_binary(t: &FeatureTable) -> Vec<u8> {
    let (n, d) = t.features.shape();
    let mut out = Vec::with_capacity(21 + n * d * 4 + n * 8);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(t.c as u32).to_le_bytes());
    out.push(u8::from(t.truth.is_some()));
    for &v in t.features.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &t.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    if let Some(truth) = &t.truth {
        for &l in truth {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

struct Header {
    n: usize,
    d: usize,
    c: usize,
    truth: bool,
}

fn parse_header(line: &str) -> Result<Header, DatasetError> {
    let bad = |detail: &str| DatasetError::MalformedHeader(format!("{detail}: {line:?}"));
    let mut tok = line.split_whitespace();
    if tok.next() != Some(TEXT_MAGIC) {
        return Err(bad("missing magic"));
    }
    if tok.next() != Some("v1") {
        return Err(bad("unsupported version"));
    }
    let mut field = |key: &str| -> Result<usize, DatasetError> {
        tok.next()
            .and_then(|t| t.strip_prefix(key))
            .and_then(|t| t.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("bad or missing `{key}=`")))
    };
    let n = field("n")?;
    let d = field("d")?;
    let c = field("c")?;
    let truth = match field("truth")? {
        0 => false,
        1 => true,
        _ => return Err(bad("truth flag must be 0 or 1")),
    };
    if tok.next().is_some() {
        return Err(bad("trailing tokens"));
    }
    Ok(Header { n, d, c, truth })
}

fn parse_text(text: &str) -> Result<FeatureTable, DatasetError> {
    let mut lines = text.lines();
    let header = parse_header(lines.next().unwrap_or(""))?;
    let Header { n, d, c, truth } = header;
    let width = 2 + d + usize::from(truth);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(if truth { n } else { 0 });
    let mut row = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        if row == n {
            return Err(DatasetError::MalformedHeader(format!(
                "header says n={n} but more rows follow"
            )));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            let found = fields.len() as i64 - 2 - i64::from(truth);
            return Err(DatasetError::DimensionMismatch(format!(
                "row {row}: expected {d} feature values, found {found}"
            )));
        }
        let malformed = |detail: String| DatasetError::MalformedRow { row, detail };
        fields[0]
            .trim()
            .parse::<u64>()
            .map_err(|_| malformed(format!("bad id {:?}", fields[0])))?;
        let label = fields[1]
            .trim()
            .parse::<i32>()
            .map_err(|_| malformed(format!("bad label {:?}", fields[1])))?;
        labels.push(label);
        for (col, f) in fields[2..2 + d].iter().enumerate() {
            let v = f
                .trim()
                .parse::<f32>()
                .map_err(|_| malformed(format!("bad float {f:?}")))?;
            if !v.is_finite() {
                return Err(DatasetError::NonFinite { row, col });
            }
            data.push(f64::from(v));
        }
        if truth {
            let t = fields[width - 1]
                .trim()
                .parse::<i32>()
                .map_err(|_| malformed(format!("bad truth {:?}", fields[width - 1])))?;
            truths.push(t);
        }
        row += 1;
    }
    if row != n {
        return Err(DatasetError::MalformedHeader(format!(
            "header says n={n} but found {row} rows"
        )));
    }
    Ok(FeatureTable {
        features: Matrix::from_vec(n, d, data).expect("sized"),
        labels,
        truth: truth.then_some(truths),
        c,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DatasetError::MalformedHeader("binary table truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, DatasetError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn parse_binary(bytes: &[u8]) -> Result<FeatureTable, DatasetError> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.take(BINARY_MAGIC.len())?;
    let n = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let c = cur.u32()? as usize;
    let truth = match cur.take(1)?[0] {
        0 => false,
        1 => true,
        f => return Err(DatasetError::MalformedHeader(format!("truth flag {f}"))),
    };
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .and_then(|b| b.checked_add(n * 4 * (1 + usize::from(truth))));
    if expected != Some(bytes.len() - cur.pos) {
        return Err(DatasetError::MalformedHeader(format!(
            "binary payload is {} bytes, header n={n} d={d} truth={} implies {:?}",
            bytes.len() - cur.pos,
            u8::from(truth),
            expected
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in cur.take(n * d * 4)?.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DatasetError::NonFinite {
                row: i / d,
                col: i % d,
            });
        }
        data.push(f64::from(v));
    }
    let labels = (0..n).map(|_| cur.i32()).collect::<Result<Vec<_>, _>>()?;
    let truths = if truth {
        Some((0..n).map(|_| cur.i32()).collect::<Result<Vec<_>, _>>()?)
    } else {
        None
    };
    Ok(FeatureTable {
        features: Matrix::from_vec(n, d, data).expect("sized"),
        labels,
        truth: truths,
        c,
    })
}
