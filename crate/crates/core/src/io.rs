//! Text formats.
//!
//! `SMF1` (sparse integer): header `SMF1 <rows> <cols> <nnz>`, then one
//! `<row> <col> <value>` line per entry, 0-indexed, sorted by column then row.
//!
//! `DMF1` (dense): header `DMF1 <rows> <cols>`, then one line per row of
//! whitespace-separated values printed with 17 significant digits.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::matrix::{DenseMatrix, MatrixError, SparseIntMatrix};

pub const SPARSE_MAGIC: &str = "SMF1";
pub const DENSE_MAGIC: &str = "DMF1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

fn parse_err(line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Parse { line, msg: msg.into() }
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, FormatError> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| parse_err(line, format!("invalid {what} {tok:?}")))
}

pub fn write_sparse<W: Write>(m: &SparseIntMatrix, mut w: W) -> io::Result<()> {
    writeln!(w, "{SPARSE_MAGIC} {} {} {}", m.rows(), m.cols(), m.nnz())?;
    for (r, c, v) in m.triplets() {
        writeln!(w, "{r} {c} {v}")?;
    }
    w.flush()
}

/// Writes `(row, col, value)` triplets verbatim under an SMF1 header. The
/// caller is responsible for ordering.
pub fn write_sparse_triplets<W: Write>(
    rows: usize,
    cols: usize,
    entries: &[(usize, usize, i64)],
    mut w: W,
) -> io::Result<()> {
    writeln!(w, "{SPARSE_MAGIC} {rows} {cols} {}", entries.len())?;
    for (r, c, v) in entries {
        writeln!(w, "{r} {c} {v}")?;
    }
    w.flush()
}

pub fn read_sparse<R: Read>(r: R) -> Result<SparseIntMatrix, FormatError> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty input"))??;
    let mut tok = header.split_whitespace();
    if tok.next() != Some(SPARSE_MAGIC) {
        return Err(parse_err(1, format!("expected {SPARSE_MAGIC} header")));
    }
    let rows: usize = parse_field(tok.next(), 1, "row count")?;
    let cols: usize = parse_field(tok.next(), 1, "column count")?;
    let nnz: usize = parse_field(tok.next(), 1, "entry count")?;
    let mut triplets = Vec::with_capacity(nnz);
    let mut prev: Option<(usize, usize)> = None;
    for k in 0..nnz {
        let lineno = k + 2;
        let line = lines.next().ok_or_else(|| parse_err(lineno, "truncated entry list"))??;
        let mut tok = line.split_whitespace();
        let r: usize = parse_field(tok.next(), lineno, "row")?;
        let c: usize = parse_field(tok.next(), lineno, "column")?;
        let v: i64 = parse_field(tok.next(), lineno, "value")?;
        if v == 0 {
            return Err(parse_err(lineno, "explicit zero entry"));
        }
        if let Some(p) = prev {
            if (c, r) <= p {
                return Err(parse_err(lineno, "entries not sorted by column then row"));
            }
        }
        prev = Some((c, r));
        triplets.push((r, c, v));
    }
    for (k, rest) in lines.enumerate() {
        if !rest?.trim().is_empty() {
            return Err(parse_err(nnz + 2 + k, "trailing data"));
        }
    }
    Ok(SparseIntMatrix::from_triplets(rows, cols, triplets)?)
}

pub fn write_dense<W: Write>(m: &DenseMatrix, mut w: W) -> io::Result<()> {
    writeln!(w, "{DENSE_MAGIC} {} {}", m.rows(), m.cols())?;
    let mut line = String::new();
    for i in 0..m.rows() {
        line.clear();
        for (k, v) in m.row(i).iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{v:.16e}"));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn read_dense<R: Read>(r: R) -> Result<DenseMatrix, FormatError> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty input"))??;
    let mut tok = header.split_whitespace();
    if tok.next() != Some(DENSE_MAGIC) {
        return Err(parse_err(1, format!("expected {DENSE_MAGIC} header")));
    }
    let rows: usize = parse_field(tok.next(), 1, "row count")?;
    let cols: usize = parse_field(tok.next(), 1, "column count")?;
    let mut values = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let lineno = i + 2;
        let line = lines.next().ok_or_else(|| parse_err(lineno, "truncated matrix"))??;
        let before = values.len();
        for t in line.split_whitespace() {
            let v: f64 = parse_field(Some(t), lineno, "value")?;
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(parse_err(lineno, format!("expected {cols} values")));
        }
    }
    Ok(DenseMatrix::from_row_major(rows, cols, values)?)
}

pub fn save_sparse(m: &SparseIntMatrix, path: impl AsRef<Path>) -> io::Result<()> {
    write_sparse(m, BufWriter::new(fs::File::create(path)?))
}

pub fn load_sparse(path: impl AsRef<Path>) -> Result<SparseIntMatrix, FormatError> {
    read_sparse(fs::File::open(path)?)
}

pub fn save_dense(m: &DenseMatrix, path: impl AsRef<Path>) -> io::Result<()> {
    write_dense(m, BufWriter::new(fs::File::create(path)?))
}

pub fn load_dense(path: impl AsRef<Path>) -> Result<DenseMatrix, FormatError> {
    read_dense(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sparse_layout_is_exact() {
        let m = SparseIntMatrix::from_triplets(3, 2, [(2, 0, -1), (0, 1, 3), (0, 0, 2)]).unwrap();
        let mut buf = Vec::new();
        write_sparse(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "SMF1 3 2 3\n0 0 2\n2 0 -1\n0 1 3\n");
    }

    #[test]
    fn dense_layout_uses_17_significant_digits() {
        let m = DenseMatrix::from_row_major(1, 2, vec![0.1, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_dense(&m, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "DMF1 1 2\n1.0000000000000001e-1 -2.0000000000000000e0\n"
        );
    }

    #[test]
    fn rejects_malformed_sparse() {
        assert!(read_sparse("SMF2 1 1 0\n".as_bytes()).is_err());
        assert!(read_sparse("SMF1 2 2 1\n".as_bytes()).is_err());
        assert!(read_sparse("SMF1 2 2 1\n0 0 0\n".as_bytes()).is_err());
        assert!(read_sparse("SMF1 2 2 2\n0 1 1\n0 0 1\n".as_bytes()).is_err());
        assert!(read_sparse("SMF1 2 2 1\n5 0 1\n".as_bytes()).is_err());
        assert!(read_sparse("SMF1 2 2 1\n0 0 1\n1 1 1\n".as_bytes()).is_err());
    }

    #[test]
    fn rejects_malformed_dense() {
        assert!(read_dense("DMF1 2 2\n1 2\n".as_bytes()).is_err());
        assert!(read_dense("DMF1 1 2\n1 2 3\n".as_bytes()).is_err());
        assert!(read_dense("DMF1 1 1\nabc\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn sparse_round_trip(entries in proptest::collection::btree_map((0usize..6, 0usize..5), -4i64..5, 0..20)) {
            let m = SparseIntMatrix::from_triplets(6, 5, entries.into_iter().map(|((r, c), v)| (r, c, v))).unwrap();
            let mut buf = Vec::new();
            write_sparse(&m, &mut buf).unwrap();
            prop_assert_eq!(read_sparse(buf.as_slice()).unwrap(), m);
        }

        #[test]
        fn dense_round_trip_is_bit_exact(vals in proptest::collection::vec(-1e300f64..1e300, 6)) {
            let m = DenseMatrix::from_row_major(2, 3, vals).unwrap();
            let mut buf = Vec::new();
            write_dense(&m, &mut buf).unwrap();
            let back = read_dense(buf.as_slice()).unwrap();
            for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
