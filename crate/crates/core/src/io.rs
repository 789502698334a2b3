//! Shared CSV plumbing.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! value read back is bit-identical to the one written.

use std::io::{Read, Write};
use std::str::FromStr;

use crate::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn writer<W: Write>(w: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(header)?;
    Ok(out)
}

/// Opens a CSV reader and checks that the header matches `expected` exactly.
pub fn reader<R: Read>(r: R, expected: &[&str]) -> Result<csv::Reader<R>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::InvalidData(format!(
            "unexpected CSV header {:?}, wanted {:?}",
            header.iter().collect::<Vec<_>>(),
            expected
        )));
    }
    Ok(rdr)
}

pub fn field<T: FromStr>(record: &csv::StringRecord, idx: usize, name: &str) -> Result<T> {
    let raw = record
        .get(idx)
        .ok_or_else(|| Error::InvalidData(format!("missing column {name}")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::InvalidData(format!("column {name}: cannot parse {raw:?}")))
}

pub fn fmt_bool(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn parse_bool(record: &csv::StringRecord, idx: usize, name: &str) -> Result<bool> {
    match record.get(idx).map(str::trim) {
        Some("1") | Some("true") => Ok(true),
        Some("0") | Some("false") => Ok(false),
        other => Err(Error::InvalidData(format!("column {name}: not a boolean: {other:?}"))),
    }
}
