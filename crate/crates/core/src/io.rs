//! CSV reading and writing.
//!
//! Dataset files have the header `id,time,event,x1,..,x{p-1},z1,..,z{q-1}`
//! with `event` in `{0, 1}`. Every real is written in the shortest decimal
//! form that parses back to the same `f64`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{CovariatePair, SubjectRecord};

/// Round-trip decimal form of a real; non-finite values are written `nan`, `inf`, `-inf`.
pub fn real(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:?}")
    }
}

pub fn dataset_header(p: usize, q: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "time".to_string(), "event".to_string()];
    h.extend((1..p).map(|j| format!("x{j}")));
    h.extend((1..q).map(|j| format!("z{j}")));
    h
}

pub fn write_dataset<W: Write>(out: W, records: &[SubjectRecord]) -> Result<()> {
    let (p, q) = records
        .first()
        .map(|r| (r.covariates.p(), r.covariates.q()))
        .unwrap_or((1, 1));
    let mut w = BufWriter::new(out);
    writeln!(w, "{}", dataset_header(p, q).join(","))?;
    for (i, r) in records.iter().enumerate() {
        write!(w, "{},{},{}", i + 1, real(r.time), u8::from(r.event))?;
        for v in r.covariates.x().iter().skip(1).chain(r.covariates.z().iter().skip(1)) {
            write!(w, ",{}", real(*v))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, records: &[SubjectRecord]) -> Result<()> {
    write_dataset(File::create(path)?, records)
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Reads a dataset; malformed rows are reported with their line number.
pub fn read_dataset<R: Read>(input: R) -> Result<Vec<SubjectRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| parse_error(1, e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    let p = 1 + names.iter().filter(|n| n.starts_with('x')).count();
    let q = 1 + names.iter().filter(|n| n.starts_with('z')).count();
    let expected = dataset_header(p, q);
    if names != expected {
        return Err(parse_error(
            1,
            format!("expected header {:?}, found {:?}", expected.join(","), names.join(",")),
        ));
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |k: usize| -> Result<f64> {
            let s = &row[k];
            s.parse::<f64>()
                .map_err(|_| parse_error(line, format!("column {:?}: cannot parse {s:?}", expected[k])))
        };
        let time = field(1)?;
        let event = match &row[2] {
            "0" => false,
            "1" => true,
            other => return Err(parse_error(line, format!("event must be 0 or 1, found {other:?}"))),
        };
        let x: Vec<f64> = (3..2 + p).map(&field).collect::<Result<_>>()?;
        let z: Vec<f64> = (2 + p..1 + p + q).map(&field).collect::<Result<_>>()?;
        let record = CovariatePair::from_columns(&x, &z)
            .and_then(|cov| SubjectRecord::new(time, event, cov))
            .map_err(|e| parse_error(line, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_dataset(path: &Path) -> Result<Vec<SubjectRecord>> {
    read_dataset(File::open(path)?)
}

/// Curve file `time,B0,..,B{q-1},se_B0,..,se_B{q-1}`.
pub fn write_curve(
    path: &Path,
    times: &[f64],
    values: &[DVector<f64>],
    se: &[DVector<f64>],
) -> Result<()> {
    let q = values.first().map_or(0, |v| v.len());
    let mut w = BufWriter::new(File::create(path)?);
    let mut head = vec!["time".to_string()];
    head.extend((0..q).map(|l| format!("B{l}")));
    head.extend((0..q).map(|l| format!("se_B{l}")));
    writeln!(w, "{}", head.join(","))?;
    for ((t, v), s) in times.iter().zip(values).zip(se) {
        let cells: Vec<String> = std::iter::once(*t)
            .chain(v.iter().copied())
            .chain(s.iter().copied())
            .map(real)
            .collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Variance file `time,V_0_0,V_0_1,..` with row-major entries of each matrix.
pub fn write_variance(path: &Path, times: &[f64], matrices: &[DMatrix<f64>]) -> Result<()> {
    let q = matrices.first().map_or(0, |m| m.nrows());
    let mut w = BufWriter::new(File::create(path)?);
    let mut head = vec!["time".to_string()];
    for a in 0..q {
        head.extend((0..q).map(|b| format!("V_{a}_{b}")));
    }
    writeln!(w, "{}", head.join(","))?;
    for (t, m) in times.iter().zip(matrices) {
        let mut cells = vec![real(*t)];
        for a in 0..q {
            cells.extend((0..q).map(|b| real(m[(a, b)])));
        }
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Incidence file `index,estimate,se`.
pub fn write_gamma(path: &Path, estimate: &DVector<f64>, se: &DVector<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "index,estimate,se")?;
    for (i, (e, s)) in estimate.iter().zip(se.iter()).enumerate() {
        writeln!(w, "{i},{},{}", real(*e), real(*s))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `key = value` lines, a subset of TOML.
pub fn write_report(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (k, v) in entries {
        writeln!(w, "{k} = {v}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(t: f64, e: bool, x: f64, z: f64) -> SubjectRecord {
        SubjectRecord::new(t, e, CovariatePair::from_columns(&[x], &[z]).unwrap()).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let data = vec![
            record(0.1 + 0.2, true, -1.0 / 3.0, 1e-300),
            record(1.75, false, 2.5, -0.0),
        ];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,time,event,x1,z1\n"));
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn intercept_only_header() {
        let text = "id,time,event\n1,1.0,1\n2,2.0,0\n";
        let data = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].covariates.p(), 1);
        assert_eq!(data[1].covariates.q(), 1);
    }

    fn parse_line(text: &str) -> u64 {
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_name_their_line() {
        assert_eq!(parse_line("id,time,event,x1\n1,1.0,1,0.5\n2,abc,1,0.5\n"), 3);
        assert_eq!(parse_line("id,time,event\n1,1.0,1\n2,1.0,2\n"), 3);
        assert_eq!(parse_line("id,time,event\n1,1.0,1\n2,1.0\n"), 3);
        assert_eq!(parse_line("id,time,event\n1,-1.0,1\n"), 2);
        assert_eq!(parse_line("id,t,event\n"), 1);
    }

    #[test]
    fn reals_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-310, -2.5e17, 0.0] {
            assert_eq!(real(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(real(f64::NAN), "nan");
        assert!(real(f64::NAN).parse::<f64>().unwrap().is_nan());
        assert_eq!(real(f64::NEG_INFINITY).parse::<f64>().unwrap(), f64::NEG_INFINITY);
    }
}
