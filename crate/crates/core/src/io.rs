//! Plain-text persistence: numeric CSV at 17 significant digits, index lists,
//! and atomic file replacement.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Formats like C's `%.17g`, which round-trips every finite double.
pub fn fmt_g17(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Writes `contents` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// CSV with a header row; each matrix row becomes one line.
pub fn matrix_to_csv(header: &[String], m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 24 + 64);
    out.push_str(&header.join(","));
    out.push('\n');
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| fmt_g17(m[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(Error::dim("csv header", m.ncols(), header.len()));
    }
    write_atomic(path, &matrix_to_csv(header, m))
}

/// Reads a numeric CSV with one header line. Returns the header and the rows.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let file = path.display().to_string();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse {
            file: file.clone(),
            reason: "empty file".into(),
        })?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (ln, line) in lines.enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != header.len() {
            return Err(Error::Parse {
                file,
                reason: format!("row {} has {} fields, header has {}", ln + 1, vals.len(), header.len()),
            });
        }
        for v in vals {
            data.push(v.trim().parse::<f64>().map_err(|e| Error::Parse {
                file: file.clone(),
                reason: format!("row {}: {e}", ln + 1),
            })?);
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &data)))
}

/// Headerless matrix CSV (used for bases, one matrix row per line).
pub fn write_plain_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = (0..m.ncols()).map(|c| format!("col_{c}")).collect();
    write_matrix_csv(path, &header, m)
}

pub fn write_indices(path: &Path, idx: &[usize]) -> Result<()> {
    let mut s = String::new();
    for i in idx {
        s.push_str(&i.to_string());
        s.push('\n');
    }
    write_atomic(path, &s)
}

pub fn read_indices(path: &Path) -> Result<Vec<usize>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim().parse::<usize>().map_err(|e| Error::Parse {
                file: path.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn g17_matches_c_style() {
        assert_eq!(fmt_g17(1.0), "1");
        assert_eq!(fmt_g17(0.1), "0.10000000000000001");
        assert_eq!(fmt_g17(-2.5e-7), "-2.4999999999999999e-07");
        assert_eq!(fmt_g17(1e20), "1e+20");
        assert_eq!(fmt_g17(123456.0), "123456");
        assert_eq!(fmt_g17(0.0), "0");
    }

    #[test]
    fn csv_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -0.1, 3e-300, 1e300, 2.0 / 3.0, -0.0]);
        let p = dir.path().join("m.csv");
        let header: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        write_matrix_csv(&p, &header, &m).unwrap();
        let (h, back) = read_matrix_csv(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(back, m);
        let idx = vec![3, 1, 4, 1, 5];
        let q = dir.path().join("i.txt");
        write_indices(&q, &idx).unwrap();
        assert_eq!(read_indices(&q).unwrap(), idx);
        assert!(matches!(read_indices(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }

    proptest! {
        #[test]
        fn g17_round_trips(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let back: f64 = fmt_g17(x).parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
