//! Plain-text and CSV serialization helpers.
//!
//! All floats in data interchange are printed with 9 significant digits
//! so that identical runs produce byte-identical files.

use std::io::Write;

/// Format a float with 9 significant digits (scientific notation).
pub fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

/// Write a CSV header plus rows of pre-formatted cells.
pub fn write_csv<W: Write>(
    out: &mut W,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> std::io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Read a simple numeric CSV with a header row. Returns (header, rows).
pub fn read_csv(text: &str) -> crate::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| crate::Error::Parse { what: "empty CSV".into() })?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut row = Vec::new();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| crate::Error::Parse {
                what: format!("line {}: bad number `{}`", lineno + 2, cell.trim()),
            })?;
            row.push(v);
        }
        if row.len() != header.len() {
            return Err(crate::Error::Parse {
                what: format!("line {}: expected {} columns, got {}", lineno + 2, header.len(), row.len()),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_is_nine_significant_digits() {
        assert_eq!(fmt_float(1.0), "1.00000000e0");
        assert_eq!(fmt_float(0.5), "5.00000000e-1");
        assert_eq!(fmt_float(-123.456), "-1.23456000e2");
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_csv(
            &mut buf,
            &["t", "v"],
            vec![vec![fmt_float(0.0), fmt_float(1.5)], vec![fmt_float(0.1), fmt_float(2.5)]]
                .into_iter(),
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let (header, rows) = read_csv(&text).unwrap();
        assert_eq!(header, vec!["t", "v"]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1][1], 2.5);
    }
}
