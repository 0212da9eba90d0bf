//! Byte-stable text output.

use std::io::Write;

use crate::error::Result;
use crate::kernels::SupportSet;

/// 17 significant digits; round-trips every finite f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn escape(field: &str) -> std::borrow::Cow<'_, str> {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\"")).into()
    } else {
        field.into()
    }
}

pub fn write_csv_row<W: Write>(w: &mut W, fields: &[String]) -> Result<()> {
    let escaped: Vec<_> = fields.iter().map(|f| escape(f)).collect();
    writeln!(w, "{}", escaped.join(","))?;
    Ok(())
}

pub fn write_matrix_csv<W: Write>(w: &mut W, columns: &[String], rows: &SupportSet) -> Result<()> {
    write_csv_row(w, columns)?;
    for r in rows.rows() {
        let fields: Vec<String> = r.iter().map(|v| fmt_f64(*v)).collect();
        write_csv_row(w, &fields)?;
    }
    Ok(())
}

pub fn matrix_csv(columns: &[String], rows: &SupportSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, columns, rows)?;
    Ok(buf)
}

pub fn default_columns(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|j| format!("{prefix}{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn matrix_layout() {
        let s = SupportSet::new(vec![1.0, 2.0], 1, 2).unwrap();
        let text = String::from_utf8(matrix_csv(&default_columns("x", 2), &s).unwrap()).unwrap();
        assert_eq!(text, "x0,x1\n1.0000000000000000e0,2.0000000000000000e0\n");
    }
}
