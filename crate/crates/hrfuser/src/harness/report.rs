//! Result tables: a fixed-width text rendering and a CSV form that
//! round-trips through its own reader.

use std::io::BufRead;

use crate::detection::EvalResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub result: EvalResult,
    pub params: usize,
    pub flops: u64,
}

/// Fixed-width table with AP columns, efficiency columns and a Δap50
/// column relative to the first row.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>12} {:>12}\n",
        "config", "AP", "AP50", "AP75", "APm", "APl", "AR", "dAP50", "params", "flops"
    ));
    let base = rows.first().map(|r| r.result.ap50).unwrap_or(0.0);
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>+8.4} {:>12} {:>12}\n",
            r.label,
            r.result.ap,
            r.result.ap50,
            r.result.ap75,
            r.result.ap_medium,
            r.result.ap_large,
            r.result.ar,
            r.result.ap50 - base,
            r.params,
            r.flops
        ));
    }
    out
}

pub fn write_csv<W: std::io::Write>(mut w: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(w, "label,ap,ap50,ap75,ap_m,ap_l,ar,params,flops")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.label,
            r.result.ap,
            r.result.ap50,
            r.result.ap75,
            r.result.ap_medium,
            r.result.ap_large,
            r.result.ar,
            r.params,
            r.flops
        )?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("csv line {}: expected 9 fields", i + 1)));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("csv line {}: bad number '{s}'", i + 1)))
        };
        rows.push(ReportRow {
            label: f[0].to_string(),
            result: EvalResult {
                ap: num(f[1])?,
                ap50: num(f[2])?,
                ap75: num(f[3])?,
                ap_medium: num(f[4])?,
                ap_large: num(f[5])?,
                ar: num(f[6])?,
            },
            params: f[7]
                .parse()
                .map_err(|_| Error::Format(format!("csv line {}: bad params", i + 1)))?,
            flops: f[8]
                .parse()
                .map_err(|_| Error::Format(format!("csv line {}: bad flops", i + 1)))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, ap50: f64) -> ReportRow {
        ReportRow {
            label: label.into(),
            result: EvalResult {
                ap: ap50 * 0.6,
                ap50,
                ap75: ap50 * 0.5,
                ap_medium: ap50 * 0.4,
                ap_large: ap50 * 0.7,
                ar: ap50 * 0.8,
            },
            params: 12345,
            flops: 6789,
        }
    }

    #[test]
    fn table_includes_delta_against_first_row() {
        let table = render_table(&[row("camera_only", 0.4), row("fusion", 0.62)]);
        assert!(table.contains("dAP50"));
        assert!(table.contains("+0.2200"));
    }

    #[test]
    fn csv_roundtrip() {
        let rows = vec![row("a", 0.25), row("b", 0.5)];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let back = read_csv(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back, rows);
    }
}
