//! Per-run summary rows and their aggregation into one table.

use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "trigger,acc,log10_p,wsr";
pub const TABLE_HEADER: &str = "trigger,runs,acc,log10_p,wsr";

/// One verified run: benign accuracy of the suspect model and the
/// verification outcome through one trigger set.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub trigger: String,
    pub acc: f64,
    pub log10_p: f64,
    pub wsr: f64,
}

impl SummaryRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6}",
            self.trigger, self.acc, self.log10_p, self.wsr
        )
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let csv_err = |line: u64, msg: String| CliError::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != SUMMARY_HEADER {
        return Err(csv_err(
            1,
            format!("header `{header}`, expected `{SUMMARY_HEADER}`"),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| {
            rec[i].trim().parse::<f64>().map_err(|_| {
                csv_err(
                    line,
                    format!("field {} `{}` is not a number", i + 1, &rec[i]),
                )
            })
        };
        rows.push(SummaryRow {
            trigger: rec[0].to_owned(),
            acc: num(1)?,
            log10_p: num(2)?,
            wsr: num(3)?,
        });
    }
    Ok(rows)
}

/// Every summary file below `dir`, in sorted path order.
pub fn find_summaries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| CliError::io(&d, e))?;
        for entry in entries {
            let p = entry.map_err(|e| CliError::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == SUMMARY_FILE) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Means over all runs sharing a trigger label.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub trigger: String,
    pub runs: usize,
    pub acc: f64,
    pub log10_p: f64,
    pub wsr: f64,
}

/// Groups rows by trigger label in order of first appearance.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<TableRow> {
    let mut table: Vec<TableRow> = Vec::new();
    for r in rows {
        match table.iter_mut().find(|t| t.trigger == r.trigger) {
            Some(t) => {
                t.runs += 1;
                t.acc += r.acc;
                t.log10_p += r.log10_p;
                t.wsr += r.wsr;
            }
            None => table.push(TableRow {
                trigger: r.trigger.clone(),
                runs: 1,
                acc: r.acc,
                log10_p: r.log10_p,
                wsr: r.wsr,
            }),
        }
    }
    for t in &mut table {
        let n = t.runs as f64;
        t.acc /= n;
        t.log10_p /= n;
        t.wsr /= n;
    }
    table
}

pub fn table_csv(table: &[TableRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for t in table {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            t.trigger, t.runs, t.acc, t.log10_p, t.wsr
        ));
    }
    s
}

pub fn table_text(table: &[TableRow]) -> String {
    let w = table
        .iter()
        .map(|t| t.trigger.len())
        .chain([7])
        .max()
        .unwrap_or(7);
    let mut s = format!(
        "{:<w$}  {:>4}  {:>8}  {:>10}  {:>6}\n",
        "trigger", "runs", "acc", "log10_p", "WSR"
    );
    for t in table {
        s.push_str(&format!(
            "{:<w$}  {:>4}  {:>8.4}  {:>10.2}  {:>6.3}\n",
            t.trigger, t.runs, t.acc, t.log10_p, t.wsr
        ));
    }
    s
}

pub fn report(dir: &Path) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for p in find_summaries(dir)? {
        rows.extend(read_summary(&p)?);
    }
    Ok(aggregate(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(trigger: &str, wsr: f64) -> SummaryRow {
        SummaryRow {
            trigger: trigger.into(),
            acc: 0.9,
            log10_p: -10.0,
            wsr,
        }
    }

    #[test]
    fn groups_in_first_seen_order() {
        let t = aggregate(&[
            row("owner", 1.0),
            row("independent", 0.5),
            row("owner", 0.5),
        ]);
        assert_eq!(t.len(), 2);
        assert_eq!(
            (t[0].trigger.as_str(), t[0].runs, t[0].wsr),
            ("owner", 2, 0.75)
        );
        assert_eq!((t[1].trigger.as_str(), t[1].runs), ("independent", 1));
    }

    #[test]
    fn empty_table_keeps_header() {
        assert_eq!(table_csv(&aggregate(&[])), format!("{TABLE_HEADER}\n"));
    }
}
