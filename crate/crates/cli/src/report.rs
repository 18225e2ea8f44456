//! Aggregation of per-run `report.csv` files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tstcc::Error;

use crate::percent;

/// Columns of the aggregated table; statistics are percentages.
pub const SUMMARY_COLUMNS: [&str; 7] = [
    "protocol",
    "labels_fraction",
    "runs",
    "accuracy_mean",
    "accuracy_std",
    "mf1_mean",
    "mf1_std",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub protocol: String,
    pub labels_fraction: String,
    pub accuracy: f64,
    pub mf1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub protocol: String,
    pub labels_fraction: String,
    pub runs: usize,
    pub accuracy: (f64, f64),
    pub mf1: (f64, f64),
}

/// Mean and population standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(rows: &[RunRow], group: bool) -> Result<Vec<Summary>, Error> {
    if rows.is_empty() {
        return Err(Error::Data("no runs to aggregate".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.protocol.clone(), r.labels_fraction.clone())).or_default().push(r);
    }
    let protocols: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.protocol.as_str()).collect();
    if protocols.len() > 1 && !group {
        return Err(Error::Config(format!(
            "runs mix protocols {protocols:?}; pass --group to aggregate per protocol"
        )));
    }
    Ok(groups
        .into_iter()
        .map(|((protocol, labels_fraction), rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let mf1: Vec<f64> = rs.iter().map(|r| r.mf1).collect();
            Summary {
                protocol,
                labels_fraction,
                runs: rs.len(),
                accuracy: mean_std(&acc),
                mf1: mean_std(&mf1),
            }
        })
        .collect())
}

fn read_rows(dir: &Path) -> Result<Vec<RunRow>> {
    let path = if dir.is_dir() { dir.join("report.csv") } else { dir.to_path_buf() };
    let mut rdr = csv::Reader::from_path(&path)
        .map_err(|e| Error::Data(e.to_string()))
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let (p, f, a, m) = (col("protocol")?, col("labels_fraction")?, col("accuracy")?, col("mf1")?);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let num = |i: usize| -> Result<f64, Error> {
            rec[i]
                .parse()
                .map_err(|_| Error::Data(format!("{}: not a number: {:?}", path.display(), &rec[i])))
        };
        rows.push(RunRow {
            protocol: rec[p].to_string(),
            labels_fraction: rec[f].to_string(),
            accuracy: num(a)?,
            mf1: num(m)?,
        });
    }
    Ok(rows)
}

pub fn write_summary<W: Write>(w: W, rows: &[Summary]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(SUMMARY_COLUMNS)?;
    for s in rows {
        out.write_record([
            s.protocol.clone(),
            s.labels_fraction.clone(),
            s.runs.to_string(),
            percent(s.accuracy.0),
            percent(s.accuracy.1),
            percent(s.mf1.0),
            percent(s.mf1.1),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_report(dirs: &[PathBuf], group: bool, output: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for d in dirs {
        rows.extend(read_rows(d)?);
    }
    let summary = aggregate(&rows, group)?;
    match output {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(Error::Io)?;
            write_summary(f, &summary)
        }
        None => write_summary(std::io::stdout().lock(), &summary),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: &str, f: &str, acc: f64, mf1: f64) -> RunRow {
        RunRow {
            protocol: p.into(),
            labels_fraction: f.into(),
            accuracy: acc,
            mf1,
        }
    }

    #[test]
    fn single_run_has_zero_std() {
        let s = aggregate(&[row("tstcc", "0.01", 0.8, 0.75)], false).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].accuracy, (0.8, 0.0));
        assert_eq!(s[0].runs, 1);
    }

    #[test]
    fn population_std_over_seeds() {
        let rows: Vec<RunRow> = [0.5, 0.7, 0.9, 0.6, 0.8].iter().map(|&v| row("catcc", "0.1", v, v)).collect();
        let s = aggregate(&rows, false).unwrap();
        assert!((s[0].mf1.0 - 0.7).abs() < 1e-12);
        assert!((s[0].mf1.1 - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mixed_protocols_need_group() {
        let rows = [row("tstcc", "0.01", 0.8, 0.8), row("supervised", "0.01", 0.5, 0.5)];
        assert!(matches!(aggregate(&rows, false), Err(Error::Config(_))));
        let s = aggregate(&rows, true).unwrap();
        assert_eq!(s.iter().map(|s| s.protocol.as_str()).collect::<Vec<_>>(), ["supervised", "tstcc"]);
    }
}
