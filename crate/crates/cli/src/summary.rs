//! Mean ± sample standard deviation per (setting, iters) group of report
//! rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

pub const METRICS: [&str; 4] = ["mean_dsc", "mean_assd", "neg_jac_frac", "seconds"];

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub setting: String,
    pub iters: usize,
    /// Metric values in [`METRICS`] order; `None` when the cell is empty.
    pub values: [Option<f64>; 4],
}

pub fn read_report_csv(path: &Path, setting: &str) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).with_context(|| format!("{}: no column {name}", path.display()));
    let iters_col = col("iters")?;
    let cols: Vec<usize> = METRICS.iter().map(|m| col(m)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<Option<f64>> {
            let cell = rec.get(i).unwrap_or("").trim();
            if cell.is_empty() {
                Ok(None)
            } else {
                Ok(Some(cell.parse().with_context(|| format!("bad number {cell:?}"))?))
            }
        };
        rows.push(Row {
            setting: setting.to_string(),
            iters: rec.get(iters_col).unwrap_or("").trim().parse().context("bad iters")?,
            values: [parse(cols[0])?, parse(cols[1])?, parse(cols[2])?, parse(cols[3])?],
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

fn stat(values: &[f64]) -> Option<Stat> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Some(Stat { n, mean, std })
}

pub type Summary = BTreeMap<(String, usize), [Option<Stat>; 4]>;

pub fn summarize(rows: &[Row]) -> Summary {
    let mut groups: BTreeMap<(String, usize), [Vec<f64>; 4]> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.setting.clone(), r.iters)).or_default();
        for (dst, v) in g.iter_mut().zip(r.values) {
            dst.extend(v);
        }
    }
    groups.into_iter().map(|(k, v)| (k, [stat(&v[0]), stat(&v[1]), stat(&v[2]), stat(&v[3])])).collect()
}

pub fn write_summary(s: &Summary, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["setting".to_string(), "iters".to_string(), "n".to_string()];
    for m in METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for ((setting, iters), stats) in s {
        let n = stats.iter().flatten().map(|s| s.n).max().unwrap_or(0);
        let mut rec = vec![setting.clone(), iters.to_string(), n.to_string()];
        for st in stats {
            match st {
                Some(st) => {
                    rec.push(st.mean.to_string());
                    rec.push(st.std.to_string());
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Table 1 style text rendering.
pub fn render(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>5}  {:>16}  {:>16}  {:>18}  {:>14}", "setting", "iters", "DSC", "ASSD", "%|J|<=0", "seconds");
    let cell = |st: &Option<Stat>, scale: f64| st.map_or("-".to_string(), |s| format!("{:.3}±{:.3}", s.mean * scale, s.std * scale));
    for ((setting, iters), st) in s {
        let _ = writeln!(
            out,
            "{setting:<16} {iters:>5}  {:>16}  {:>16}  {:>18}  {:>14}",
            cell(&st[0], 1.0),
            cell(&st[1], 1.0),
            cell(&st[2], 100.0),
            cell(&st[3], 1.0)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(setting: &str, iters: usize, dsc: Option<f64>) -> Row {
        Row { setting: setting.into(), iters, values: [dsc, None, Some(0.0), Some(1.0)] }
    }

    #[test]
    fn groups_and_sample_std() {
        let rows = vec![row("a", 0, Some(1.0)), row("a", 0, Some(3.0)), row("a", 5, Some(2.0)), row("b", 0, None)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 3);
        let a0 = s[&("a".to_string(), 0)][0].unwrap();
        assert_eq!((a0.n, a0.mean), (2, 2.0));
        assert!((a0.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[&("a".to_string(), 5)][0].unwrap().std, 0.0);
        assert!(s[&("b".to_string(), 0)][0].is_none());
    }
}
