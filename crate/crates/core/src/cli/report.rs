//! `report`: long-format plot files and the acceptance table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{Command, ExperimentConfig};
use super::{file_name, sha256_hex, Artifacts, RunError, RunSummary};
use crate::error::{io_err, Error, Result};
use crate::metrics::pearson;

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub kappa: Option<f64>,
    pub metric: String,
    pub x: f64,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: msg.to_string(),
        };
        if rec.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |j: usize| rec[j].parse::<f64>().map_err(|_| bad("bad number"));
        out.push(SummaryRow {
            kappa: if rec[0].is_empty() { None } else { Some(num(0)?) },
            metric: rec[1].to_string(),
            x: num(2)?,
            mean: num(3)?,
            sd: num(4)?,
            count: rec[5].parse().map_err(|_| bad("bad count"))?,
        });
    }
    Ok(out)
}

/// The command recorded in a run's manifest.
pub fn read_command(manifest: &Path) -> Result<Command> {
    let mut rdr = csv::Reader::from_path(manifest)?;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.get(0) == Some("command") {
            if let Some(c) = rec.get(2).and_then(|v| v.parse().ok()) {
                return Ok(c);
            }
        }
    }
    Err(Error::Parse {
        path: manifest.to_path_buf(),
        line: 0,
        msg: "no command entry".into(),
    })
}

/// `series,x,y,y_sd`, one series per (metric, kappa).
pub fn long_format(rows: &[SummaryRow]) -> String {
    let mut out = String::from("series,x,y,y_sd\n");
    for r in rows {
        let series = match r.kappa {
            Some(k) => format!("{}@kappa={k}", r.metric),
            None => r.metric.clone(),
        };
        let _ = writeln!(out, "{series},{},{},{}", r.x, r.mean, r.sd);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub kappa: Option<f64>,
    pub value: Option<f64>,
    pub pass: Option<bool>,
}

impl Check {
    fn new(name: &str, kappa: Option<f64>, value: Option<f64>, pass: impl FnOnce(f64) -> bool) -> Check {
        Check {
            name: name.into(),
            kappa,
            value,
            pass: value.map(pass),
        }
    }

    fn verdict(&self) -> &'static str {
        match self.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "N/A",
        }
    }
}

fn scalar(rows: &[SummaryRow], metric: &str) -> BTreeMap<u64, (f64, f64)> {
    rows.iter()
        .filter(|r| r.metric == metric && r.x == 0.0)
        .filter_map(|r| r.kappa.map(|k| (k.to_bits(), (k, r.mean))))
        .collect()
}

fn sorted(m: &BTreeMap<u64, (f64, f64)>) -> Vec<(f64, f64)> {
    let mut v: Vec<_> = m.values().copied().collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Acceptance checks that apply to one run's summary.
pub fn checks(cmd: Command, rows: &[SummaryRow]) -> Vec<Check> {
    let mut out = Vec::new();
    match cmd {
        Command::Inlp => {
            for (k, v) in sorted(&scalar(rows, "final_main_acc")) {
                if k > 0.5 {
                    out.push(Check::new("inlp final main accuracy in [0.45, 0.55]", Some(k), Some(v), |v| (0.45..=0.55).contains(&v)));
                }
            }
            let change = scalar(rows, "max_acc_change");
            let flat = sorted(&change).into_iter().find(|(k, _)| *k == 0.5).map(|(_, v)| v);
            out.push(Check::new("kappa=0.5 flat line (accuracy change < 0.03)", Some(0.5), flat, |v| v < 0.03));
            let drops: Vec<(f64, f64)> = sorted(&scalar(rows, "final_main_acc"))
                .into_iter()
                .filter(|(k, _)| *k > 0.5)
                .map(|(k, _)| (k, scalar(rows, "first_drop_iter").get(&k.to_bits()).map_or(f64::INFINITY, |v| v.1)))
                .collect();
            if drops.len() >= 2 {
                let ok = drops.windows(2).all(|w| w[1].1 <= w[0].1);
                out.push(Check::new("first drop below 90% non-increasing in kappa", None, Some(f64::from(u8::from(ok))), |v| v == 1.0));
            }
            for (k, v) in sorted(&scalar(rows, "max_probe_spuriousness_first5")) {
                if k >= 0.8 {
                    out.push(Check::new("probe spuriousness > 0.5 within 5 iterations", Some(k), Some(v), |v| v > 0.5));
                }
            }
        }
        Command::Sweep => {
            let probe = scalar(rows, "best_probe_acc");
            for (k, v) in sorted(&probe) {
                if k >= 0.7 {
                    out.push(Check::new("best-lambda probe accuracy within kappa +- 0.05", Some(k), Some(v), |v| (v - k).abs() <= 0.05));
                }
            }
            for (k, v) in sorted(&scalar(rows, "best_spuriousness")) {
                if k >= 0.7 {
                    out.push(Check::new("best-lambda main spuriousness > 0.1", Some(k), Some(v), |v| v > 0.1));
                }
            }
            let psi = scalar(rows, "best_spuriousness");
            let dp = scalar(rows, "best_delta_prob");
            let pairs: Vec<(f64, f64)> = psi.iter().filter_map(|(k, (_, a))| dp.get(k).map(|(_, b)| (*a, *b))).collect();
            if pairs.len() >= 3 {
                let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let r = pearson(&xs, &ys).ok().flatten();
                out.push(Check::new("pearson(spuriousness, delta_prob) >= 0.7", None, r, |r| r >= 0.7));
            }
        }
        Command::Adv => {
            for (k, v) in sorted(&scalar(rows, "spuriousness_increase_hit")) {
                if k >= 0.7 {
                    out.push(Check::new("seeds with spuriousness rise >= 0.1 (need 2/3)", Some(k), Some(v), |v| v >= 2.0 / 3.0 - 1e-12));
                }
            }
        }
        Command::TheoryCheck => {
            let agree: Vec<&SummaryRow> = rows.iter().filter(|r| r.metric == "iff_agree").collect();
            if !agree.is_empty() {
                let n: usize = agree.iter().map(|r| r.count).sum();
                let hits: f64 = agree.iter().map(|r| r.mean * r.count as f64).sum();
                out.push(Check::new("iff agreement rate = 100%", None, Some(hits / n as f64), |v| v >= 1.0 - 1e-12));
            }
        }
        Command::Gen | Command::Report => {}
    }
    out
}

pub fn acceptance_table(sections: &[(String, Vec<Check>)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:<52} {:>6} {:>10}  verdict", "input", "check", "kappa", "value");
    for (name, checks) in sections {
        for c in checks {
            let k = c.kappa.map_or("-".into(), |k| format!("{k:.2}"));
            let v = c.value.map_or("-".into(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{:<28} {:<52} {:>6} {:>10}  {}", name, c.name, k, v, c.verdict());
        }
    }
    out
}

pub(crate) fn run_report(cfg: &ExperimentConfig, out: &Path, _check: bool) -> std::result::Result<RunSummary, RunError> {
    if cfg.report_inputs.is_empty() {
        return Err(RunError::Config(Error::InvalidArgument("report.inputs is empty".into())));
    }
    let mut missing = Vec::new();
    for dir in &cfg.report_inputs {
        for f in ["summary.csv", "manifest.csv"] {
            let p = dir.join(f);
            if !p.is_file() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(RunError::Runtime(Error::InvalidArgument(format!("missing report inputs: {}", missing.join(", ")))));
    }
    let mut art = Artifacts::new(out).map_err(RunError::Runtime)?;
    art.note("config", &file_name(&cfg.path), &cfg.hash);
    art.note("command", "command", Command::Report);
    let mut sections = Vec::new();
    let mut used = BTreeMap::new();
    for dir in &cfg.report_inputs {
        let summary_path = dir.join("summary.csv");
        let bytes = fs::read(&summary_path).map_err(|e| RunError::Runtime(io_err(&summary_path)(e)))?;
        let rows = read_summary(&summary_path).map_err(RunError::Runtime)?;
        let cmd = read_command(&dir.join("manifest.csv")).map_err(RunError::Runtime)?;
        let base = file_name(dir);
        let n = used.entry(base.clone()).or_insert(0usize);
        *n += 1;
        let name = if *n == 1 { base } else { format!("{base}_{n}") };
        art.note("input", &format!("{name}/summary.csv"), sha256_hex(&bytes));
        art.write(&format!("{name}_long.csv"), long_format(&rows).as_bytes()).map_err(RunError::Runtime)?;
        sections.push((name, checks(cmd, &rows)));
    }
    let failed = sections.iter().flat_map(|(_, c)| c).filter(|c| c.pass == Some(false)).count();
    art.write("acceptance.txt", acceptance_table(&sections).as_bytes()).map_err(RunError::Runtime)?;
    art.finish(failed).map_err(RunError::Runtime)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(kappa: f64, metric: &str, mean: f64) -> SummaryRow {
        SummaryRow {
            kappa: Some(kappa),
            metric: metric.into(),
            x: 0.0,
            mean,
            sd: 0.0,
            count: 3,
        }
    }

    #[test]
    fn inlp_checks_cover_the_flat_line() {
        let rows = vec![
            row(0.5, "final_main_acc", 0.99),
            row(0.5, "max_acc_change", 0.01),
            row(0.8, "final_main_acc", 0.5),
            row(0.8, "first_drop_iter", 2.0),
            row(0.9, "final_main_acc", 0.6),
            row(0.9, "first_drop_iter", 1.0),
            row(0.9, "max_probe_spuriousness_first5", 0.8),
        ];
        let c = checks(Command::Inlp, &rows);
        let flat = c.iter().find(|c| c.name.contains("flat line")).unwrap();
        assert_eq!(flat.pass, Some(true));
        let fails: Vec<_> = c.iter().filter(|c| c.pass == Some(false)).collect();
        assert_eq!(fails.len(), 1);
        assert_eq!(fails[0].kappa, Some(0.9));
        assert!(c.iter().any(|c| c.name.contains("non-increasing") && c.pass == Some(true)));
    }

    #[test]
    fn missing_flat_line_is_not_applicable() {
        let c = checks(Command::Inlp, &[row(0.8, "final_main_acc", 0.5)]);
        assert!(c.iter().any(|c| c.name.contains("flat line") && c.pass.is_none()));
    }

    #[test]
    fn long_format_has_one_series_per_metric_and_kappa() {
        let rows = vec![row(0.5, "a", 1.0), row(0.6, "a", 2.0), row(0.5, "b", 3.0)];
        let text = long_format(&rows);
        assert!(text.starts_with("series,x,y,y_sd\n"));
        let series: std::collections::BTreeSet<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(series.len(), 3);
    }

    #[test]
    fn sweep_correlation_check() {
        let mut rows = Vec::new();
        for (k, psi, dp) in [(0.5, 0.0, 0.01), (0.7, 0.2, 0.05), (0.9, 0.5, 0.2)] {
            rows.push(row(k, "best_spuriousness", psi));
            rows.push(row(k, "best_delta_prob", dp));
        }
        let c = checks(Command::Sweep, &rows);
        assert!(c.iter().any(|c| c.name.starts_with("pearson") && c.pass == Some(true)));
    }
}
