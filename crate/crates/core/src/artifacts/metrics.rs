use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::eval::{AblationParam, AblationRow, EvalReport, Histogram, MeanStd, SeedReport};

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.2}"))
}

fn cell_ms(v: Option<MeanStd>) -> String {
    v.map_or_else(|| "N/A".to_string(), |m| format!("{:.2}±{:.2}", m.mean, m.std))
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut s = String::new();
    for row in h {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

/// Writes `eval.json` and one `histogram_<cohort>.csv` per cohort.
pub fn write_eval(report: &EvalReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = vec![dir.join("eval.json")];
    fs::write(&written[0], serde_json::to_string_pretty(report)? + "\n")?;
    for (cohort, h) in &report.histograms {
        let path = dir.join(format!("histogram_{cohort}.csv"));
        fs::write(&path, histogram_csv(h))?;
        written.push(path);
    }
    Ok(written)
}

pub fn ablation_csv(param: AblationParam, rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{},accuracy_pct,stepwise_mortality_pct,complete_mortality_pct\n",
        param.as_str()
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:.2},{:.2},{},{}",
            r.value,
            r.metrics.accuracy_pct,
            cell(r.metrics.stepwise_mortality_pct),
            cell(r.metrics.complete_mortality_pct)
        );
    }
    s
}

pub fn seeds_csv(report: &SeedReport) -> String {
    let mut s = String::from("seed,accuracy_pct,stepwise_mortality_pct,complete_mortality_pct\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{:.2},{},{}",
            r.seed,
            r.metrics.accuracy_pct,
            cell(r.metrics.stepwise_mortality_pct),
            cell(r.metrics.complete_mortality_pct)
        );
    }
    let _ = writeln!(
        s,
        "mean±std,{},{},{}",
        cell_ms(Some(report.accuracy)),
        cell_ms(report.stepwise_mortality),
        cell_ms(report.complete_mortality)
    );
    s
}

pub fn write_ablation(param: AblationParam, rows: &[AblationRow], dir: impl AsRef<Path>) -> Result<PathBuf> {
    fs::create_dir_all(dir.as_ref())?;
    let path = dir.as_ref().join("ablation.csv");
    fs::write(&path, ablation_csv(param, rows))?;
    Ok(path)
}

pub fn write_seeds(report: &SeedReport, dir: impl AsRef<Path>) -> Result<PathBuf> {
    fs::create_dir_all(dir.as_ref())?;
    let path = dir.as_ref().join("seeds.csv");
    fs::write(&path, seeds_csv(report))?;
    Ok(path)
}
