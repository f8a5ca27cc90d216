use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::runner::{read_metrics, RunError};
use crate::svg;

/// One row of the comparison table, aggregated over all runs sharing a
/// task and optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub task: String,
    pub optimizer: String,
    pub runs: usize,
    pub iterations: usize,
    /// Mean over every timed iteration of every run.
    pub mean_wall_time_ms: f64,
    /// Mean over runs of the last recorded `loss_after`.
    pub final_loss: f64,
    pub failed_runs: usize,
}

pub const REPORT_HEADER: &str = "task,optimizer,runs,iterations,mean_wall_time_ms,final_loss,failed_runs";

fn run_identity(dir: &Path) -> Result<(String, String), RunError> {
    let text = fs::read_to_string(dir.join("run.json"))
        .map_err(|e| RunError::Report(format!("run {}: cannot read run.json: {e}", dir.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| RunError::Report(format!("run {}: {e}", dir.display())))?;
    let field = |k: &str| {
        v[k].as_str()
            .map(str::to_string)
            .ok_or_else(|| RunError::Report(format!("run {}: run.json lacks `{k}`", dir.display())))
    };
    Ok((field("task")?, field("optimizer")?))
}

#[derive(Default)]
struct Acc {
    runs: usize,
    failed: usize,
    times: Vec<f64>,
    finals: Vec<f64>,
    curve: Vec<(f64, f64)>,
}

/// Aggregates runs and writes `comparison.csv`, `wall_time.svg` and `loss.svg`
/// into `out`. Output bytes depend only on the inputs.
pub fn emit_report(runs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>, RunError> {
    if runs.is_empty() {
        return Err(RunError::Report("no runs given".into()));
    }
    let mut groups: BTreeMap<(String, String), Acc> = BTreeMap::new();
    for dir in runs {
        let key = run_identity(dir)?;
        let records = read_metrics(dir)?;
        let acc = groups.entry(key).or_default();
        acc.runs += 1;
        if records.iter().any(|r| r.failed) {
            acc.failed += 1;
        }
        acc.times.extend(records.iter().filter(|r| !r.failed).filter_map(|r| r.wall_time_ms));
        if let Some(last) = records.iter().rev().find_map(|r| r.loss_after) {
            acc.finals.push(last);
        }
        if acc.runs == 1 {
            acc.curve = records
                .iter()
                .filter_map(|r| r.loss_after.map(|l| (r.iter as f64, l)))
                .collect();
        }
    }

    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let rows: Vec<ReportRow> = groups
        .iter()
        .map(|((task, opt), a)| ReportRow {
            task: task.clone(),
            optimizer: opt.clone(),
            runs: a.runs,
            iterations: a.times.len(),
            mean_wall_time_ms: mean(&a.times),
            final_loss: mean(&a.finals),
            failed_runs: a.failed,
        })
        .collect();

    fs::create_dir_all(out)?;
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:e},{:e},{}",
            r.task, r.optimizer, r.runs, r.iterations, r.mean_wall_time_ms, r.final_loss, r.failed_runs
        );
    }
    fs::write(out.join("comparison.csv"), csv)?;

    let label = |r: &ReportRow| format!("{}/{}", r.task, r.optimizer);
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (label(r), r.mean_wall_time_ms)).collect();
    fs::write(out.join("wall_time.svg"), svg::bar_chart("mean time per iteration", "ms", &bars))?;
    let series: Vec<(String, Vec<(f64, f64)>)> = groups
        .iter()
        .map(|((t, o), a)| (format!("{t}/{o}"), a.curve.clone()))
        .collect();
    fs::write(out.join("loss.svg"), svg::line_chart("training loss", "iteration", "loss", &series))?;
    Ok(rows)
}
