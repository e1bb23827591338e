//! Run reports: summary tables from a finished run directory and the
//! homogeneity/diversity time series.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::RunSummary;
use crate::error::{Error, Result};
use crate::metrics::{read_metrics, MetricsRow};
use crate::model::write_atomic;
use crate::v2s::PruneReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u64,
    pub homogeneity: f64,
    pub diversity: f64,
}

/// Logged steps that carry group terms (stage 2 rows have none).
pub fn group_series(rows: &[MetricsRow]) -> Vec<SeriesPoint> {
    rows.iter()
        .filter(|r| r.homogeneity.is_finite() && r.diversity.is_finite())
        .map(|r| SeriesPoint { step: r.step, homogeneity: r.homogeneity, diversity: r.diversity })
        .collect()
}

/// Change of both magnitudes between the first and last point of a series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub first_step: u64,
    pub last_step: u64,
    pub homogeneity_start: f64,
    pub homogeneity_end: f64,
    pub diversity_start: f64,
    pub diversity_end: f64,
    /// `(|end| - |start|) / |start|`
    pub homogeneity_change: f64,
    pub diversity_change: f64,
}

fn relative(start: f64, end: f64) -> f64 {
    (end.abs() - start.abs()) / start.abs()
}

pub fn trend(series: &[SeriesPoint]) -> Option<Trend> {
    let (first, last) = (series.first()?, series.last()?);
    Some(Trend {
        first_step: first.step,
        last_step: last.step,
        homogeneity_start: first.homogeneity,
        homogeneity_end: last.homogeneity,
        diversity_start: first.diversity,
        diversity_end: last.diversity,
        homogeneity_change: relative(first.homogeneity, last.homogeneity),
        diversity_change: relative(first.diversity, last.diversity),
    })
}

pub fn series_csv(series: &[SeriesPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in series {
        w.serialize(p)?;
    }
    w.into_inner().map_err(|e| Error::contract(format!("flushing series: {}", e.error())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub text: String,
    pub series: Vec<SeriesPoint>,
    pub trend: Option<Trend>,
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        v.to_string()
    }
}

/// Reads `metrics.csv` (plus `summary.toml` and `prune_report.toml` when
/// present) from `dir`, writes `report.md` and `series.csv` next to them and
/// returns the same content.
pub fn report(dir: &Path) -> Result<RunReport> {
    let rows = read_metrics(&dir.join("metrics.csv"))?;
    let series = group_series(&rows);
    let tr = trend(&series);
    let mut text = String::new();
    let _ = writeln!(text, "# Run report: {}\n", dir.display());

    let summary_path = dir.join("summary.toml");
    if summary_path.exists() {
        let s = RunSummary::load(&summary_path)?;
        let _ = writeln!(text, "| field | value |\n|---|---|");
        let _ = writeln!(text, "| stage | {} |", s.stage.name());
        let _ = writeln!(text, "| stop reason | {} |", s.stop_reason);
        let _ = writeln!(text, "| steps | {} |", s.steps);
        let _ = writeln!(text, "| stage-1 epochs | {} |", s.stage1_epochs);
        let _ = writeln!(text, "| stage-2 epochs | {} |", s.stage2_epochs);
        let _ = writeln!(text, "| voted | {} (forced: {}) |", s.voted, s.forced);
        let _ = writeln!(text, "| non-embedding params | {} |", s.params);
        let _ = writeln!(text, "| FLOPs | {} |", s.flops);
        let _ = writeln!(text, "| kept heads | {:?} |", s.kept_heads);
        let _ = writeln!(text, "| valid acc / ppl | {} / {} |", fmt(s.valid.accuracy), fmt(s.valid.perplexity));
        let _ = writeln!(text, "| test acc / ppl | {} / {} |", fmt(s.test.accuracy), fmt(s.test.perplexity));
        if let Some(u) = s.unpruned_test {
            let _ = writeln!(text, "| unpruned test acc | {} |", fmt(u.accuracy));
        }
        if let Some(c) = &s.compactness {
            let _ = writeln!(text, "| mean SC / DI ({}) | {} / {} |", c.kind.name(), fmt(c.mean_sc), fmt(c.mean_di));
        }
        text.push('\n');
    }

    let prune_path = dir.join("prune_report.toml");
    if prune_path.exists() {
        let p = PruneReport::load(&prune_path)?;
        let _ = writeln!(text, "## Voting\n\n| site | votes | survivors |\n|---|---|---|");
        for l in &p.layers {
            let _ = writeln!(text, "| {} | {:?} | {:?} |", l.site, l.votes, l.survivors);
        }
        let _ = writeln!(
            text,
            "\nparams {} -> {}, FLOPs {} -> {} at length {}\n",
            p.params_before, p.params_after, p.flops_before, p.flops_after, p.input_len
        );
    }

    let _ = writeln!(text, "## Group terms\n");
    match &tr {
        Some(t) => {
            let _ = writeln!(
                text,
                "| term | step {} | step {} | magnitude change |\n|---|---|---|---|",
                t.first_step, t.last_step
            );
            let _ = writeln!(
                text,
                "| homogeneity | {} | {} | {:+.1}% |",
                fmt(t.homogeneity_start),
                fmt(t.homogeneity_end),
                100.0 * t.homogeneity_change
            );
            let _ = writeln!(
                text,
                "| diversity | {} | {} | {:+.1}% |",
                fmt(t.diversity_start),
                fmt(t.diversity_end),
                100.0 * t.diversity_change
            );
        }
        None => {
            let _ = writeln!(text, "no logged group terms");
        }
    }
    if let Some(last) = rows.last() {
        let _ = writeln!(
            text,
            "\nlast row: step {}, task loss {}, ppl {}, acc {}",
            last.step,
            fmt(last.loss_task),
            fmt(last.ppl),
            fmt(last.acc)
        );
    }

    write_atomic(&dir.join("report.md"), text.as_bytes())?;
    write_atomic(&dir.join("series.csv"), &series_csv(&series)?)?;
    Ok(RunReport { text, series, trend: tr })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64, h: f64, d: f64) -> MetricsRow {
        MetricsRow {
            step,
            loss_task: 1.0,
            loss_group: 0.0,
            homogeneity: h,
            diversity: d,
            sc: f64::NAN,
            di: f64::NAN,
            ppl: 2.0,
            acc: 0.5,
        }
    }

    #[test]
    fn trend_uses_magnitudes_and_skips_undefined_rows() {
        let rows = [row(0, -0.5, 0.2), row(10, -0.6, -0.1), row(20, f64::NAN, f64::NAN), row(30, -0.75, -0.4)];
        let s = group_series(&rows);
        assert_eq!(s.len(), 3);
        let t = trend(&s).unwrap();
        assert!((t.homogeneity_change - 0.5).abs() < 1e-12);
        assert!((t.diversity_change - 1.0).abs() < 1e-12);
        assert_eq!(t.last_step, 30);
        assert!(trend(&[]).is_none());
    }
}
