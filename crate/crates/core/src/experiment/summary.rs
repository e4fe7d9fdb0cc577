//! Run summaries and cross-run comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::Mode;
use super::runner::{SeedLog, SeedRun};
use crate::error::{Error, Result};
use crate::ir::BRANCH_SITES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, sd, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub selector: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub horizon: usize,
    /// Metric name to per-seed values and their mean and sd.
    pub metrics: BTreeMap<String, Stat>,
    pub wall_time_secs: f64,
}

impl RunSummary {
    pub fn headline(&self) -> (&'static str, &Stat) {
        let name = headline_metric(self.mode);
        (name, &self.metrics[name])
    }

    /// Equal apart from wall time.
    pub fn same_results(&self, other: &RunSummary) -> bool {
        RunSummary {
            wall_time_secs: 0.0,
            ..self.clone()
        } == RunSummary {
            wall_time_secs: 0.0,
            ..other.clone()
        }
    }
}

pub fn headline_metric(mode: Mode) -> &'static str {
    if mode.is_bench() {
        "total_regret"
    } else {
        "validity_rate"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuzzMetrics {
    pub validity_rate: f64,
    pub branches_per_testcase: f64,
    pub total_branches: usize,
}

pub fn fuzz_metrics(rows: &[super::runner::FuzzRow]) -> FuzzMetrics {
    let n = rows.len().max(1) as f64;
    let total_branches: usize = rows.iter().map(|r| r.new_branches).sum();
    debug_assert!(total_branches <= BRANCH_SITES);
    FuzzMetrics {
        validity_rate: rows.iter().filter(|r| r.outcome.is_valid()).count() as f64 / n,
        branches_per_testcase: rows.iter().map(|r| r.sites_hit as f64).sum::<f64>() / n,
        total_branches,
    }
}

pub fn total_regret(log: &SeedLog) -> Option<f64> {
    match log {
        SeedLog::Bench(rows) => Some(rows.last().map_or(0.0, |r| r.cum_regret)),
        SeedLog::Fuzz(_) => None,
    }
}

pub fn metrics_of(runs: &[SeedRun]) -> BTreeMap<String, Stat> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        match &run.log {
            SeedLog::Bench(_) => {
                columns
                    .entry("total_regret".into())
                    .or_default()
                    .push(total_regret(&run.log).unwrap_or(0.0));
            }
            SeedLog::Fuzz(rows) => {
                let m = fuzz_metrics(rows);
                columns.entry("validity_rate".into()).or_default().push(m.validity_rate);
                columns
                    .entry("branches_per_testcase".into())
                    .or_default()
                    .push(m.branches_per_testcase);
                columns
                    .entry("total_branches".into())
                    .or_default()
                    .push(m.total_branches as f64);
            }
        }
    }
    columns.into_iter().map(|(k, v)| (k, Stat::from_values(v))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub selector: String,
    pub stat: Stat,
}

/// Relative change of `to` against `from`, in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseChange {
    pub from: String,
    pub to: String,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub mode: Mode,
    pub metric: &'static str,
    pub rows: Vec<ComparisonRow>,
    pub pairwise: Vec<PairwiseChange>,
}

pub fn relative_change(from: f64, to: f64) -> f64 {
    if from == to {
        0.0
    } else {
        (to - from) / from.abs() * 100.0
    }
}

/// Compares runs of one mode by their headline metric.
pub fn compare(runs: &[(String, RunSummary)]) -> Result<Comparison> {
    let (_, first) = runs.first().ok_or(Error::Empty("run list"))?;
    let mode = first.mode;
    if let Some((label, other)) = runs.iter().find(|(_, s)| s.mode != mode) {
        return Err(Error::InvalidArgument(format!(
            "cannot summarize mixed modes: {} and {} ({label})",
            mode.name(),
            other.mode.name()
        )));
    }
    let metric = headline_metric(mode);
    let rows: Vec<ComparisonRow> = runs
        .iter()
        .map(|(label, s)| ComparisonRow {
            label: label.clone(),
            selector: s.selector.clone(),
            stat: s.metrics[metric].clone(),
        })
        .collect();
    let mut pairwise = Vec::new();
    for a in &rows {
        for b in &rows {
            if a.label != b.label {
                pairwise.push(PairwiseChange {
                    from: a.label.clone(),
                    to: b.label.clone(),
                    percent: relative_change(a.stat.mean, b.stat.mean),
                });
            }
        }
    }
    Ok(Comparison {
        mode,
        metric,
        rows,
        pairwise,
    })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(3);
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}  metric: {}", self.mode.name(), self.metric);
        let _ = writeln!(
            out,
            "{:<width$}  {:<10}  {:>14}  {:>12}  {:>5}",
            "run", "selector", "mean", "sd", "seeds"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<10}  {:>14.4}  {:>12.4}  {:>5}",
                r.label,
                r.selector,
                r.stat.mean,
                r.stat.sd,
                r.stat.values.len()
            );
        }
        if !self.pairwise.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "relative change of mean (to vs from):");
            for p in &self.pairwise {
                let _ = writeln!(out, "{:<width$} -> {:<width$}  {:+.2}%", p.from, p.to, p.percent);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,selector,metric,mean,sd,seeds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.label,
                r.selector,
                self.metric,
                r.stat.mean,
                r.stat.sd,
                r.stat.values.len()
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(mode: Mode, values: Vec<f64>) -> RunSummary {
        let mut metrics = BTreeMap::new();
        metrics.insert(headline_metric(mode).to_string(), Stat::from_values(values.clone()));
        RunSummary {
            mode,
            selector: "random".into(),
            config_hash: String::new(),
            seeds: (0..values.len() as u64).collect(),
            horizon: 1,
            metrics,
            wall_time_secs: 0.0,
        }
    }

    #[test]
    fn single_value_has_zero_sd() {
        let s = Stat::from_values(vec![4.0]);
        assert_eq!((s.mean, s.sd), (4.0, 0.0));
    }

    #[test]
    fn ten_and_twenty() {
        assert_eq!(Stat::from_values(vec![10.0, 20.0]).mean, 15.0);
        let c = compare(&[
            ("a".into(), summary(Mode::BenchComb, vec![10.0])),
            ("b".into(), summary(Mode::BenchComb, vec![20.0])),
        ])
        .unwrap();
        assert_eq!(c.pairwise[0].percent, 100.0);
        assert_eq!(c.pairwise[1].percent, -50.0);
        assert!(c.to_text().contains("+100.00%"));
        assert_eq!(c.to_csv().lines().count(), 3);
    }

    #[test]
    fn identical_runs_change_by_zero() {
        let s = summary(Mode::FuzzSim, vec![0.3, 0.5]);
        let c = compare(&[("a".into(), s.clone()), ("b".into(), s)]).unwrap();
        assert!(c.pairwise.iter().all(|p| p.percent == 0.0));
    }

    #[test]
    fn mixed_modes_are_rejected() {
        let err = compare(&[
            ("a".into(), summary(Mode::BenchComb, vec![1.0])),
            ("b".into(), summary(Mode::FuzzSim, vec![1.0])),
        ]);
        assert!(err.is_err());
        assert!(compare(&[]).is_err());
    }
}
