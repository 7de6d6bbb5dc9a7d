//! Results tables and file emission.
//!
//! Each experiment produces one table per (detector, readout curve) pair:
//! mean, population standard deviation, KS statistic against the
//! model-generated reference distribution, and censoring counts per target
//! type. Tables go to CSV (one file per table) and a combined JSON; step
//! distributions additionally go to binned-histogram and
//! cumulative-frequency CSVs for plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{dist_stats, ks_statistic, Metric, StepDistribution};

use super::config::TargetKind;

/// Which readout series a detection ran on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    L2,
    Kl,
}

impl CurveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveKind::L2 => "l2",
            CurveKind::Kl => "kl",
        }
    }
}

/// Histogram bin width (in steps) for plot data.
pub const PLOT_BIN_WIDTH: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub target: TargetKind,
    /// `None` when every sweep of this type censored.
    pub mean: Option<f64>,
    pub std_dev: Option<f64>,
    /// KS statistic against the model-generated distribution; `None` when
    /// either side is empty.
    pub ks_vs_reference: Option<f64>,
    pub detected: usize,
    pub censored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub metric: Metric,
    pub curve: CurveKind,
    pub rows: Vec<TableRow>,
}

impl ResultsTable {
    /// Build a table from per-type distributions, measuring KS against
    /// `reference` (its own row is exactly zero by identity).
    pub fn from_distributions(
        metric: Metric,
        curve: CurveKind,
        dists: &BTreeMap<TargetKind, StepDistribution>,
        reference: TargetKind,
    ) -> Result<Self> {
        let reference_dist = dists.get(&reference).ok_or(Error::MissingReferenceType)?;
        let mut rows = Vec::with_capacity(dists.len());
        for (&target, dist) in dists {
            let (mean, std_dev) = match dist_stats(dist) {
                Ok(s) => (Some(s.mean), Some(s.std_dev)),
                Err(Error::AllCensored) => (None, None),
                Err(e) => return Err(e),
            };
            let ks_vs_reference = match ks_statistic(dist, reference_dist) {
                Ok(v) => Some(v),
                Err(Error::EmptyDistribution) => None,
                Err(e) => return Err(e),
            };
            rows.push(TableRow {
                target,
                mean,
                std_dev,
                ks_vs_reference,
                detected: dist.steps.len(),
                censored: dist.censored_count,
            });
        }
        Ok(ResultsTable {
            metric,
            curve,
            rows,
        })
    }

    pub fn row(&self, target: TargetKind) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.target == target)
    }

    /// Fixed-width text rendering for terminal output.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} step distribution ({} curve)",
            self.metric.as_str().to_uppercase(),
            self.curve.as_str()
        );
        let _ = writeln!(
            out,
            "  {:<28} {:>8} {:>8} {:>6} {:>9} {:>9}",
            "target type", "mean", "std dev", "KS", "detected", "censored"
        );
        for r in &self.rows {
            let fmt_opt = |v: Option<f64>| match v {
                Some(v) => format!("{v:.2}"),
                None => "-".to_string(),
            };
            let _ = writeln!(
                out,
                "  {:<28} {:>8} {:>8} {:>6} {:>9} {:>9}",
                r.target.as_str(),
                fmt_opt(r.mean),
                fmt_opt(r.std_dev),
                r.ks_vs_reference.map_or("-".into(), |v| format!("{v:.2}")),
                r.detected,
                r.censored
            );
        }
        out
    }
}

fn opt_to_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn field_to_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse::<f64>()
            .map(Some)
            .map_err(|e| Error::BadRunArtifact {
                path: PathBuf::from("<results csv>"),
                reason: e.to_string(),
            })
    }
}

/// One CSV per table: `results_{metric}_{curve}.csv`.
pub fn results_csv_name(metric: Metric, curve: CurveKind) -> String {
    format!("results_{}_{}.csv", metric.as_str(), curve.as_str())
}

pub fn write_results_csv(path: impl AsRef<Path>, table: &ResultsTable) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::EmptyTargetTypes);
    }
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record([
        "target_type",
        "mean",
        "std_dev",
        "ks_vs_model_generated",
        "detected",
        "censored",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.target.as_str().to_string(),
            opt_to_field(r.mean),
            opt_to_field(r.std_dev),
            opt_to_field(r.ks_vs_reference),
            r.detected.to_string(),
            r.censored.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reload a results CSV; floats round-trip exactly through the shortest
/// decimal representation.
pub fn read_results_csv(
    path: impl AsRef<Path>,
    metric: Metric,
    curve: CurveKind,
) -> Result<ResultsTable> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or_default();
        rows.push(TableRow {
            target: TargetKind::from_str_name(get(0))?,
            mean: field_to_opt(get(1))?,
            std_dev: field_to_opt(get(2))?,
            ks_vs_reference: field_to_opt(get(3))?,
            detected: get(4).parse().map_err(|_| Error::BadRunArtifact {
                path: path.as_ref().to_path_buf(),
                reason: format!("bad detected count `{}`", get(4)),
            })?,
            censored: get(5).parse().map_err(|_| Error::BadRunArtifact {
                path: path.as_ref().to_path_buf(),
                reason: format!("bad censored count `{}`", get(5)),
            })?,
        });
    }
    Ok(ResultsTable {
        metric,
        curve,
        rows,
    })
}

/// All tables in one JSON document, keyed `{metric}_{curve}`.
pub fn write_results_json(path: impl AsRef<Path>, tables: &[ResultsTable]) -> Result<()> {
    if tables.iter().all(|t| t.rows.is_empty()) {
        return Err(Error::EmptyTargetTypes);
    }
    let map: BTreeMap<String, &ResultsTable> = tables
        .iter()
        .map(|t| (format!("{}_{}", t.metric.as_str(), t.curve.as_str()), t))
        .collect();
    fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

/// Histogram (`hist_{metric}_{curve}.csv`) and cumulative frequency
/// (`cdf_{metric}_{curve}.csv`) plot data for each target type's step
/// distribution. Histogram frequencies are normalized over detected steps.
pub fn write_plot_data(
    dir: impl AsRef<Path>,
    metric: Metric,
    curve: CurveKind,
    dists: &BTreeMap<TargetKind, StepDistribution>,
    steps: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let hist_path = dir.join(format!("hist_{}_{}.csv", metric.as_str(), curve.as_str()));
    let mut w = csv::Writer::from_path(&hist_path)?;
    w.write_record(["target_type", "bin_lo", "bin_hi", "count", "frequency"])?;
    for (&target, dist) in dists {
        let n = dist.steps.len();
        let mut lo = 0usize;
        while lo <= steps {
            let hi = (lo + PLOT_BIN_WIDTH).min(steps + 1);
            let count = dist
                .steps
                .iter()
                .filter(|&&s| (s as usize) >= lo && (s as usize) < hi)
                .count();
            let freq = if n > 0 { count as f64 / n as f64 } else { 0.0 };
            w.write_record([
                target.as_str().to_string(),
                lo.to_string(),
                hi.to_string(),
                count.to_string(),
                freq.to_string(),
            ])?;
            lo = hi;
        }
    }
    w.flush()?;

    let cdf_path = dir.join(format!("cdf_{}_{}.csv", metric.as_str(), curve.as_str()));
    let mut w = csv::Writer::from_path(&cdf_path)?;
    w.write_record(["target_type", "step", "cumulative_frequency"])?;
    for (&target, dist) in dists {
        let n = dist.steps.len();
        let mut sorted = dist.steps.clone();
        sorted.sort_unstable();
        let mut idx = 0usize;
        for step in 0..=steps {
            while idx < sorted.len() && (sorted[idx] as usize) <= step {
                idx += 1;
            }
            let f = if n > 0 { idx as f64 / n as f64 } else { 0.0 };
            w.write_record([target.as_str().to_string(), step.to_string(), f.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
