//! Re-run the step detectors over a saved run's curves.
//!
//! Reads `curves.csv` and `manifest.jsonl` from a finished run directory,
//! applies (possibly different) detector parameters, and writes fresh
//! detections, results tables, and plot data. The run must have been emitted
//! with `emit_curves = true`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AucDenominator, DEFAULT_AP_THRESHOLD, DEFAULT_NL_DEVIATION};
use crate::perturb::SweepCurve;

use super::config::{ExperimentConfig, TargetKind};
use super::report::{
    results_csv_name, write_plot_data, write_results_csv, write_results_json, CurveKind,
};
use super::run::{self, ManifestRecord, RunSummary, SweepRecord};

/// Detector parameters for re-analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeParams {
    pub ap_threshold: f64,
    pub nl_deviation: f64,
    pub auc_denominator: AucDenominator,
}

impl Default for AnalyzeParams {
    fn default() -> Self {
        AnalyzeParams {
            ap_threshold: DEFAULT_AP_THRESHOLD,
            nl_deviation: DEFAULT_NL_DEVIATION,
            auc_denominator: AucDenominator::UpToX,
        }
    }
}

fn artifact_error(path: &Path, reason: impl ToString) -> Error {
    Error::BadRunArtifact {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Detect over the saved curves of `run_dir` and write results to `out_dir`.
pub fn analyze_run(
    run_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    params: &AnalyzeParams,
) -> Result<RunSummary> {
    let run_dir = run_dir.as_ref();
    let out_dir = out_dir.as_ref();

    let config_path = run_dir.join("run_config.json");
    let cfg: ExperimentConfig = serde_json::from_str(
        &fs::read_to_string(&config_path).map_err(|e| artifact_error(&config_path, e))?,
    )?;

    let manifest = read_manifest(&run_dir.join("manifest.jsonl"))?;
    let curves = read_curves(&run_dir.join("curves.csv"))?;

    let mut records = Vec::with_capacity(manifest.len());
    for m in &manifest {
        let (l2, kl) = curves.get(&m.sweep_id).ok_or_else(|| {
            artifact_error(
                &run_dir.join("curves.csv"),
                format!("no curve rows for sweep {}", m.sweep_id),
            )
        })?;
        let target = TargetKind::from_str_name(&m.target_type)?;
        let curve = SweepCurve {
            l2: l2.clone(),
            kl: kl.clone(),
            base_target_distance: m.base_target_distance,
            prompt_id: m.prompt_id,
            label: m.target_type.clone(),
        };
        let mut detections = run::detect_with_params(&curve.l2, CurveKind::L2, params)?;
        if let Some(kl) = &curve.kl {
            detections.extend(run::detect_with_params(kl, CurveKind::Kl, params)?);
        }
        records.push(SweepRecord {
            sweep_id: m.sweep_id,
            job: m.job,
            prompt_id: m.prompt_id,
            donor_prompt_id: m.donor_prompt_id,
            target,
            curve,
            detections,
            composition: None,
        });
    }
    records.sort_by_key(|r| r.sweep_id);

    let mut types: Vec<TargetKind> = records.iter().map(|r| r.target).collect();
    types.sort();
    types.dedup();
    let has_kl = records.iter().any(|r| r.curve.kl.is_some());

    let distributions = run::aggregate(&records, &types, has_kl);
    let tables = run::build_tables(&distributions, has_kl)?;

    fs::create_dir_all(out_dir)?;
    run::write_detections_csv(out_dir.join("detections.csv"), &records)?;
    for table in &tables {
        write_results_csv(
            out_dir.join(results_csv_name(table.metric, table.curve)),
            table,
        )?;
    }
    write_results_json(out_dir.join("results.json"), &tables)?;
    let plot_dir = out_dir.join("plot");
    for table in &tables {
        let by_target: BTreeMap<TargetKind, _> = distributions
            .iter()
            .filter(|((m, c, _), _)| *m == table.metric && *c == table.curve)
            .map(|((_, _, t), d)| (*t, d.clone()))
            .collect();
        write_plot_data(
            &plot_dir,
            table.metric,
            table.curve,
            &by_target,
            cfg.sweep.steps,
        )?;
    }

    Ok(RunSummary {
        kind: cfg.experiment.kind,
        output_dir: out_dir.to_path_buf(),
        n_perturbations: cfg.experiment.n_perturbations,
        target_types: types,
        tables,
        distributions,
        warmup_stats: None,
    })
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| artifact_error(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| artifact_error(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(artifact_error(path, "empty manifest"));
    }
    Ok(out)
}

type CurveColumns = (Vec<f64>, Option<Vec<f64>>);

fn read_curves(path: &Path) -> Result<BTreeMap<u64, CurveColumns>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| artifact_error(path, e))?;
    type Row = (usize, f64, Option<f64>);
    let mut curves: BTreeMap<u64, Vec<Row>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let sweep_id: u64 = field(0)
            .parse()
            .map_err(|_| artifact_error(path, format!("bad sweep_id `{}`", field(0))))?;
        let step: usize = field(1)
            .parse()
            .map_err(|_| artifact_error(path, format!("bad step `{}`", field(1))))?;
        let l2: f64 = field(2)
            .parse()
            .map_err(|_| artifact_error(path, format!("bad l2 `{}`", field(2))))?;
        let kl = if field(3).is_empty() {
            None
        } else {
            Some(
                field(3)
                    .parse::<f64>()
                    .map_err(|_| artifact_error(path, format!("bad kl `{}`", field(3))))?,
            )
        };
        curves.entry(sweep_id).or_default().push((step, l2, kl));
    }
    let mut out = BTreeMap::new();
    for (sweep_id, mut rows) in curves {
        rows.sort_by_key(|&(step, _, _)| step);
        for (expect, &(step, _, _)) in rows.iter().enumerate() {
            if step != expect {
                return Err(artifact_error(
                    path,
                    format!("sweep {sweep_id}: missing or duplicate step {expect}"),
                ));
            }
        }
        let l2: Vec<f64> = rows.iter().map(|&(_, l2, _)| l2).collect();
        let kl: Option<Vec<f64>> = if rows.iter().all(|&(_, _, kl)| kl.is_some()) {
            Some(rows.iter().map(|&(_, _, kl)| kl.unwrap()).collect())
        } else {
            None
        };
        out.insert(sweep_id, (l2, kl));
    }
    Ok(out)
}
