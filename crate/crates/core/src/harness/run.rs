//! Experiment orchestration.
//!
//! A run is a deterministic function of (config, weight files, token file):
//! job `i` derives every random stream it needs from `(master_seed, i)`, so
//! results are invariant to worker count and scheduling order, and two runs
//! of the same config produce byte-identical output files.
//!
//! Sensitivity runs perturb a freshly drawn base activation toward each
//! requested target type. Plateau runs build each requested type from the
//! base and perturb it toward one random activation shared across the types
//! of that job, so plateau flatness is compared on the same direction.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::{
    reconstruct_target, sample_random, synthesize_baseline, synthesize_random,
    synthesize_structured, synthesize_structured_no_cos, CompositionReport, GaussianModel,
    StructuredOpts,
};
use crate::error::{Error, Result};
use crate::metrics::{
    ap_step_with, auc_step_with, ms_step, nl_step_with, InitialSlope, Metric, StepDetection,
    StepDistribution,
};
use crate::model::{Activation, Model};
use crate::perturb::{plateau_sweep, run_sweep, ReadoutSpec, SweepCurve, SweepSpec};
use crate::sae::{LatentVector, SaeParams, SparsityTable};
use crate::tokens;

use super::cache;
use super::config::{ExperimentConfig, ExperimentKind, TargetKind};
use super::report::{
    results_csv_name, write_plot_data, write_results_csv, write_results_json, CurveKind,
    ResultsTable,
};

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

/// Independent random streams consumed by one job.
#[derive(Debug, Clone, Copy)]
pub enum Purpose {
    PromptDraw = 0,
    RandomTarget = 1,
    SyntheticRandom = 2,
    SyntheticBaseline = 3,
    PlateauTarget = 4,
    RandomStart = 5,
}

const PURPOSE_STRIDE: u64 = 8;

/// The generator for `(master_seed, job, purpose)`: one ChaCha key per
/// master seed, one stream per (job, purpose) pair.
pub fn job_rng(master_seed: u64, job: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(job * PURPOSE_STRIDE + purpose as u64);
    rng
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct DetectionRecord {
    pub curve: CurveKind,
    pub metric: Metric,
    pub step: Option<usize>,
    pub auxiliary: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct SweepRecord {
    pub sweep_id: u64,
    pub job: usize,
    pub prompt_id: u64,
    pub donor_prompt_id: Option<u64>,
    pub target: TargetKind,
    pub curve: SweepCurve,
    pub detections: Vec<DetectionRecord>,
    pub composition: Option<CompositionReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ManifestRecord {
    pub sweep_id: u64,
    pub job: usize,
    pub prompt_id: u64,
    pub donor_prompt_id: Option<u64>,
    pub target_type: String,
    pub base_target_distance: f64,
    pub master_seed: u64,
}

/// Everything a finished run hands back to the caller.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    pub n_perturbations: usize,
    pub target_types: Vec<TargetKind>,
    pub tables: Vec<ResultsTable>,
    pub distributions: BTreeMap<(Metric, CurveKind, TargetKind), StepDistribution>,
    pub warmup_stats: Option<cache::WarmupStats>,
}

impl RunSummary {
    pub fn table(&self, metric: Metric, curve: CurveKind) -> Option<&ResultsTable> {
        self.tables
            .iter()
            .find(|t| t.metric == metric && t.curve == curve)
    }

    /// The table an experiment is usually read by: MS over L2 for
    /// sensitivity, AP over L2 for plateau runs.
    pub fn headline(&self) -> &ResultsTable {
        let metric = match self.kind {
            ExperimentKind::Sensitivity => Metric::Ms,
            ExperimentKind::Plateau => Metric::Ap,
        };
        self.table(metric, CurveKind::L2).expect("headline table")
    }
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Run the experiment the config asks for.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    match cfg.experiment.kind {
        ExperimentKind::Sensitivity => run_sensitivity(cfg),
        ExperimentKind::Plateau => run_plateau(cfg),
    }
}

pub fn run_sensitivity(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_inner(cfg, ExperimentKind::Sensitivity)
}

pub fn run_plateau(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_inner(cfg, ExperimentKind::Plateau)
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    kind: ExperimentKind,
    model: &'a Model,
    sae: &'a SaeParams,
    prompts: &'a [Vec<u32>],
    gaussian: &'a GaussianModel,
    sparsity: &'a SparsityTable,
    top_cos: f64,
    spec: SweepSpec,
    readouts: ReadoutSpec,
    types: Vec<TargetKind>,
    progress: AtomicUsize,
}

fn run_inner(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.experiment.kind != kind {
        return Err(Error::BadExperimentConfig(format!(
            "config kind is {}, but {} was requested",
            cfg.experiment.kind.as_str(),
            kind.as_str()
        )));
    }
    fs::create_dir_all(&cfg.files.output)?;

    log::info!("loading model from {}", cfg.files.model.display());
    let model = Model::load(&cfg.files.model, cfg.model.clone())?;
    log::info!("loading SAE from {}", cfg.files.sae.display());
    let sae = SaeParams::load(&cfg.files.sae)?;
    if sae.d_model() != model.config().d_model {
        return Err(Error::DimensionMismatch {
            expected: model.config().d_model,
            got: sae.d_model(),
        });
    }

    let prompts = prepare_prompts(
        &tokens::read_token_file(&cfg.files.tokens)?,
        cfg.experiment.prompt_len,
    )?;
    log::info!(
        "{} prompts of length {}",
        prompts.len(),
        cfg.experiment.prompt_len
    );

    let warm = cache::warmup(cfg, &model, &sae, &prompts)?;
    let top_cos = cfg
        .experiment
        .top_cos_target
        .resolve(warm.stats.mean_pair_cos_about_bias);
    log::info!(
        "mean activation norm {:.2}, top-cosine target {:.4}",
        warm.stats.mean_activation_norm,
        top_cos
    );

    let ctx = RunContext {
        cfg,
        kind,
        model: &model,
        sae: &sae,
        prompts: &prompts,
        gaussian: &warm.gaussian,
        sparsity: &warm.sparsity,
        top_cos,
        spec: cfg.sweep_spec(),
        readouts: cfg.readout_spec(),
        types: cfg.target_types(),
        progress: AtomicUsize::new(0),
    };

    let n = cfg.experiment.n_perturbations;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.experiment.workers)
        .build()
        .map_err(|e| Error::BadExperimentConfig(format!("thread pool: {e}")))?;
    let nested: Vec<Vec<SweepRecord>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|job| run_job(&ctx, job))
            .collect::<Result<_>>()
    })?;
    let records: Vec<SweepRecord> = nested.into_iter().flatten().collect();

    let distributions = aggregate(&records, &ctx.types, ctx.readouts.kl);
    let tables = build_tables(&distributions, ctx.readouts.kl)?;
    write_artifacts(cfg, &records, &tables, &distributions)?;

    Ok(RunSummary {
        kind,
        output_dir: cfg.files.output.clone(),
        n_perturbations: n,
        target_types: ctx.types,
        tables,
        distributions,
        warmup_stats: Some(warm.stats),
    })
}

/// Keep prompts of at least `prompt_len` tokens, truncated to exactly that
/// length. Two distinct prompts are the minimum for a base/donor pair.
fn prepare_prompts(raw: &[Vec<u32>], prompt_len: usize) -> Result<Vec<Vec<u32>>> {
    let prompts: Vec<Vec<u32>> = raw
        .iter()
        .filter(|p| p.len() >= prompt_len)
        .map(|p| p[..prompt_len].to_vec())
        .collect();
    if prompts.len() < 2 {
        return Err(Error::BadExperimentConfig(format!(
            "need at least 2 prompts of length >= {prompt_len}, found {}",
            prompts.len()
        )));
    }
    Ok(prompts)
}

// ---------------------------------------------------------------------------
// Jobs
// ---------------------------------------------------------------------------

const MAX_BASE_ATTEMPTS: usize = 100;

fn run_job(ctx: &RunContext<'_>, job: usize) -> Result<Vec<SweepRecord>> {
    let seed = ctx.cfg.experiment.master_seed;
    let needs_code = ctx.types.iter().any(|t| t.needs_base_code());
    let mut prompt_rng = job_rng(seed, job as u64, Purpose::PromptDraw);

    let (base_idx, base_act, base_code) = draw_base(ctx, &mut prompt_rng, needs_code)?;

    let donor =
        if ctx.kind == ExperimentKind::Sensitivity && ctx.types.iter().any(|t| t.needs_donor()) {
            let donor_idx = loop {
                let idx = prompt_rng.gen_range(0..ctx.prompts.len());
                if idx != base_idx as usize {
                    break idx;
                }
            };
            let act = ctx
                .model
                .capture_at(&ctx.prompts[donor_idx], &ctx.spec.probe)?;
            Some((donor_idx as u64, act))
        } else {
            None
        };

    // one random direction per plateau job, shared across start types
    let plateau_target = (ctx.kind == ExperimentKind::Plateau).then(|| {
        sample_random(
            ctx.gaussian,
            &mut job_rng(seed, job as u64, Purpose::PlateauTarget),
        )
    });

    let tokens = &ctx.prompts[base_idx as usize];
    let mut records = Vec::with_capacity(ctx.types.len());
    for (pos, &target_kind) in ctx.types.iter().enumerate() {
        let (activation, composition) = build_activation(
            ctx,
            job,
            target_kind,
            &base_act,
            base_code.as_ref(),
            donor.as_ref(),
        )?;

        let mut curve = match ctx.kind {
            ExperimentKind::Sensitivity => run_sweep(
                ctx.model,
                tokens,
                &base_act,
                &activation,
                &ctx.spec,
                ctx.readouts,
            )?,
            ExperimentKind::Plateau => plateau_sweep(
                ctx.model,
                tokens,
                &activation,
                plateau_target.as_ref().expect("plateau target"),
                &ctx.spec,
                ctx.readouts,
            )?,
        };
        curve.prompt_id = base_idx;
        curve.label = target_kind.as_str().to_string();

        let mut detections = detect_all(&curve.l2, CurveKind::L2, ctx)?;
        if let Some(kl) = &curve.kl {
            detections.extend(detect_all(kl, CurveKind::Kl, ctx)?);
        }

        records.push(SweepRecord {
            sweep_id: (job * ctx.types.len() + pos) as u64,
            job,
            prompt_id: base_idx,
            donor_prompt_id: donor.as_ref().map(|(i, _)| *i),
            target: target_kind,
            curve,
            detections,
            composition: ctx
                .cfg
                .experiment
                .emit_compositions
                .then_some(composition)
                .flatten(),
        });
    }

    let done = ctx.progress.fetch_add(1, Ordering::Relaxed) + 1;
    let n = ctx.cfg.experiment.n_perturbations;
    if done.is_multiple_of((n / 10).max(1)) || done == n {
        log::info!("perturbation jobs: {done}/{n}");
    }
    Ok(records)
}

fn draw_base(
    ctx: &RunContext<'_>,
    rng: &mut ChaCha8Rng,
    needs_code: bool,
) -> Result<(u64, Activation, Option<LatentVector>)> {
    for _ in 0..MAX_BASE_ATTEMPTS {
        let idx = rng.gen_range(0..ctx.prompts.len());
        let act = ctx.model.capture_at(&ctx.prompts[idx], &ctx.spec.probe)?;
        if !needs_code {
            return Ok((idx as u64, act, None));
        }
        let code = ctx.sae.encode(&act)?;
        if !code.is_empty() {
            return Ok((idx as u64, act, Some(code)));
        }
    }
    Err(Error::NoUsableBase {
        attempts: MAX_BASE_ATTEMPTS,
    })
}

/// Build the target (sensitivity) or start (plateau) activation of `kind`
/// for this job.
fn build_activation(
    ctx: &RunContext<'_>,
    job: usize,
    kind: TargetKind,
    base_act: &Activation,
    base_code: Option<&LatentVector>,
    donor: Option<&(u64, Activation)>,
) -> Result<(Activation, Option<CompositionReport>)> {
    let seed = ctx.cfg.experiment.master_seed;
    let job = job as u64;
    let code = || base_code.expect("base code drawn for synthetic types");

    let act = match kind {
        TargetKind::ModelGenerated => match ctx.kind {
            // perturb toward another prompt's activation / start from our own
            ExperimentKind::Sensitivity => donor.expect("donor drawn").1.clone(),
            ExperimentKind::Plateau => base_act.clone(),
        },
        TargetKind::Random => {
            let purpose = match ctx.kind {
                ExperimentKind::Sensitivity => Purpose::RandomTarget,
                ExperimentKind::Plateau => Purpose::RandomStart,
            };
            sample_random(ctx.gaussian, &mut job_rng(seed, job, purpose))
        }
        TargetKind::SyntheticRandom => {
            let z = synthesize_random(
                code(),
                ctx.sae.n_latents(),
                &mut job_rng(seed, job, Purpose::SyntheticRandom),
            )?;
            ctx.sae.decode(&z)?
        }
        TargetKind::SyntheticBaseline => {
            let z = synthesize_baseline(
                code(),
                ctx.sparsity,
                &mut job_rng(seed, job, Purpose::SyntheticBaseline),
            )?;
            ctx.sae.decode(&z)?
        }
        TargetKind::SyntheticStructured => {
            let opts = StructuredOpts {
                target_top_cos: ctx.top_cos,
                pool_size: ctx.cfg.experiment.pool_size,
            };
            let (z, report) = synthesize_structured(code(), ctx.sae, ctx.sparsity, &opts)?;
            let act = ctx.sae.decode(&z)?;
            return Ok((act, Some(report)));
        }
        TargetKind::SyntheticStructuredNoCos => {
            let z = synthesize_structured_no_cos(code(), ctx.sae, ctx.sparsity)?;
            ctx.sae.decode(&z)?
        }
        TargetKind::SaeReconstruction => match ctx.kind {
            // reconstruction of the target (sensitivity) or of the start (plateau)
            ExperimentKind::Sensitivity => {
                reconstruct_target(ctx.sae, &donor.expect("donor drawn").1)?
            }
            ExperimentKind::Plateau => reconstruct_target(ctx.sae, base_act)?,
        },
    };
    Ok((act, None))
}

fn detect_all(
    curve: &[f64],
    kind: CurveKind,
    ctx: &RunContext<'_>,
) -> Result<Vec<DetectionRecord>> {
    let sweep = &ctx.cfg.sweep;
    detect_with_params(
        curve,
        kind,
        &super::analyze::AnalyzeParams {
            ap_threshold: sweep.ap_threshold,
            nl_deviation: sweep.nl_deviation,
            auc_denominator: sweep.auc_denominator,
        },
    )
}

pub(crate) fn detect_with_params(
    curve: &[f64],
    kind: CurveKind,
    params: &super::analyze::AnalyzeParams,
) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::with_capacity(4);
    let mut push = |d: StepDetection| {
        out.push(DetectionRecord {
            curve: kind,
            metric: d.metric,
            step: d.step,
            auxiliary: d.auxiliary,
        })
    };
    push(ms_step(curve)?);
    match auc_step_with(curve, params.auc_denominator) {
        Ok(d) => push(d),
        // a base == target sweep is flat zero; report it as censored
        Err(Error::AllZeroCurve) => push(StepDetection {
            metric: Metric::Auc,
            step: None,
            auxiliary: 0.0,
        }),
        Err(e) => return Err(e),
    }
    push(nl_step_with(
        curve,
        params.nl_deviation,
        InitialSlope::FirstDifference,
    )?);
    push(ap_step_with(curve, params.ap_threshold)?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Aggregation and artifacts
// ---------------------------------------------------------------------------

pub(crate) fn aggregate(
    records: &[SweepRecord],
    types: &[TargetKind],
    has_kl: bool,
) -> BTreeMap<(Metric, CurveKind, TargetKind), StepDistribution> {
    let curves: &[CurveKind] = if has_kl {
        &[CurveKind::L2, CurveKind::Kl]
    } else {
        &[CurveKind::L2]
    };
    let mut dists = BTreeMap::new();
    for &curve in curves {
        for metric in Metric::ALL {
            for &t in types {
                dists.insert(
                    (metric, curve, t),
                    StepDistribution::new(format!(
                        "{}_{}_{}",
                        metric.as_str(),
                        curve.as_str(),
                        t.as_str()
                    )),
                );
            }
        }
    }
    for rec in records {
        for d in &rec.detections {
            let dist = dists
                .get_mut(&(d.metric, d.curve, rec.target))
                .expect("all combinations initialized");
            match d.step {
                Some(n) => dist.steps.push(n as u32),
                None => dist.censored_count += 1,
            }
        }
    }
    dists
}

pub(crate) fn build_tables(
    dists: &BTreeMap<(Metric, CurveKind, TargetKind), StepDistribution>,
    has_kl: bool,
) -> Result<Vec<ResultsTable>> {
    let curves: &[CurveKind] = if has_kl {
        &[CurveKind::L2, CurveKind::Kl]
    } else {
        &[CurveKind::L2]
    };
    let mut tables = Vec::new();
    for &curve in curves {
        for metric in Metric::ALL {
            let by_target: BTreeMap<TargetKind, StepDistribution> = dists
                .iter()
                .filter(|((m, c, _), _)| *m == metric && *c == curve)
                .map(|((_, _, t), d)| (*t, d.clone()))
                .collect();
            tables.push(ResultsTable::from_distributions(
                metric,
                curve,
                &by_target,
                TargetKind::ModelGenerated,
            )?);
        }
    }
    Ok(tables)
}

fn write_artifacts(
    cfg: &ExperimentConfig,
    records: &[SweepRecord],
    tables: &[ResultsTable],
    dists: &BTreeMap<(Metric, CurveKind, TargetKind), StepDistribution>,
) -> Result<()> {
    let out = &cfg.files.output;
    fs::create_dir_all(out)?;

    fs::write(
        out.join("run_config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;

    // manifest: one JSON line per sweep
    let mut manifest = String::new();
    for r in records {
        let line = serde_json::to_string(&ManifestRecord {
            sweep_id: r.sweep_id,
            job: r.job,
            prompt_id: r.prompt_id,
            donor_prompt_id: r.donor_prompt_id,
            target_type: r.target.as_str().to_string(),
            base_target_distance: r.curve.base_target_distance,
            master_seed: cfg.experiment.master_seed,
        })?;
        manifest.push_str(&line);
        manifest.push('\n');
    }
    fs::write(out.join("manifest.jsonl"), manifest)?;

    if cfg.experiment.emit_curves {
        let mut w = csv::Writer::from_path(out.join("curves.csv"))?;
        w.write_record(["sweep_id", "step", "l2", "kl"])?;
        for r in records {
            for (step, &l2) in r.curve.l2.iter().enumerate() {
                let kl = r
                    .curve
                    .kl
                    .as_ref()
                    .map_or_else(String::new, |kl| kl[step].to_string());
                w.write_record([r.sweep_id.to_string(), step.to_string(), l2.to_string(), kl])?;
            }
        }
        w.flush()?;
    }

    write_detections_csv(out.join("detections.csv"), records)?;

    if cfg.experiment.emit_compositions {
        let mut lines = String::new();
        for r in records {
            if let Some(c) = &r.composition {
                #[derive(Serialize)]
                struct CompositionLine<'a> {
                    sweep_id: u64,
                    prompt_id: u64,
                    target_type: &'a str,
                    #[serde(flatten)]
                    report: &'a CompositionReport,
                }
                lines.push_str(&serde_json::to_string(&CompositionLine {
                    sweep_id: r.sweep_id,
                    prompt_id: r.prompt_id,
                    target_type: r.target.as_str(),
                    report: c,
                })?);
                lines.push('\n');
            }
        }
        fs::write(out.join("compositions.jsonl"), lines)?;
    }

    for table in tables {
        write_results_csv(out.join(results_csv_name(table.metric, table.curve)), table)?;
    }
    write_results_json(out.join("results.json"), tables)?;

    let plot_dir = out.join("plot");
    for table in tables {
        let by_target: BTreeMap<TargetKind, StepDistribution> = dists
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
    Ok(())
}

pub(crate) fn write_detections_csv(path: PathBuf, records: &[SweepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sweep_id",
        "prompt_id",
        "target_type",
        "curve",
        "base_target_distance",
        "ms_step",
        "ms_censored",
        "ms_aux",
        "auc_step",
        "auc_censored",
        "auc_aux",
        "nl_step",
        "nl_censored",
        "nl_aux",
        "ap_step",
        "ap_censored",
        "ap_aux",
    ])?;
    for r in records {
        let curves: Vec<CurveKind> = {
            let mut c: Vec<CurveKind> = r.detections.iter().map(|d| d.curve).collect();
            c.dedup();
            c
        };
        for curve in curves {
            let mut record = vec![
                r.sweep_id.to_string(),
                r.prompt_id.to_string(),
                r.target.as_str().to_string(),
                curve.as_str().to_string(),
                r.curve.base_target_distance.to_string(),
            ];
            for metric in Metric::ALL {
                let d = r
                    .detections
                    .iter()
                    .find(|d| d.curve == curve && d.metric == metric)
                    .expect("every metric detected per curve");
                record.push(d.step.map_or_else(String::new, |s| s.to_string()));
                record.push((d.step.is_none()).to_string());
                record.push(d.auxiliary.to_string());
            }
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}
