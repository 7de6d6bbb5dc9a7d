//! Command-line runner for the perturbation laboratory.
//!
//! Every subcommand takes `--config <file.toml>` plus flag overrides; see
//! the repository README for the config schema and output formats. Exit
//! codes: 0 success, 2 config, 3 i/o, 4 data, 5 usage, 6 numeric.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use perturb_lab::error::Error;
use perturb_lab::harness::{
    self, AnalyzeParams, ExperimentConfig, ExperimentKind, RunSummary, TargetKind,
};
use perturb_lab::metrics::AucDenominator;
use perturb_lab::model::Model;
use perturb_lab::sae::SaeParams;
use perturb_lab::tokens;

#[derive(Parser)]
#[command(
    name = "perturb-lab",
    version,
    about = "Residual-stream perturbation experiments over a GPT-2-family model and a sparse autoencoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long, short = 'c')]
    config: PathBuf,

    /// Override the output directory.
    #[arg(long)]
    output: Option<PathBuf>,

    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the worker count (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,

    /// Override the number of perturbations.
    #[arg(long, short = 'n')]
    n: Option<usize>,

    /// Override the target types (comma-separated names).
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<String>>,

    /// Override the sweep step count.
    #[arg(long)]
    steps: Option<usize>,

    /// Override the absolute-mode step size.
    #[arg(long)]
    step_size: Option<f32>,

    /// Sweep mode: absolute or relative.
    #[arg(long)]
    mode: Option<String>,

    /// Disable the KL readout.
    #[arg(long)]
    no_kl: bool,

    /// Override the plateau-step threshold.
    #[arg(long)]
    ap_threshold: Option<f64>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(out) = &self.output {
            cfg.files.output = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.experiment.master_seed = seed;
        }
        if let Some(workers) = self.workers {
            cfg.experiment.workers = workers;
        }
        if let Some(n) = self.n {
            cfg.experiment.n_perturbations = n;
        }
        if let Some(targets) = &self.targets {
            cfg.experiment.target_types = targets
                .iter()
                .map(|s| TargetKind::from_str_name(s))
                .collect::<Result<_, _>>()?;
        }
        if let Some(steps) = self.steps {
            cfg.sweep.steps = steps;
        }
        if let Some(step_size) = self.step_size {
            cfg.sweep.step_size = step_size;
        }
        if let Some(mode) = &self.mode {
            cfg.sweep.mode = match mode.as_str() {
                "absolute" => perturb_lab::perturb::StepMode::Absolute,
                "relative" => perturb_lab::perturb::StepMode::Relative,
                other => {
                    return Err(Error::BadExperimentConfig(format!(
                        "unknown sweep mode `{other}` (absolute|relative)"
                    )))
                }
            };
        }
        if self.no_kl {
            cfg.sweep.kl = false;
        }
        if let Some(t) = self.ap_threshold {
            cfg.sweep.ap_threshold = t;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute and store the warm-up bundle: activation moments, the
    /// sparsity table, and summary statistics.
    Collect(CommonArgs),

    /// Latent property report: active counts, norm concentration by rank,
    /// and decoder-cosine geometry.
    ReportLatents {
        #[command(flatten)]
        common: CommonArgs,

        /// How many activations to aggregate.
        #[arg(long, default_value_t = harness::DEFAULT_REPORT_SAMPLES)]
        samples: usize,
    },

    /// Directional sensitivity: perturb base activations toward each target
    /// type and compare blowup-step distributions.
    Sensitivity(CommonArgs),

    /// Activation plateaus: start at each activation type and perturb
    /// toward random activations, comparing threshold-crossing steps.
    Plateau(CommonArgs),

    /// Re-run the step detectors over a saved run's curves.
    Analyze {
        /// Directory of a finished run (needs curves.csv + manifest.jsonl).
        #[arg(long)]
        run_dir: PathBuf,

        /// Where to write the re-analysis (defaults to <run_dir>/reanalysis).
        #[arg(long)]
        output: Option<PathBuf>,

        #[arg(long, default_value_t = perturb_lab::metrics::DEFAULT_AP_THRESHOLD)]
        ap_threshold: f64,

        #[arg(long, default_value_t = perturb_lab::metrics::DEFAULT_NL_DEVIATION)]
        nl_deviation: f64,

        /// AUC ratio denominator: up_to_x or full_curve.
        #[arg(long, default_value = "up_to_x")]
        auc_denominator: String,
    },
}

fn print_summary(summary: &RunSummary) {
    println!(
        "{} experiment: {} perturbations x {} types -> {}",
        match summary.kind {
            ExperimentKind::Sensitivity => "sensitivity",
            ExperimentKind::Plateau => "plateau",
        },
        summary.n_perturbations,
        summary.target_types.len(),
        summary.output_dir.display()
    );
    println!();
    print!("{}", summary.headline().render_text());
    println!(
        "full tables: {}",
        summary.output_dir.join("results.json").display()
    );
}

fn run_command(command: &Command) -> Result<(), Error> {
    match command {
        Command::Collect(common) => {
            let cfg = common.load()?;
            cfg.validate()?;
            let model = Model::load(&cfg.files.model, cfg.model.clone())?;
            let sae = SaeParams::load(&cfg.files.sae)?;
            let raw = tokens::read_token_file(&cfg.files.tokens)?;
            let prompts: Vec<Vec<u32>> = raw
                .iter()
                .filter(|p| p.len() >= cfg.experiment.prompt_len)
                .map(|p| p[..cfg.experiment.prompt_len].to_vec())
                .collect();
            let warm = harness::warmup(&cfg, &model, &sae, &prompts)?;
            warm.write_to(&cfg.files.output)?;
            println!(
                "collected {} activations: mean norm {:.3}, mean pair cosine about b_dec {:.4}",
                warm.stats.moment_samples_used,
                warm.stats.mean_activation_norm,
                warm.stats.mean_pair_cos_about_bias
            );
            println!(
                "wrote moments.bin, sparsity.bin(+.json), stats.json to {}",
                cfg.files.output.display()
            );
            Ok(())
        }
        Command::ReportLatents { common, samples } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let model = Model::load(&cfg.files.model, cfg.model.clone())?;
            let sae = SaeParams::load(&cfg.files.sae)?;
            let raw = tokens::read_token_file(&cfg.files.tokens)?;
            let prompts: Vec<Vec<u32>> = raw
                .iter()
                .filter(|p| p.len() >= cfg.experiment.prompt_len)
                .map(|p| p[..cfg.experiment.prompt_len].to_vec())
                .collect();
            let hook = cfg.sweep_spec().probe;
            let report = harness::latent_property_report(&model, &sae, &prompts, *samples, &hook)?;
            harness::write_latent_report(&cfg.files.output, &report)?;
            println!(
                "latent report over {} activations ({} with empty codes):",
                report.sample_count, report.zero_active_count
            );
            println!("  mean active latents     {:.2}", report.mean_active_count);
            println!(
                "  top-rank norm fraction  {:.1}% (L1), next {:.1}%",
                report.norm_fraction_by_rank_l1[0] * 100.0,
                report.norm_fraction_by_rank_l1[1] * 100.0
            );
            println!(
                "  mean pairwise cosine    {:.4}",
                report.pairwise_cosine.mean
            );
            println!(
                "  mean top-latent cosine  {:.4}",
                report.top_latent_cosine.mean
            );
            println!(
                "  mean activation norm    {:.2}",
                report.mean_activation_norm
            );
            println!(
                "  mean pair cos (b_dec)   {:.4}",
                report.mean_pair_cos_about_bias
            );
            println!("files under {}", cfg.files.output.display());
            Ok(())
        }
        Command::Sensitivity(common) => {
            let mut cfg = common.load()?;
            cfg.experiment.kind = ExperimentKind::Sensitivity;
            let summary = harness::run_sensitivity(&cfg)?;
            print_summary(&summary);
            Ok(())
        }
        Command::Plateau(common) => {
            let mut cfg = common.load()?;
            cfg.experiment.kind = ExperimentKind::Plateau;
            let summary = harness::run_plateau(&cfg)?;
            print_summary(&summary);
            Ok(())
        }
        Command::Analyze {
            run_dir,
            output,
            ap_threshold,
            nl_deviation,
            auc_denominator,
        } => {
            let denom = match auc_denominator.as_str() {
                "up_to_x" => AucDenominator::UpToX,
                "full_curve" => AucDenominator::FullCurve,
                other => {
                    return Err(Error::BadExperimentConfig(format!(
                        "unknown auc denominator `{other}` (up_to_x|full_curve)"
                    )))
                }
            };
            let out = output.clone().unwrap_or_else(|| run_dir.join("reanalysis"));
            let params = AnalyzeParams {
                ap_threshold: *ap_threshold,
                nl_deviation: *nl_deviation,
                auc_denominator: denom,
            };
            let summary = harness::analyze_run(run_dir, &out, &params)?;
            print_summary(&summary);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run_command(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error ({}): {e}", category.as_str());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
