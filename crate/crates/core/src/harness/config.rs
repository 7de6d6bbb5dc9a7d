//! Experiment configuration.
//!
//! Experiments are driven by a TOML file with four sections (`[files]`,
//! `[model]`, `[experiment]`, `[sweep]`), all but `[files]` optional, plus
//! CLI flag overrides applied by the caller after parsing. The full key
//! reference lives in the repository README.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::AucDenominator;
use crate::model::{HookPoint, ModelConfig, Site};
use crate::perturb::{KlDirection, ReadoutSpec, StepMode, SweepSpec};

/// The seven activation types an experiment can perturb toward (sensitivity)
/// or start from (plateau).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    ModelGenerated,
    Random,
    SyntheticRandom,
    SyntheticBaseline,
    SyntheticStructured,
    SyntheticStructuredNoCos,
    SaeReconstruction,
}

impl TargetKind {
    pub const ALL: [TargetKind; 7] = [
        TargetKind::ModelGenerated,
        TargetKind::Random,
        TargetKind::SyntheticRandom,
        TargetKind::SyntheticBaseline,
        TargetKind::SyntheticStructured,
        TargetKind::SyntheticStructuredNoCos,
        TargetKind::SaeReconstruction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::ModelGenerated => "model_generated",
            TargetKind::Random => "random",
            TargetKind::SyntheticRandom => "synthetic_random",
            TargetKind::SyntheticBaseline => "synthetic_baseline",
            TargetKind::SyntheticStructured => "synthetic_structured",
            TargetKind::SyntheticStructuredNoCos => "synthetic_structured_no_cos",
            TargetKind::SaeReconstruction => "sae_reconstruction",
        }
    }

    pub fn from_str_name(s: &str) -> Result<Self> {
        TargetKind::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::BadExperimentConfig(format!("unknown target type `{s}`")))
    }

    /// Whether building this type needs the base activation's SAE code.
    pub fn needs_base_code(self) -> bool {
        matches!(
            self,
            TargetKind::SyntheticRandom
                | TargetKind::SyntheticBaseline
                | TargetKind::SyntheticStructured
                | TargetKind::SyntheticStructuredNoCos
        )
    }

    /// Whether building this type needs a donor prompt's activation.
    pub fn needs_donor(self) -> bool {
        matches!(
            self,
            TargetKind::ModelGenerated | TargetKind::SaeReconstruction
        )
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Perturb real base activations toward each target type.
    Sensitivity,
    /// Start at each activation type and perturb toward random activations.
    Plateau,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Sensitivity => "sensitivity",
            ExperimentKind::Plateau => "plateau",
        }
    }
}

/// A knob that is either derived from data or pinned to a number
/// (`"auto"` or a float in the TOML).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AutoOr {
    Auto,
    Fixed(f64),
}

impl AutoOr {
    pub fn resolve(self, auto_value: f64) -> f64 {
        match self {
            AutoOr::Auto => auto_value,
            AutoOr::Fixed(v) => v,
        }
    }
}

impl Serialize for AutoOr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AutoOr::Auto => s.serialize_str("auto"),
            AutoOr::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AutoOr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = AutoOr;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"auto\" or a number")
            }

            fn visit_str<E: serde::de::Error>(self, s: &str) -> std::result::Result<AutoOr, E> {
                if s == "auto" {
                    Ok(AutoOr::Auto)
                } else {
                    Err(E::custom(format!(
                        "expected \"auto\" or a number, got `{s}`"
                    )))
                }
            }

            fn visit_f64<E>(self, v: f64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Fixed(v))
            }

            fn visit_i64<E>(self, v: i64) -> std::result::Result<AutoOr, E> {
                Ok(AutoOr::Fixed(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilesSection {
    pub model: PathBuf,
    pub sae: PathBuf,
    pub tokens: PathBuf,
    pub output: PathBuf,
    /// Warm-up cache directory; defaults to `<output>/cache`.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub n_perturbations: usize,
    pub target_types: Vec<TargetKind>,
    pub master_seed: u64,
    /// 0 lets the thread pool pick.
    pub workers: usize,
    pub prompt_len: usize,
    pub moment_samples: usize,
    pub sparsity_samples: usize,
    /// Top-latent cosine target; `"auto"` re-estimates the mean pairwise
    /// activation cosine about the decoder bias from data.
    pub top_cos_target: AutoOr,
    pub pool_size: usize,
    /// Covariance ridge; `"auto"` uses 1e-4 of the mean diagonal variance.
    pub ridge: AutoOr,
    pub emit_curves: bool,
    pub emit_compositions: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            kind: ExperimentKind::Sensitivity,
            n_perturbations: 1000,
            target_types: TargetKind::ALL.to_vec(),
            master_seed: 0,
            workers: 0,
            prompt_len: 10,
            moment_samples: 32_000,
            sparsity_samples: 32_000,
            top_cos_target: AutoOr::Auto,
            pool_size: crate::composer::DEFAULT_POOL_SIZE,
            ridge: AutoOr::Auto,
            emit_curves: true,
            emit_compositions: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub mode: StepMode,
    pub steps: usize,
    pub step_size: f32,
    pub probe_layer: usize,
    pub probe_site: Site,
    pub read_layer: usize,
    pub read_site: Site,
    /// Token position for both hooks; negative counts from the end.
    pub position: i64,
    pub read_after_final_ln: bool,
    pub kl: bool,
    pub kl_direction: KlDirection,
    pub ap_threshold: f64,
    pub nl_deviation: f64,
    pub auc_denominator: AucDenominator,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            mode: StepMode::Absolute,
            steps: crate::perturb::DEFAULT_STEPS,
            step_size: crate::perturb::DEFAULT_STEP_SIZE,
            probe_layer: crate::perturb::DEFAULT_PROBE_LAYER,
            probe_site: Site::ResidPre,
            read_layer: crate::perturb::DEFAULT_READ_LAYER,
            read_site: Site::ResidPost,
            position: -1,
            read_after_final_ln: false,
            kl: true,
            kl_direction: KlDirection::BaseFromPerturbed,
            ap_threshold: crate::metrics::DEFAULT_AP_THRESHOLD,
            nl_deviation: crate::metrics::DEFAULT_NL_DEVIATION,
            auc_denominator: AucDenominator::UpToX,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub files: FilesSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Target types in canonical order, deduplicated.
    pub fn target_types(&self) -> Vec<TargetKind> {
        let mut types = self.experiment.target_types.clone();
        types.sort();
        types.dedup();
        types
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            mode: self.sweep.mode,
            steps: self.sweep.steps,
            step_size: self.sweep.step_size,
            probe: HookPoint {
                layer: self.sweep.probe_layer,
                site: self.sweep.probe_site,
                position: self.sweep.position,
            },
            read: HookPoint {
                layer: self.sweep.read_layer,
                site: self.sweep.read_site,
                position: self.sweep.position,
            },
            read_after_final_ln: self.sweep.read_after_final_ln,
        }
    }

    pub fn readout_spec(&self) -> ReadoutSpec {
        ReadoutSpec {
            kl: self.sweep.kl,
            kl_direction: self.sweep.kl_direction,
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.files
            .cache
            .clone()
            .unwrap_or_else(|| self.files.output.join("cache"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sweep_spec().validate()?;
        let e = &self.experiment;
        if e.n_perturbations < 1 {
            return Err(Error::BadExperimentConfig(
                "n_perturbations must be >= 1".into(),
            ));
        }
        if self.target_types().is_empty() {
            return Err(Error::EmptyTargetTypes);
        }
        if !self.target_types().contains(&TargetKind::ModelGenerated) {
            return Err(Error::MissingReferenceType);
        }
        if e.prompt_len < 1 {
            return Err(Error::BadExperimentConfig("prompt_len must be >= 1".into()));
        }
        if e.moment_samples < 2 || e.sparsity_samples < 1 {
            return Err(Error::BadExperimentConfig(
                "moment_samples must be >= 2 and sparsity_samples >= 1".into(),
            ));
        }
        if e.pool_size < 1 {
            return Err(Error::BadExperimentConfig("pool_size must be >= 1".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if let AutoOr::Fixed(r) = e.ridge {
            if !positive(r) {
                return Err(Error::BadExperimentConfig("ridge must be positive".into()));
            }
        }
        if !positive(self.sweep.ap_threshold) {
            return Err(Error::BadExperimentConfig(
                "ap_threshold must be positive".into(),
            ));
        }
        if !positive(self.sweep.nl_deviation) {
            return Err(Error::BadExperimentConfig(
                "nl_deviation must be positive".into(),
            ));
        }
        for (name, layer) in [
            ("probe", self.sweep.probe_layer),
            ("read", self.sweep.read_layer),
        ] {
            if layer >= self.model.n_layers {
                return Err(Error::BadExperimentConfig(format!(
                    "{name}_layer {layer} out of range for a {}-layer model",
                    self.model.n_layers
                )));
            }
        }
        Ok(())
    }
}
