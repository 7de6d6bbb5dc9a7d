//! Perturbation sweeps.
//!
//! A sweep walks from a base activation toward a target activation in
//! `steps` increments, patches each intermediate point into the residual
//! stream at the probe hook, and records the L2 distance of the read-hook
//! activation from a fixed reference run (plus, optionally, the KL
//! divergence of the next-token distribution).
//!
//! Two step rules:
//!
//! * absolute: `base + step_size * n * D` with `D` the unit vector toward
//!   the target; with the defaults (100 steps of 0.5) the total perturbation
//!   length is comparable to typical activation norms;
//! * relative: linear interpolation `(1 - n/steps) * base + (n/steps) * target`,
//!   which reaches the target exactly at the final step regardless of
//!   distance.
//!
//! For [`run_sweep`] the reference is the unpatched run of the prompt, so a
//! base captured at the probe gives `l2[0] = 0` exactly. For
//! [`plateau_sweep`] the start activation may be synthetic; it is installed
//! by patching at the probe, and the reference is that start-patched run, so
//! `l2[0] = 0` again by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, HookPoint, Model, PatchSpec};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_STEP_SIZE: f32 = 0.5;
pub const DEFAULT_PROBE_LAYER: usize = 1;
pub const DEFAULT_READ_LAYER: usize = 11;

/// Absolute (fixed step size along the unit direction) or relative (linear
/// interpolation) stepping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Absolute,
    Relative,
}

/// Where and how a sweep perturbs and reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub mode: StepMode,
    pub steps: usize,
    /// Only meaningful in absolute mode.
    pub step_size: f32,
    pub probe: HookPoint,
    pub read: HookPoint,
    /// Read the raw block output (false, default) or pass it through the
    /// final LayerNorm first.
    pub read_after_final_ln: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            mode: StepMode::Absolute,
            steps: DEFAULT_STEPS,
            step_size: DEFAULT_STEP_SIZE,
            probe: HookPoint::resid_pre(DEFAULT_PROBE_LAYER),
            read: HookPoint::resid_post(DEFAULT_READ_LAYER),
            read_after_final_ln: false,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::BadSweepSpec("steps must be >= 1".into()));
        }
        if self.mode == StepMode::Absolute && !(self.step_size > 0.0 && self.step_size.is_finite())
        {
            return Err(Error::BadSweepSpec(format!(
                "absolute mode needs a positive step size, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Direction of the KL readout. `BaseFromPerturbed` is
/// `KL(unperturbed || perturbed)`: how badly the perturbed model's
/// distribution covers the base behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    BaseFromPerturbed,
    PerturbedFromBase,
}

/// Which readouts a sweep records. L2 distance is always on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadoutSpec {
    pub kl: bool,
    pub kl_direction: KlDirection,
}

impl Default for ReadoutSpec {
    fn default() -> Self {
        ReadoutSpec {
            kl: false,
            kl_direction: KlDirection::BaseFromPerturbed,
        }
    }
}

impl ReadoutSpec {
    pub fn with_kl() -> Self {
        ReadoutSpec {
            kl: true,
            ..Default::default()
        }
    }
}

/// Per-step readout series for one perturbation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCurve {
    pub l2: Vec<f64>,
    pub kl: Option<Vec<f64>>,
    pub base_target_distance: f64,
    pub prompt_id: u64,
    pub label: String,
}

/// The perturbed activation at step `n`.
///
/// Step 0 returns the base bitwise and, in relative mode, the final step
/// returns the target bitwise.
pub fn perturbed_point(
    base: &Activation,
    target: &Activation,
    spec: &SweepSpec,
    n: usize,
) -> Result<Activation> {
    spec.validate()?;
    if base.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: base.len(),
            got: target.len(),
        });
    }
    if n > spec.steps {
        return Err(Error::BadParameter(format!(
            "step index {n} exceeds sweep length {}",
            spec.steps
        )));
    }
    if n == 0 {
        return Ok(base.clone());
    }
    match spec.mode {
        StepMode::Absolute => {
            let dist = base.l2_distance(target);
            if dist == 0.0 {
                return Err(Error::ZeroDirection);
            }
            let scale = spec.step_size * n as f32 / dist as f32;
            let values = base.values() + &((target.values() - base.values()) * scale);
            Ok(Activation::new(values))
        }
        StepMode::Relative => {
            if n == spec.steps || base == target {
                return Ok(target.clone());
            }
            let t = n as f32 / spec.steps as f32;
            let values = base.values() * (1.0 - t) + target.values() * t;
            Ok(Activation::new(values))
        }
    }
}

/// Stabilized softmax log-probabilities in f64.
fn log_softmax(logits: &ndarray::Array1<f32>) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let lse = logits
        .iter()
        .map(|&l| (l as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&l| l as f64 - lse).collect()
}

/// `KL(p || q)` from log-probabilities; clamped at zero against rounding.
fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p
        .iter()
        .zip(log_q.iter())
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum();
    kl.max(0.0)
}

struct ReferenceRun {
    read: Activation,
    log_probs: Option<Vec<f64>>,
}

struct SweepRunner<'m> {
    model: &'m Model,
    spec: &'m SweepSpec,
    readouts: ReadoutSpec,
    state: crate::model::ResidState,
}

impl<'m> SweepRunner<'m> {
    fn new(
        model: &'m Model,
        tokens: &[u32],
        spec: &'m SweepSpec,
        readouts: ReadoutSpec,
    ) -> Result<Self> {
        spec.validate()?;
        // resume from the probe layer; everything below it is unaffected by
        // the patch
        let state = model.state_at(tokens, spec.probe.layer)?;
        Ok(SweepRunner {
            model,
            spec,
            readouts,
            state,
        })
    }

    fn run_once(&self, patch: Option<&PatchSpec>) -> Result<(Activation, Option<Vec<f64>>)> {
        let mut out = self.model.forward_from(
            &self.state,
            patch,
            std::slice::from_ref(&self.spec.read),
            self.readouts.kl,
        )?;
        let mut read = out.take(&self.spec.read)?;
        if self.spec.read_after_final_ln {
            read = self.model.apply_final_ln(&read);
        }
        let log_probs = out.logits.as_ref().map(log_softmax);
        Ok((read, log_probs))
    }

    fn reference(&self, patch: Option<&PatchSpec>) -> Result<ReferenceRun> {
        let (read, log_probs) = self.run_once(patch)?;
        Ok(ReferenceRun { read, log_probs })
    }

    fn sweep(
        &self,
        reference: &ReferenceRun,
        base: &Activation,
        target: &Activation,
    ) -> Result<SweepCurve> {
        let steps = self.spec.steps;
        let mut l2 = Vec::with_capacity(steps + 1);
        let mut kl = self.readouts.kl.then(|| Vec::with_capacity(steps + 1));
        for n in 0..=steps {
            let point = perturbed_point(base, target, self.spec, n)?;
            let patch = PatchSpec::new(self.spec.probe, point);
            let (read, log_probs) = self.run_once(Some(&patch))?;
            let dist = reference.read.l2_distance(&read);
            if !dist.is_finite() {
                return Err(Error::NonFiniteReadout { step: n });
            }
            l2.push(dist);
            if let Some(kl) = kl.as_mut() {
                let (ref_lp, pert_lp) = (
                    reference.log_probs.as_ref().expect("kl requested"),
                    log_probs.as_ref().expect("kl requested"),
                );
                let v = match self.readouts.kl_direction {
                    KlDirection::BaseFromPerturbed => kl_divergence(ref_lp, pert_lp),
                    KlDirection::PerturbedFromBase => kl_divergence(pert_lp, ref_lp),
                };
                if !v.is_finite() {
                    return Err(Error::NonFiniteReadout { step: n });
                }
                kl.push(v);
            }
        }
        Ok(SweepCurve {
            l2,
            kl,
            base_target_distance: base.l2_distance(target),
            prompt_id: 0,
            label: String::new(),
        })
    }
}

/// Sweep from a base activation (normally the one the prompt produced at the
/// probe hook) toward a target. The readout reference is the unpatched run.
pub fn run_sweep(
    model: &Model,
    tokens: &[u32],
    base: &Activation,
    target: &Activation,
    spec: &SweepSpec,
    readouts: ReadoutSpec,
) -> Result<SweepCurve> {
    let runner = SweepRunner::new(model, tokens, spec, readouts)?;
    let reference = runner.reference(None)?;
    runner.sweep(&reference, base, target)
}

/// Sweep from an arbitrary start activation (model-generated, synthetic, or
/// random) toward a target. The start is installed by patching it at the
/// probe, and the readout reference is that start-patched run, so the curve
/// measures drift from the start itself.
pub fn plateau_sweep(
    model: &Model,
    tokens: &[u32],
    start: &Activation,
    target: &Activation,
    spec: &SweepSpec,
    readouts: ReadoutSpec,
) -> Result<SweepCurve> {
    let runner = SweepRunner::new(model, tokens, spec, readouts)?;
    let start_patch = PatchSpec::new(spec.probe, start.clone());
    let reference = runner.reference(Some(&start_patch))?;
    runner.sweep(&reference, start, target)
}

#[cfg(test)]
mod tests;
