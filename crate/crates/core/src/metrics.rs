//! Curve analytics: the four step detectors (maximum slope, triangle-to-area
//! ratio, deviation from linearity, threshold crossing) and distribution
//! comparison (mean, population standard deviation, two-sample
//! Kolmogorov-Smirnov statistic).
//!
//! Curves are per-step series, so slopes are unit-step finite differences
//! with no smoothing; the auxiliary value each detector records (the max
//! slope, the max ratio, the initial slope, the crossing value) supports
//! post-hoc filtering. Detections that never trigger are censored rather
//! than assigned a sentinel step, and censored entries are excluded from all
//! statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_AP_THRESHOLD: f64 = 20.0;
pub const DEFAULT_NL_DEVIATION: f64 = 0.10;

/// Which detector produced a [`StepDetection`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ms,
    Auc,
    Nl,
    Ap,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Ms, Metric::Auc, Metric::Nl, Metric::Ap];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ms => "ms",
            Metric::Auc => "auc",
            Metric::Nl => "nl",
            Metric::Ap => "ap",
        }
    }
}

/// A detected step, or a censored detection when the condition never
/// triggered within the curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDetection {
    pub metric: Metric,
    /// `None` means censored.
    pub step: Option<usize>,
    /// Metric-specific diagnostic: max slope (MS), max ratio (AUC), initial
    /// slope (NL), crossing value or curve max (AP).
    pub auxiliary: f64,
}

impl StepDetection {
    pub fn is_censored(&self) -> bool {
        self.step.is_none()
    }
}

fn check_curve(curve: &[f64], min_len: usize) -> Result<()> {
    if curve.len() < min_len {
        return Err(Error::CurveTooShort {
            len: curve.len(),
            min: min_len,
        });
    }
    if curve.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCurve);
    }
    Ok(())
}

/// Maximum-slope step: the `n >= 1` maximizing `curve[n] - curve[n-1]`,
/// ties resolved to the smallest `n`.
pub fn ms_step(curve: &[f64]) -> Result<StepDetection> {
    check_curve(curve, 2)?;
    let mut best_n = 1;
    let mut best_slope = curve[1] - curve[0];
    for n in 2..curve.len() {
        let slope = curve[n] - curve[n - 1];
        if slope > best_slope {
            best_slope = slope;
            best_n = n;
        }
    }
    Ok(StepDetection {
        metric: Metric::Ms,
        step: Some(best_n),
        auxiliary: best_slope,
    })
}

/// Which area the AUC ratio divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucDenominator {
    /// Trapezoidal area from step 0 up to the candidate step (default).
    UpToX,
    /// Trapezoidal area of the whole curve.
    FullCurve,
}

/// Triangle-to-area step with the default up-to-x denominator.
pub fn auc_step(curve: &[f64]) -> Result<StepDetection> {
    auc_step_with(curve, AucDenominator::UpToX)
}

/// The `n >= 1` maximizing `(n * curve[n] / 2) / area(curve)`, the triangle
/// with vertices (0,0), (n,0), (n, curve[n]) over the trapezoidal area under
/// the curve. Candidates with a zero denominator are skipped; an all-zero
/// curve has no valid ratio.
pub fn auc_step_with(curve: &[f64], denominator: AucDenominator) -> Result<StepDetection> {
    check_curve(curve, 2)?;
    let full_area = trapezoid_prefix(curve, curve.len() - 1);
    let mut prefix = 0.0f64;
    let mut best: Option<(usize, f64)> = None;
    for n in 1..curve.len() {
        prefix += (curve[n - 1] + curve[n]) / 2.0;
        let denom = match denominator {
            AucDenominator::UpToX => prefix,
            AucDenominator::FullCurve => full_area,
        };
        if denom == 0.0 {
            continue;
        }
        let ratio = (n as f64 * curve[n] / 2.0) / denom;
        match best {
            Some((_, best_ratio)) if ratio <= best_ratio => {}
            _ => best = Some((n, ratio)),
        }
    }
    let (step, ratio) = best.ok_or(Error::AllZeroCurve)?;
    Ok(StepDetection {
        metric: Metric::Auc,
        step: Some(step),
        auxiliary: ratio,
    })
}

fn trapezoid_prefix(curve: &[f64], upto: usize) -> f64 {
    (1..=upto).map(|k| (curve[k - 1] + curve[k]) / 2.0).sum()
}

/// How the initial slope for the NL detector is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSlope {
    /// The first finite difference `curve[1] - curve[0]` (default).
    FirstDifference,
    /// Least-squares slope over steps `0..window`.
    LeastSquares { window: usize },
}

/// Non-linearity step with the default 10% deviation and first-difference
/// initial slope.
pub fn nl_step(curve: &[f64]) -> Result<StepDetection> {
    nl_step_with(curve, DEFAULT_NL_DEVIATION, InitialSlope::FirstDifference)
}

/// The smallest `n >= 2` whose slope deviates from the initial slope by more
/// than `deviation_fraction` of it; censored when the curve stays linear.
/// A vanishing initial slope (below `1e-9 * max|curve|`) makes the relative
/// threshold meaningless, so the detection is censored with the slope kept
/// as the auxiliary diagnostic.
pub fn nl_step_with(
    curve: &[f64],
    deviation_fraction: f64,
    initial: InitialSlope,
) -> Result<StepDetection> {
    check_curve(curve, 3)?;
    let s0 = match initial {
        InitialSlope::FirstDifference => curve[1] - curve[0],
        InitialSlope::LeastSquares { window } => {
            let w = window.clamp(2, curve.len());
            least_squares_slope(&curve[..w])
        }
    };
    let scale = curve.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if s0.abs() < 1e-9 * scale {
        return Ok(StepDetection {
            metric: Metric::Nl,
            step: None,
            auxiliary: s0,
        });
    }
    let tolerance = deviation_fraction * s0.abs();
    let step = (2..curve.len()).find(|&n| ((curve[n] - curve[n - 1]) - s0).abs() > tolerance);
    Ok(StepDetection {
        metric: Metric::Nl,
        step,
        auxiliary: s0,
    })
}

fn least_squares_slope(points: &[f64]) -> f64 {
    let n = points.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let y_mean = points.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &y) in points.iter().enumerate() {
        let dt = t as f64 - t_mean;
        num += dt * (y - y_mean);
        den += dt * dt;
    }
    num / den
}

/// Threshold-crossing step with the default threshold of 20.
pub fn ap_step(curve: &[f64]) -> Result<StepDetection> {
    ap_step_with(curve, DEFAULT_AP_THRESHOLD)
}

/// The smallest `n` with `curve[n] > threshold`; censored when the curve
/// never crosses. Requires `curve[0] < threshold`. Unlike the other
/// detectors this one is deliberately not scale-invariant.
pub fn ap_step_with(curve: &[f64], threshold: f64) -> Result<StepDetection> {
    check_curve(curve, 1)?;
    if curve[0] >= threshold {
        return Err(Error::ApPrecondition {
            first: curve[0],
            threshold,
        });
    }
    let step = curve.iter().position(|&v| v > threshold);
    let auxiliary = match step {
        Some(n) => curve[n],
        None => curve.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
    };
    Ok(StepDetection {
        metric: Metric::Ap,
        step,
        auxiliary,
    })
}

// ---------------------------------------------------------------------------
// Step distributions
// ---------------------------------------------------------------------------

/// A multiset of detected steps for one experimental condition, plus the
/// count of censored sweeps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDistribution {
    pub label: String,
    pub steps: Vec<u32>,
    pub censored_count: usize,
}

impl StepDistribution {
    pub fn new(label: impl Into<String>) -> Self {
        StepDistribution {
            label: label.into(),
            steps: Vec::new(),
            censored_count: 0,
        }
    }

    pub fn push(&mut self, detection: &StepDetection) {
        match detection.step {
            Some(n) => self.steps.push(n as u32),
            None => self.censored_count += 1,
        }
    }

    /// Detected plus censored sweeps.
    pub fn total(&self) -> usize {
        self.steps.len() + self.censored_count
    }
}

/// Two-sample Kolmogorov-Smirnov statistic: the supremum of the absolute
/// difference between the two empirical CDFs.
pub fn ks_statistic(a: &StepDistribution, b: &StepDistribution) -> Result<f64> {
    if a.steps.is_empty() || b.steps.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let mut xs = a.steps.clone();
    let mut ys = b.steps.clone();
    xs.sort_unstable();
    ys.sort_unstable();
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup = 0.0f64;
    while i < xs.len() || j < ys.len() {
        let v = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < xs.len() && xs[i] == v {
            i += 1;
        }
        while j < ys.len() && ys[j] == v {
            j += 1;
        }
        let diff = (i as f64 / na - j as f64 / nb).abs();
        if diff > sup {
            sup = diff;
        }
    }
    Ok(sup)
}

/// Mean and population standard deviation over the uncensored steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistStats {
    pub mean: f64,
    pub std_dev: f64,
    pub count: usize,
    pub censored_count: usize,
}

pub fn dist_stats(d: &StepDistribution) -> Result<DistStats> {
    if d.steps.is_empty() {
        return Err(if d.censored_count > 0 {
            Error::AllCensored
        } else {
            Error::EmptyDistribution
        });
    }
    let n = d.steps.len() as f64;
    let mean = d.steps.iter().map(|&s| s as f64).sum::<f64>() / n;
    let var = d
        .steps
        .iter()
        .map(|&s| {
            let c = s as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / n;
    Ok(DistStats {
        mean,
        std_dev: var.sqrt(),
        count: d.steps.len(),
        censored_count: d.censored_count,
    })
}
