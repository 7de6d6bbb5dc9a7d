//! Target-activation construction.
//!
//! Every activation type the experiments perturb toward is built here:
//!
//! * **random**: a draw from a Gaussian with the mean and covariance of
//!   model-generated activations ([`fit_gaussian`] / [`sample_random`]);
//! * **synthetic-random**: the base code's values reassigned to uniformly
//!   drawn latents ([`synthesize_random`]);
//! * **synthetic-baseline**: each active latent replaced by one of its 10
//!   most similarly-sparse neighbours ([`synthesize_baseline`]);
//! * **synthetic-structured**: sparsity matching for the top latent plus
//!   decoder-cosine matching against it for the rest
//!   ([`synthesize_structured`], [`synthesize_structured_no_cos`]);
//! * **sae-reconstruction**: decode(encode(target)) ([`reconstruct_target`]).
//!
//! All compositions conserve the base code's value multiset and active-latent
//! count, never pick duplicate latents, and (for the baseline/structured
//! variants) never pick dead latents. Replacements are assigned in descending
//! base-value order so the most important latents match first.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Activation;
use crate::sae::{LatentVector, SaeParams, SparsityTable};

/// Baseline replacements draw from this many nearest-sparsity neighbours.
pub const BASELINE_NEIGHBORS: usize = 10;

/// Default decoder-cosine target between the synthetic top latent and the
/// base top latent, and the default candidate-pool size. The cosine constant
/// is normally re-estimated from data; this value is the configured
/// fallback.
pub const DEFAULT_TOP_COS: f64 = 0.42;
pub const DEFAULT_POOL_SIZE: usize = 100;

// ---------------------------------------------------------------------------
// Gaussian baseline
// ---------------------------------------------------------------------------

/// Mean and Cholesky factor of the (ridge-regularized) covariance of a set
/// of activations, kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl GaussianModel {
    pub fn from_parts(mean: DVector<f64>, chol: DMatrix<f64>) -> Result<Self> {
        if chol.nrows() != mean.len() || chol.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: chol.nrows(),
            });
        }
        Ok(GaussianModel { mean, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// The covariance this model reproduces (`L L^T`).
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    /// `mean + L z` with `z` standard normal; deterministic given the
    /// generator state.
    pub fn sample(&self, rng: &mut impl Rng) -> Activation {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &self.mean + &self.chol * z;
        Activation::from_vec(x.iter().map(|&v| v as f32).collect())
    }

    /// Flat binary: a little-endian u64 dimension, then the mean, then the
    /// row-major factor, all little-endian f64.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let d = self.dim();
        let mut f = fs::File::create(path)?;
        f.write_all(&(d as u64).to_le_bytes())?;
        for v in self.mean.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        for i in 0..d {
            for j in 0..d {
                f.write_all(&self.chol[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let bad = |reason: &str| Error::BadTensorFile {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 8 {
            return Err(bad("missing dimension header"));
        }
        let d = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let expected = 8 + 8 * (d + d * d);
        if bytes.len() != expected {
            return Err(bad(&format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut vals = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mean = DVector::from_iterator(d, vals.by_ref().take(d));
        let chol = DMatrix::from_row_iterator(d, d, vals);
        GaussianModel::from_parts(mean, chol)
    }
}

/// Sample mean and Cholesky factor of `SampleCov + ridge * I`.
pub fn fit_gaussian(activations: &[Activation], ridge: f64) -> Result<GaussianModel> {
    if activations.is_empty() {
        return Err(Error::NoActivations);
    }
    if !(ridge.is_finite() && ridge > 0.0) {
        return Err(Error::BadParameter(format!(
            "ridge must be positive, got {ridge}"
        )));
    }
    let d = activations[0].len();
    let n = activations.len();
    for a in activations {
        if a.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: a.len(),
            });
        }
    }

    let mut mean = DVector::zeros(d);
    for a in activations {
        for (m, &v) in mean.iter_mut().zip(a.values().iter()) {
            *m += v as f64;
        }
    }
    mean /= n as f64;

    let centered = DMatrix::from_fn(n, d, |i, j| activations[i].values()[j] as f64 - mean[j]);
    let mut cov = centered.transpose() * &centered;
    cov /= (n - 1).max(1) as f64;
    for i in 0..d {
        cov[(i, i)] += ridge;
    }

    let chol = Cholesky::new(cov).ok_or(Error::CholeskyFailure)?.unpack();
    GaussianModel::from_parts(mean, chol)
}

/// The default ridge: `1e-4` times the mean diagonal variance, floored at
/// `1e-8` so degenerate samples still factor.
pub fn auto_ridge(activations: &[Activation]) -> Result<f64> {
    if activations.is_empty() {
        return Err(Error::NoActivations);
    }
    let d = activations[0].len();
    let n = activations.len();
    let mut mean = vec![0.0f64; d];
    for a in activations {
        for (m, &v) in mean.iter_mut().zip(a.values().iter()) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var_sum = 0.0f64;
    for a in activations {
        for (j, &v) in a.values().iter().enumerate() {
            let c = v as f64 - mean[j];
            var_sum += c * c;
        }
    }
    let mean_diag_var = var_sum / ((n - 1).max(1) as f64) / d as f64;
    Ok((1e-4 * mean_diag_var).max(1e-8))
}

/// A random target: one draw from the fitted Gaussian.
pub fn sample_random(g: &GaussianModel, rng: &mut impl Rng) -> Activation {
    g.sample(rng)
}

// ---------------------------------------------------------------------------
// Synthetic compositions
// ---------------------------------------------------------------------------

/// One replacement decision made while composing a synthetic activation.
#[derive(Debug, Clone, Serialize)]
pub struct LatentMatch {
    pub base_latent: u32,
    pub chosen_latent: u32,
    pub value: f32,
    pub target_cosine: f64,
    pub achieved_cosine: f64,
}

/// Audit trail for one structured composition.
#[derive(Debug, Clone, Serialize)]
pub struct CompositionReport {
    /// The chosen latents with their (conserved) values.
    pub chosen: LatentVector,
    /// The decoded synthetic activation.
    pub target: Activation,
    /// Per-latent cosine targets and what the nearest candidate achieved;
    /// one entry per base latent, top first.
    pub latent_matches: Vec<LatentMatch>,
    /// L2 distance between the decoded target and the decoded base code.
    pub distance_from_base: f64,
}

/// Base entries sorted by descending value, ties toward the smaller index.
/// The first element is the top latent.
fn by_value_desc(base: &LatentVector) -> Vec<(u32, f32)> {
    let mut order: Vec<(u32, f32)> = base.iter().collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    order
}

fn check_base(base: &LatentVector, n_latents: usize) -> Result<()> {
    if base.is_empty() {
        return Err(Error::EmptyBaseCode);
    }
    for i in base.indices() {
        if i as usize >= n_latents {
            return Err(Error::InvalidLatent {
                index: i as usize,
                n_latents,
            });
        }
    }
    Ok(())
}

/// The `k` candidates minimizing `dist`, ties toward the smaller index.
fn k_nearest(
    candidates: impl Iterator<Item = u32>,
    k: usize,
    dist: impl Fn(u32) -> f64,
) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = candidates.map(|j| (dist(j), j)).collect();
    let by_dist =
        |a: &(f64, u32), b: &(f64, u32)| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_dist);
        scored.truncate(k);
    }
    scored.sort_by(by_dist);
    scored.into_iter().map(|(_, j)| j).collect()
}

fn argmin_by(candidates: impl Iterator<Item = u32>, score: impl Fn(u32) -> f64) -> Option<u32> {
    let mut best: Option<(f64, u32)> = None;
    for j in candidates {
        let s = score(j);
        match best {
            Some((bs, bj)) if (bs, bj) <= (s, j) => {}
            _ => best = Some((s, j)),
        }
    }
    best.map(|(_, j)| j)
}

/// Reassign the base values onto uniformly drawn distinct latent indices.
pub fn synthesize_random(
    base: &LatentVector,
    n_latents: usize,
    rng: &mut impl Rng,
) -> Result<LatentVector> {
    check_base(base, n_latents)?;
    let k = base.len();
    if n_latents < k {
        return Err(Error::InsufficientCandidates {
            needed: k,
            available: n_latents,
        });
    }
    let drawn = rand::seq::index::sample(rng, n_latents, k);
    let entries = drawn
        .iter()
        .zip(base.iter())
        .map(|(j, (_, v))| (j as u32, v))
        .collect();
    LatentVector::from_entries(entries)
}

/// Replace each active latent with one drawn uniformly from its
/// [`BASELINE_NEIGHBORS`] nearest non-dead latents in the sparsity ordering
/// (excluding the latent itself and latents already chosen for this
/// composition).
pub fn synthesize_baseline(
    base: &LatentVector,
    table: &SparsityTable,
    rng: &mut impl Rng,
) -> Result<LatentVector> {
    let n = table.n_latents();
    check_base(base, n)?;
    let mut chosen = BTreeSet::new();
    let mut entries = Vec::with_capacity(base.len());
    for (i, v) in by_value_desc(base) {
        let candidates = (0..n as u32).filter(|&j| j != i && !table.is_dead(j));
        let available = candidates.clone().count();
        if available < BASELINE_NEIGHBORS {
            return Err(Error::InsufficientCandidates {
                needed: BASELINE_NEIGHBORS,
                available,
            });
        }
        let pool = k_nearest(candidates, BASELINE_NEIGHBORS, |j| {
            table.sparsity_distance(i, j)
        });
        let open: Vec<u32> = pool.into_iter().filter(|j| !chosen.contains(j)).collect();
        if open.is_empty() {
            return Err(Error::EmptyCandidatePool);
        }
        let pick = open[rng.gen_range(0..open.len())];
        chosen.insert(pick);
        entries.push((pick, v));
    }
    LatentVector::from_entries(entries)
}

/// Knobs for the structured composition.
#[derive(Debug, Clone, Copy)]
pub struct StructuredOpts {
    /// Decoder-cosine target between the synthetic and base top latents.
    pub target_top_cos: f64,
    /// How many nearest-sparsity non-dead latents compete for the top slot.
    pub pool_size: usize,
}

impl Default for StructuredOpts {
    fn default() -> Self {
        StructuredOpts {
            target_top_cos: DEFAULT_TOP_COS,
            pool_size: DEFAULT_POOL_SIZE,
        }
    }
}

/// Replace the base top latent by the pool member whose decoder cosine to it
/// is closest to `target_top_cos`, then give every remaining base latent the
/// non-dead, not-yet-chosen latent whose cosine to the new top is closest to
/// its own cosine to the old top. Values carry over unchanged.
pub fn synthesize_structured(
    base: &LatentVector,
    params: &SaeParams,
    table: &SparsityTable,
    opts: &StructuredOpts,
) -> Result<(LatentVector, CompositionReport)> {
    let n = check_structured_inputs(base, params, table)?;
    if opts.pool_size == 0 {
        return Err(Error::BadParameter("pool_size must be >= 1".into()));
    }
    let (top_idx, top_val) = base.top_latent().expect("non-empty base");

    let candidates = (0..n as u32).filter(|&j| j != top_idx && !table.is_dead(j));
    let available = candidates.clone().count();
    if available < opts.pool_size {
        return Err(Error::InsufficientCandidates {
            needed: opts.pool_size,
            available,
        });
    }
    let pool = k_nearest(candidates, opts.pool_size, |j| {
        table.sparsity_distance(top_idx, j)
    });
    let cos_to_base_top = params.cosines_to(top_idx)?;
    let top_synth = argmin_by(pool.into_iter(), |j| {
        (cos_to_base_top[j as usize] - opts.target_top_cos).abs()
    })
    .expect("pool is non-empty");

    compose_with_top(
        base,
        params,
        table,
        &cos_to_base_top,
        top_idx,
        top_val,
        top_synth,
        opts.target_top_cos,
    )
}

/// As [`synthesize_structured`], but the top latent is simply the non-dead
/// latent nearest in sparsity to the base top (no cosine constraint).
pub fn synthesize_structured_no_cos(
    base: &LatentVector,
    params: &SaeParams,
    table: &SparsityTable,
) -> Result<LatentVector> {
    let n = check_structured_inputs(base, params, table)?;
    let (top_idx, top_val) = base.top_latent().expect("non-empty base");
    let candidates = (0..n as u32).filter(|&j| j != top_idx && !table.is_dead(j));
    let top_synth = argmin_by(candidates, |j| table.sparsity_distance(top_idx, j)).ok_or(
        Error::InsufficientCandidates {
            needed: 1,
            available: 0,
        },
    )?;
    let cos_to_base_top = params.cosines_to(top_idx)?;
    let target = cos_to_base_top[top_synth as usize];
    let (z, _) = compose_with_top(
        base,
        params,
        table,
        &cos_to_base_top,
        top_idx,
        top_val,
        top_synth,
        target,
    )?;
    Ok(z)
}

fn check_structured_inputs(
    base: &LatentVector,
    params: &SaeParams,
    table: &SparsityTable,
) -> Result<usize> {
    let n = params.n_latents();
    if table.n_latents() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: table.n_latents(),
        });
    }
    check_base(base, n)?;
    Ok(n)
}

#[allow(clippy::too_many_arguments)]
fn compose_with_top(
    base: &LatentVector,
    params: &SaeParams,
    table: &SparsityTable,
    cos_to_base_top: &[f64],
    top_idx: u32,
    top_val: f32,
    top_synth: u32,
    top_target_cos: f64,
) -> Result<(LatentVector, CompositionReport)> {
    let n = params.n_latents();
    let cos_to_synth_top = params.cosines_to(top_synth)?;

    let mut chosen = BTreeSet::from([top_synth]);
    let mut entries = vec![(top_synth, top_val)];
    let mut matches = vec![LatentMatch {
        base_latent: top_idx,
        chosen_latent: top_synth,
        value: top_val,
        target_cosine: top_target_cos,
        achieved_cosine: cos_to_base_top[top_synth as usize],
    }];

    for (l, v) in by_value_desc(base).into_iter().skip(1) {
        let target = cos_to_base_top[l as usize];
        let candidates = (0..n as u32).filter(|&j| !table.is_dead(j) && !chosen.contains(&j));
        let pick = argmin_by(candidates, |j| {
            (cos_to_synth_top[j as usize] - target).abs()
        })
        .ok_or(Error::EmptyCandidatePool)?;
        chosen.insert(pick);
        entries.push((pick, v));
        matches.push(LatentMatch {
            base_latent: l,
            chosen_latent: pick,
            value: v,
            target_cosine: target,
            achieved_cosine: cos_to_synth_top[pick as usize],
        });
    }

    let z = LatentVector::from_entries(entries)?;
    let target_act = params.decode(&z)?;
    let base_recon = params.decode(base)?;
    let distance_from_base = target_act.l2_distance(&base_recon);
    let report = CompositionReport {
        chosen: z.clone(),
        target: target_act,
        latent_matches: matches,
        distance_from_base,
    };
    Ok((z, report))
}

/// The SAE's reconstruction of `t`: `decode(encode(t))`.
pub fn reconstruct_target(params: &SaeParams, t: &Activation) -> Result<Activation> {
    params.decode(&params.encode(t)?)
}
