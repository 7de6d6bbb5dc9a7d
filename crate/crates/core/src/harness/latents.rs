//! Per-latent property report over a sample of model-generated activations:
//! active-count distribution, how the latent activation norm concentrates in
//! the top ranks, decoder-cosine geometry among active latents, plus overall
//! activation-norm and about-bias cosine statistics.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookPoint, Model};
use crate::sae::SaeParams;

pub const DEFAULT_REPORT_SAMPLES: usize = 2000;
const PAIRING_SEED: u64 = 0x706c_6162_0004;

/// How many top ranks the norm-fraction table covers.
pub const NORM_FRACTION_RANKS: usize = 10;

/// Cosine histograms span [-1, 1] in this many bins.
const COSINE_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Counts normalized to sum to 1 (all zero when empty).
    pub frequency: Vec<f64>,
    pub mean: f64,
}

impl Histogram {
    fn from_values(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
        let width = (hi - lo) / bins as f64;
        let bin_edges: Vec<f64> = (0..=bins).map(|b| lo + b as f64 * width).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let b = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1);
            counts[b as usize] += 1;
        }
        let total = values.len() as f64;
        let frequency = counts
            .iter()
            .map(|&c| if total > 0.0 { c as f64 / total } else { 0.0 })
            .collect();
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / total
        };
        Histogram {
            bin_edges,
            counts,
            frequency,
            mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPropertyReport {
    pub sample_count: usize,
    /// Activations whose SAE code was empty; counted here and excluded from
    /// cosine statistics.
    pub zero_active_count: usize,
    pub mean_active_count: f64,
    /// Histogram over the number of active latents per activation
    /// (`active_count_hist[k]` = activations with exactly `k` active).
    pub active_count_hist: Vec<u64>,
    /// Mean fraction of the latent-value L1 norm carried by rank `r`
    /// (descending values; entry `r-1`), averaged over activations with at
    /// least one active latent; ranks an activation lacks contribute zero,
    /// so the means sum to at most 1 across ranks.
    pub norm_fraction_by_rank_l1: Vec<f64>,
    /// Same, but fractions of the latent-value L2 norm (these can exceed 1
    /// in sum since values enter linearly).
    pub norm_fraction_by_rank_l2: Vec<f64>,
    /// Decoder cosines between all pairs of active latents.
    pub pairwise_cosine: Histogram,
    /// Decoder cosines of each non-top active latent to the top latent.
    pub top_latent_cosine: Histogram,
    pub mean_activation_norm: f64,
    /// Mean activation cosine about the decoder bias over a seeded disjoint
    /// pairing of the sampled activations.
    pub mean_pair_cos_about_bias: f64,
}

/// Compute the report over (up to) `n` prompts' activations at `hook`.
pub fn latent_property_report(
    model: &Model,
    sae: &SaeParams,
    prompts: &[Vec<u32>],
    n: usize,
    hook: &HookPoint,
) -> Result<LatentPropertyReport> {
    if n < 1 || prompts.is_empty() {
        return Err(Error::NoActivations);
    }
    let take = n.min(prompts.len());
    let selected = &prompts[..take];
    let acts = model.collect_activations(selected, hook)?;

    struct PerActivation {
        active: usize,
        fractions_l1: Vec<f64>,
        fractions_l2: Vec<f64>,
        pair_cosines: Vec<f64>,
        top_cosines: Vec<f64>,
    }

    let per: Vec<PerActivation> = acts
        .par_iter()
        .map(|a| -> Result<PerActivation> {
            let code = sae.encode(a)?;
            let values = code.sorted_values();
            let l1: f64 = values.iter().map(|&v| v as f64).sum();
            let l2: f64 = values
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            let fractions_l1 = values
                .iter()
                .take(NORM_FRACTION_RANKS)
                .map(|&v| v as f64 / l1)
                .collect();
            let fractions_l2 = values
                .iter()
                .take(NORM_FRACTION_RANKS)
                .map(|&v| v as f64 / l2)
                .collect();

            let indices: Vec<u32> = code.indices().collect();
            let mut pair_cosines = Vec::new();
            for (i, &a_idx) in indices.iter().enumerate() {
                for &b_idx in indices.iter().skip(i + 1) {
                    pair_cosines.push(sae.latent_cosine(a_idx, b_idx)?);
                }
            }
            let top_cosines = match code.top_latent() {
                Some((top, _)) if indices.len() > 1 => indices
                    .iter()
                    .filter(|&&i| i != top)
                    .map(|&i| sae.latent_cosine(i, top))
                    .collect::<Result<Vec<f64>>>()?,
                _ => Vec::new(),
            };
            Ok(PerActivation {
                active: code.len(),
                fractions_l1,
                fractions_l2,
                pair_cosines,
                top_cosines,
            })
        })
        .collect::<Result<_>>()?;

    let sample_count = per.len();
    let zero_active_count = per.iter().filter(|p| p.active == 0).count();
    let mean_active_count = per.iter().map(|p| p.active as f64).sum::<f64>() / sample_count as f64;

    let max_active = per.iter().map(|p| p.active).max().unwrap_or(0);
    let mut active_count_hist = vec![0u64; max_active + 1];
    for p in &per {
        active_count_hist[p.active] += 1;
    }

    let mut norm_fraction_by_rank_l1 = Vec::with_capacity(NORM_FRACTION_RANKS);
    let mut norm_fraction_by_rank_l2 = Vec::with_capacity(NORM_FRACTION_RANKS);
    let with_actives = (sample_count - zero_active_count).max(1) as f64;
    for rank in 0..NORM_FRACTION_RANKS {
        let frac_at = |fractions: fn(&PerActivation) -> &Vec<f64>| {
            per.iter()
                .filter(|p| p.active > 0)
                .map(|p| fractions(p).get(rank).copied().unwrap_or(0.0))
                .sum::<f64>()
                / with_actives
        };
        norm_fraction_by_rank_l1.push(frac_at(|p| &p.fractions_l1));
        norm_fraction_by_rank_l2.push(frac_at(|p| &p.fractions_l2));
    }

    let all_pairs: Vec<f64> = per
        .iter()
        .flat_map(|p| p.pair_cosines.iter().copied())
        .collect();
    let all_top: Vec<f64> = per
        .iter()
        .flat_map(|p| p.top_cosines.iter().copied())
        .collect();
    let pairwise_cosine = Histogram::from_values(&all_pairs, -1.0, 1.0, COSINE_BINS);
    let top_latent_cosine = Histogram::from_values(&all_top, -1.0, 1.0, COSINE_BINS);

    let mean_activation_norm = acts.iter().map(|a| a.norm()).sum::<f64>() / acts.len() as f64;

    let mut order: Vec<usize> = (0..acts.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(PAIRING_SEED);
    for i in (1..order.len()).rev() {
        order.swap(i, rand::Rng::gen_range(&mut rng, 0..=i));
    }
    let mut cos_sum = 0.0;
    let mut pairs = 0usize;
    for chunk in order.chunks_exact(2) {
        if let Ok(c) = sae.activation_cosine_about_bias(&acts[chunk[0]], &acts[chunk[1]]) {
            cos_sum += c;
            pairs += 1;
        }
    }
    let mean_pair_cos_about_bias = if pairs > 0 {
        cos_sum / pairs as f64
    } else {
        0.0
    };

    Ok(LatentPropertyReport {
        sample_count,
        zero_active_count,
        mean_active_count,
        active_count_hist,
        norm_fraction_by_rank_l1,
        norm_fraction_by_rank_l2,
        pairwise_cosine,
        top_latent_cosine,
        mean_activation_norm,
        mean_pair_cos_about_bias,
    })
}

/// Write the report as JSON plus plot-ready CSVs.
pub fn write_latent_report(dir: impl AsRef<Path>, report: &LatentPropertyReport) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("latent_report.json"),
        serde_json::to_string_pretty(report)?,
    )?;

    let mut w = csv::Writer::from_path(dir.join("latent_active_count_hist.csv"))?;
    w.write_record(["active_count", "n", "frequency"])?;
    for (count, &n) in report.active_count_hist.iter().enumerate() {
        let f = n as f64 / report.sample_count as f64;
        w.write_record([count.to_string(), n.to_string(), f.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("latent_norm_fractions.csv"))?;
    w.write_record(["rank", "l1_fraction", "l2_fraction"])?;
    for rank in 0..NORM_FRACTION_RANKS {
        w.write_record([
            (rank + 1).to_string(),
            report.norm_fraction_by_rank_l1[rank].to_string(),
            report.norm_fraction_by_rank_l2[rank].to_string(),
        ])?;
    }
    w.flush()?;

    for (name, hist) in [
        ("latent_pairwise_cosine_hist.csv", &report.pairwise_cosine),
        ("latent_top_cosine_hist.csv", &report.top_latent_cosine),
    ] {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        w.write_record(["bin_lo", "bin_hi", "count", "frequency"])?;
        for b in 0..hist.counts.len() {
            w.write_record([
                hist.bin_edges[b].to_string(),
                hist.bin_edges[b + 1].to_string(),
                hist.counts[b].to_string(),
                hist.frequency[b].to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}
