//! Warm-up computation and its on-disk cache.
//!
//! The expensive fixed cost of an experiment is estimating activation
//! moments (default 32,000 forward passes), the per-latent sparsity table,
//! and the mean pairwise activation cosine about the decoder bias. These
//! depend only on the (model, SAE, token dataset) triple and a few knobs,
//! never on the master seed, so they are computed once and cached under a
//! content hash of the three input files plus the relevant parameters.
//! Delete the cache directory to force recomputation.

use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composer::{auto_ridge, fit_gaussian, GaussianModel, DEFAULT_TOP_COS};
use crate::error::Result;
use crate::model::Model;
use crate::sae::{SaeParams, SparsityTable};

use super::config::{AutoOr, ExperimentConfig};

// Warm-up draws use fixed internal seeds so the cache stays valid across
// master seeds.
const MOMENT_SELECTION_SEED: u64 = 0x706c_6162_0001;
const SPARSITY_SELECTION_SEED: u64 = 0x706c_6162_0002;
const PAIRING_SEED: u64 = 0x706c_6162_0003;

const MAX_COSINE_PAIRS: usize = 10_000;

/// Everything the experiment needs beyond the raw inputs.
#[derive(Debug, Clone)]
pub struct Warmup {
    pub gaussian: GaussianModel,
    pub sparsity: SparsityTable,
    pub stats: WarmupStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarmupStats {
    pub mean_activation_norm: f64,
    /// Mean pairwise activation cosine about the decoder bias; the `auto`
    /// top-cosine target resolves to this.
    pub mean_pair_cos_about_bias: f64,
    pub cosine_pairs_used: usize,
    pub moment_samples_used: usize,
    pub sparsity_samples_used: usize,
    pub ridge: f64,
}

/// Compute or load the warm-up bundle for `cfg`.
pub fn warmup(
    cfg: &ExperimentConfig,
    model: &Model,
    sae: &SaeParams,
    prompts: &[Vec<u32>],
) -> Result<Warmup> {
    let dir = cfg.cache_dir().join(content_key(cfg)?);
    if let Some(warm) = try_load(&dir) {
        log::info!("warm-up cache hit at {}", dir.display());
        return Ok(warm);
    }
    log::info!(
        "computing warm-up ({} moment samples, {} sparsity samples)",
        cfg.experiment.moment_samples.min(prompts.len()),
        cfg.experiment.sparsity_samples.min(prompts.len()),
    );
    let warm = compute(cfg, model, sae, prompts)?;
    fs::create_dir_all(&dir)?;
    warm.write_to(&dir)?;
    Ok(warm)
}

impl Warmup {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.gaussian.save(dir.join("moments.bin"))?;
        self.sparsity.save(dir.join("sparsity.bin"))?;
        fs::write(
            dir.join("stats.json"),
            serde_json::to_string_pretty(&self.stats)?,
        )?;
        Ok(())
    }

    pub fn load_from(dir: &Path) -> Result<Self> {
        Ok(Warmup {
            gaussian: GaussianModel::load(dir.join("moments.bin"))?,
            sparsity: SparsityTable::load(dir.join("sparsity.bin"))?,
            stats: serde_json::from_str(&fs::read_to_string(dir.join("stats.json"))?)?,
        })
    }
}

fn try_load(dir: &Path) -> Option<Warmup> {
    if !dir.is_dir() {
        return None;
    }
    match Warmup::load_from(dir) {
        Ok(w) => Some(w),
        Err(e) => {
            log::warn!("ignoring unreadable warm-up cache {}: {e}", dir.display());
            None
        }
    }
}

/// Hash of the input files and the parameters the warm-up depends on.
fn content_key(cfg: &ExperimentConfig) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(b"perturb-lab warmup v1\0");
    for path in [&cfg.files.model, &cfg.files.sae, &cfg.files.tokens] {
        let mut f = fs::File::open(path)?;
        io::copy(&mut f, &mut hasher)?;
        hasher.update([0u8]);
    }
    let e = &cfg.experiment;
    let params = format!(
        "{};{};{};{:?};{}",
        e.prompt_len,
        e.moment_samples,
        e.sparsity_samples,
        e.ridge,
        cfg.sweep_spec().probe,
    );
    hasher.update(params.as_bytes());
    let digest = hasher.finalize();
    Ok(hex_prefix(&digest, 16))
}

fn hex_prefix(bytes: &[u8], len: usize) -> String {
    bytes.iter().take(len).map(|b| format!("{b:02x}")).collect()
}

/// Draw `count` prompts (all of them, in order, when the pool is smaller).
fn select_prompts(prompts: &[Vec<u32>], count: usize, seed: u64) -> Vec<Vec<u32>> {
    if count >= prompts.len() {
        return prompts.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, prompts.len(), count)
        .iter()
        .map(|i| prompts[i].clone())
        .collect()
}

fn compute(
    cfg: &ExperimentConfig,
    model: &Model,
    sae: &SaeParams,
    prompts: &[Vec<u32>],
) -> Result<Warmup> {
    let probe = cfg.sweep_spec().probe;

    let moment_prompts = select_prompts(
        prompts,
        cfg.experiment.moment_samples,
        MOMENT_SELECTION_SEED,
    );
    let acts = model.collect_activations(&moment_prompts, &probe)?;

    let ridge = match cfg.experiment.ridge {
        AutoOr::Auto => auto_ridge(&acts)?,
        AutoOr::Fixed(r) => r,
    };
    let gaussian = fit_gaussian(&acts, ridge)?;

    let mean_activation_norm = acts.iter().map(|a| a.norm()).sum::<f64>() / acts.len() as f64;

    // mean pairwise cosine about b_dec over a seeded disjoint pairing
    let mut order: Vec<usize> = (0..acts.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(PAIRING_SEED);
    for i in (1..order.len()).rev() {
        order.swap(i, rand::Rng::gen_range(&mut rng, 0..=i));
    }
    let mut cos_sum = 0.0f64;
    let mut pairs = 0usize;
    for chunk in order.chunks_exact(2).take(MAX_COSINE_PAIRS) {
        if let Ok(c) = sae.activation_cosine_about_bias(&acts[chunk[0]], &acts[chunk[1]]) {
            cos_sum += c;
            pairs += 1;
        }
    }
    let mean_pair_cos_about_bias = if pairs > 0 {
        cos_sum / pairs as f64
    } else {
        log::warn!("no usable activation pairs; falling back to cosine target {DEFAULT_TOP_COS}");
        DEFAULT_TOP_COS
    };

    let (sparsity, sparsity_samples_used) =
        if cfg.experiment.sparsity_samples == cfg.experiment.moment_samples {
            (sae.estimate_sparsity(&acts)?, acts.len())
        } else {
            let sel = select_prompts(
                prompts,
                cfg.experiment.sparsity_samples,
                SPARSITY_SELECTION_SEED,
            );
            let sparsity_acts = model.collect_activations(&sel, &probe)?;
            let n = sparsity_acts.len();
            (sae.estimate_sparsity(&sparsity_acts)?, n)
        };

    Ok(Warmup {
        gaussian,
        sparsity,
        stats: WarmupStats {
            mean_activation_norm,
            mean_pair_cos_about_bias,
            cosine_pairs_used: pairs,
            moment_samples_used: acts.len(),
            sparsity_samples_used,
            ridge,
        },
    })
}
