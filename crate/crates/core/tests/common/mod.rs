//! Shared toy fixtures for integration tests, built through the public API
//! only: weight files on disk, a token dataset, and a ready-to-run config.

#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use perturb_lab::harness::{
    config::ExperimentSection, ExperimentConfig, FilesSection, SweepSection,
};
use perturb_lab::model::{schema, ModelConfig, Site};
use perturb_lab::perturb::StepMode;
use perturb_lab::tensorfile::TensorFile;
use perturb_lab::tokens;

pub fn toy_model_config() -> ModelConfig {
    ModelConfig::toy(2, 2, 8, 50)
}

/// Random small-magnitude weights in the documented tensor schema.
pub fn toy_model_file(cfg: &ModelConfig, seed: u64) -> TensorFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |n: usize, scale: f32| -> Vec<f32> {
        (0..n)
            .map(|_| (rng.gen::<f32>() - 0.5) * 2.0 * scale)
            .collect()
    };
    let (d, m, v, c) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size, cfg.max_seq_len);
    let w_scale = 0.6 / (d as f32).sqrt();

    let mut tf = TensorFile::new();
    tf.insert(schema::W_E, vec![v, d], gen(v * d, 0.5));
    tf.insert(schema::W_POS, vec![c, d], gen(c * d, 0.1));
    for l in 0..cfg.n_layers {
        let name = |s: &str| schema::block(l, s);
        for w in ["attn.W_Q", "attn.W_K", "attn.W_V", "attn.W_O"] {
            tf.insert(name(w), vec![d, d], gen(d * d, w_scale));
        }
        for b in ["attn.b_Q", "attn.b_K", "attn.b_V", "attn.b_O"] {
            tf.insert(name(b), vec![d], gen(d, 0.02));
        }
        tf.insert(name("ln1.w"), vec![d], vec![1.0; d]);
        tf.insert(name("ln1.b"), vec![d], gen(d, 0.02));
        tf.insert(name("ln2.w"), vec![d], vec![1.0; d]);
        tf.insert(name("ln2.b"), vec![d], gen(d, 0.02));
        tf.insert(name("mlp.W_in"), vec![d, m], gen(d * m, w_scale));
        tf.insert(name("mlp.b_in"), vec![m], gen(m, 0.02));
        tf.insert(name("mlp.W_out"), vec![m, d], gen(m * d, w_scale));
        tf.insert(name("mlp.b_out"), vec![d], gen(d, 0.02));
    }
    tf.insert(schema::LN_F_W, vec![d], vec![1.0; d]);
    tf.insert(schema::LN_F_B, vec![d], gen(d, 0.02));
    tf
}

/// A random SAE in the documented name schema. The negative encoder bias
/// keeps codes sparse (roughly a sixth of the latents fire per activation),
/// so candidate pools behave like a real SAE's.
pub fn toy_sae_file(d_model: usize, n_latents: usize, seed: u64) -> TensorFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |n: usize, scale: f32| -> Vec<f32> {
        (0..n)
            .map(|_| (rng.gen::<f32>() - 0.5) * 2.0 * scale)
            .collect()
    };
    let mut tf = TensorFile::new();
    tf.insert(
        "W_enc",
        vec![d_model, n_latents],
        gen(d_model * n_latents, 1.0),
    );
    let b_enc: Vec<f32> = gen(n_latents, 0.2).iter().map(|v| v - 1.2).collect();
    tf.insert("b_enc", vec![n_latents], b_enc);
    tf.insert(
        "W_dec",
        vec![n_latents, d_model],
        gen(n_latents * d_model, 1.0),
    );
    tf.insert("b_dec", vec![d_model], gen(d_model, 0.3));
    tf
}

pub fn toy_prompts(count: usize, len: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect())
        .collect()
}

/// Write the toy model, SAE, and token files into `dir` and return a config
/// pointing at them, sized so a full experiment takes well under a second.
pub fn toy_experiment_config(dir: &Path, seed: u64) -> ExperimentConfig {
    let model_cfg = toy_model_config();
    let model_path = dir.join("model.safetensors");
    toy_model_file(&model_cfg, seed).write(&model_path).unwrap();

    let sae_path = dir.join("sae.safetensors");
    toy_sae_file(model_cfg.d_model, 128, seed + 1)
        .write(&sae_path)
        .unwrap();

    let tokens_path = dir.join("tokens.txt");
    tokens::write_text(
        &tokens_path,
        &toy_prompts(100, 10, model_cfg.vocab_size as u32, seed + 2),
    )
    .unwrap();

    ExperimentConfig {
        files: FilesSection {
            model: model_path,
            sae: sae_path,
            tokens: tokens_path,
            output: dir.join("out"),
            cache: None,
        },
        model: model_cfg,
        experiment: ExperimentSection {
            n_perturbations: 8,
            master_seed: 7,
            prompt_len: 10,
            moment_samples: 64,
            sparsity_samples: 64,
            pool_size: 10,
            ..ExperimentSection::default()
        },
        sweep: SweepSection {
            mode: StepMode::Absolute,
            steps: 20,
            step_size: 0.5,
            probe_layer: 1,
            probe_site: Site::ResidPre,
            read_layer: 1,
            read_site: Site::ResidPost,
            ap_threshold: 2.0,
            ..SweepSection::default()
        },
    }
}

/// Relative paths of every file under `dir`, sorted.
pub fn file_listing(dir: &Path) -> Vec<std::path::PathBuf> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<std::path::PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, base, out);
            } else {
                out.push(path.strip_prefix(base).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

pub fn copy_dir(from: &Path, to: &Path) {
    for rel in file_listing(from) {
        let dst = to.join(&rel);
        std::fs::create_dir_all(dst.parent().unwrap()).unwrap();
        std::fs::copy(from.join(&rel), dst).unwrap();
    }
}

/// Assert two directories contain byte-identical file trees.
pub fn assert_dirs_identical(a: &Path, b: &Path) {
    let fa = file_listing(a);
    let fb = file_listing(b);
    assert_eq!(fa, fb, "directory listings differ");
    for rel in &fa {
        let ba = std::fs::read(a.join(rel)).unwrap();
        let bb = std::fs::read(b.join(rel)).unwrap();
        assert_eq!(ba, bb, "file {} differs", rel.display());
    }
}
