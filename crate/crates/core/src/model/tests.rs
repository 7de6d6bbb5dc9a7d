use super::*;
use crate::tensorfile::TensorFile;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config() -> ModelConfig {
    ModelConfig::toy(2, 2, 8, 50)
}

/// Random small-magnitude weights in the documented tensor schema.
pub(crate) fn toy_tensor_file(cfg: &ModelConfig, seed: u64) -> TensorFile {
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

pub(crate) fn toy_model(seed: u64) -> Model {
    let cfg = toy_config();
    Model::from_tensor_file(&toy_tensor_file(&cfg, seed), cfg).unwrap()
}

// ---------------------------------------------------------------------------
// Straight-line reference forward pass. No hooks, no shared code with the
// implementation: reads the weight file directly and computes in f64.
// ---------------------------------------------------------------------------

fn tensor_f64(tf: &TensorFile, name: &str) -> Vec<f64> {
    tf.get(name)
        .unwrap()
        .data
        .iter()
        .map(|&v| v as f64)
        .collect()
}

fn ref_layernorm(x: &[f64], w: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(w.iter().zip(b.iter()))
        .map(|(v, (w, b))| (v - mean) * inv * w + b)
        .collect()
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

// y[t] = x[t] @ w + b, with w stored row-major [rows, cols].
fn ref_affine(x: &[Vec<f64>], w: &[f64], b: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|xi| {
            (0..cols)
                .map(|j| {
                    let mut acc = b[j];
                    for (i, &v) in xi.iter().enumerate().take(rows) {
                        acc += v * w[i * cols + j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub(crate) fn reference_logits(tf: &TensorFile, cfg: &ModelConfig, tokens: &[u32]) -> Vec<f64> {
    let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
    let eps = cfg.layernorm_epsilon as f64;
    let w_e = tensor_f64(tf, schema::W_E);
    let w_pos = tensor_f64(tf, schema::W_POS);

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &tok)| {
            (0..d)
                .map(|j| w_e[tok as usize * d + j] + w_pos[pos * d + j])
                .collect()
        })
        .collect();

    for l in 0..cfg.n_layers {
        let name = |s: &str| schema::block(l, s);
        let ln1_w = tensor_f64(tf, &name("ln1.w"));
        let ln1_b = tensor_f64(tf, &name("ln1.b"));
        let normed: Vec<Vec<f64>> = x
            .iter()
            .map(|xi| ref_layernorm(xi, &ln1_w, &ln1_b, eps))
            .collect();

        let q = ref_affine(
            &normed,
            &tensor_f64(tf, &name("attn.W_Q")),
            &tensor_f64(tf, &name("attn.b_Q")),
            d,
            d,
        );
        let k = ref_affine(
            &normed,
            &tensor_f64(tf, &name("attn.W_K")),
            &tensor_f64(tf, &name("attn.b_K")),
            d,
            d,
        );
        let val = ref_affine(
            &normed,
            &tensor_f64(tf, &name("attn.W_V")),
            &tensor_f64(tf, &name("attn.b_V")),
            d,
            d,
        );

        let scale = 1.0 / (cfg.d_head as f64).sqrt();
        let mut ctx = vec![vec![0.0f64; d]; tokens.len()];
        for h in 0..cfg.n_heads {
            let off = h * cfg.d_head;
            for t in 0..tokens.len() {
                let mut scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..cfg.d_head)
                            .map(|j| q[t][off + j] * k[s][off + j])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in scores.iter_mut() {
                    *s /= sum;
                }
                for (s, prob) in scores.iter().enumerate() {
                    for j in 0..cfg.d_head {
                        ctx[t][off + j] += prob * val[s][off + j];
                    }
                }
            }
        }
        let attn_out = ref_affine(
            &ctx,
            &tensor_f64(tf, &name("attn.W_O")),
            &tensor_f64(tf, &name("attn.b_O")),
            d,
            d,
        );
        for t in 0..tokens.len() {
            for j in 0..d {
                x[t][j] += attn_out[t][j];
            }
        }

        let ln2_w = tensor_f64(tf, &name("ln2.w"));
        let ln2_b = tensor_f64(tf, &name("ln2.b"));
        let normed: Vec<Vec<f64>> = x
            .iter()
            .map(|xi| ref_layernorm(xi, &ln2_w, &ln2_b, eps))
            .collect();
        let mut hidden = ref_affine(
            &normed,
            &tensor_f64(tf, &name("mlp.W_in")),
            &tensor_f64(tf, &name("mlp.b_in")),
            d,
            m,
        );
        for row in hidden.iter_mut() {
            for h in row.iter_mut() {
                *h = ref_gelu(*h);
            }
        }
        let mlp_out = ref_affine(
            &hidden,
            &tensor_f64(tf, &name("mlp.W_out")),
            &tensor_f64(tf, &name("mlp.b_out")),
            m,
            d,
        );
        for t in 0..tokens.len() {
            for j in 0..d {
                x[t][j] += mlp_out[t][j];
            }
        }
    }

    let last = ref_layernorm(
        x.last().unwrap(),
        &tensor_f64(tf, schema::LN_F_W),
        &tensor_f64(tf, schema::LN_F_B),
        eps,
    );
    let w_u: Vec<f64> = match tf.get(schema::W_U) {
        // stored [d, v]
        Some(t) => t.data.iter().map(|&x| x as f64).collect(),
        // tied: transpose of W_E [v, d]
        None => {
            let mut out = vec![0.0; d * v];
            for i in 0..v {
                for j in 0..d {
                    out[j * v + i] = w_e[i * d + j];
                }
            }
            out
        }
    };
    let b_u = tf.get(schema::B_U).map(|t| t.data.clone());
    (0..v)
        .map(|i| {
            let mut acc = b_u.as_ref().map_or(0.0, |b| b[i] as f64);
            for j in 0..d {
                acc += last[j] * w_u[j * v + i];
            }
            acc
        })
        .collect()
}

// ---------------------------------------------------------------------------

#[test]
fn zero_weight_model_loads_and_is_deterministic() {
    let cfg = toy_config();
    let mut tf = TensorFile::new();
    for (name, t) in toy_tensor_file(&cfg, 0).iter() {
        tf.insert(name, t.shape.clone(), vec![0.0; t.numel()]);
    }
    let model = Model::from_tensor_file(&tf, cfg).unwrap();
    let a = model.forward(&[1, 2, 3], None, &[]).unwrap();
    let b = model.forward(&[1, 2, 3], None, &[]).unwrap();
    let la = a.logits.unwrap();
    let lb = b.logits.unwrap();
    assert_eq!(la, lb);
    assert!(la.iter().all(|v| v.is_finite()));
}

#[test]
fn gpt2_small_shapes_load() {
    let cfg = ModelConfig {
        vocab_size: 256,
        max_seq_len: 16,
        ..ModelConfig::gpt2_small()
    };
    let mut tf = TensorFile::new();
    for (name, t) in toy_tensor_file(&cfg, 1).iter() {
        tf.insert(name, t.shape.clone(), vec![0.0; t.numel()]);
    }
    let model = Model::from_tensor_file(&tf, cfg).unwrap();
    assert_eq!(model.config().n_layers, 12);
    assert_eq!(model.config().d_model, 768);
}

#[test]
fn missing_final_ln_bias_is_named() {
    let cfg = toy_config();
    let mut tf = toy_tensor_file(&cfg, 2);
    tf.remove(schema::LN_F_B);
    match Model::from_tensor_file(&tf, cfg).unwrap_err() {
        Error::MissingTensor { name } => assert_eq!(name, "ln_f.b"),
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn bad_shape_is_rejected() {
    let cfg = toy_config();
    let mut tf = toy_tensor_file(&cfg, 3);
    tf.insert(
        "blocks.0.ln1.w",
        vec![cfg.d_model + 1],
        vec![1.0; cfg.d_model + 1],
    );
    assert!(matches!(
        Model::from_tensor_file(&tf, cfg),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn non_finite_weights_rejected() {
    let cfg = toy_config();
    let mut tf = toy_tensor_file(&cfg, 4);
    let mut data = tf.get(schema::W_E).unwrap().data.clone();
    data[7] = f32::INFINITY;
    let shape = tf.get(schema::W_E).unwrap().shape.clone();
    tf.insert(schema::W_E, shape, data);
    assert!(matches!(
        Model::from_tensor_file(&tf, cfg),
        Err(Error::NonFiniteTensor { .. })
    ));
}

#[test]
fn repeated_capture_is_identical() {
    let model = toy_model(5);
    let hook = HookPoint::resid_pre(1);
    let tokens = [3, 1, 4, 1, 5];
    let a = model.forward(&tokens, None, &[hook]).unwrap().captured[&hook].clone();
    let b = model.forward(&tokens, None, &[hook]).unwrap().captured[&hook].clone();
    assert_eq!(a, b);
    assert_eq!(a.len(), model.config().d_model);
}

#[test]
fn identity_patch_leaves_everything_unchanged() {
    let model = toy_model(6);
    let tokens = [9, 8, 7, 6];
    let probe = HookPoint::resid_pre(1);
    let read = HookPoint::resid_post(1);

    let clean = model.forward(&tokens, None, &[probe, read]).unwrap();
    let patch = PatchSpec::new(probe, clean.captured[&probe].clone());
    let patched = model
        .forward(&tokens, Some(&patch), &[probe, read])
        .unwrap();

    assert_eq!(clean.captured[&read], patched.captured[&read]);
    assert_eq!(clean.logits.unwrap(), patched.logits.unwrap());
}

#[test]
fn different_patch_changes_downstream_capture() {
    let model = toy_model(7);
    let tokens = [2, 4, 8, 16, 32];
    let probe = HookPoint::resid_pre(1);
    let read = HookPoint::resid_post(1);

    let clean = model.forward(&tokens, None, &[probe, read]).unwrap();
    let mut shifted = clean.captured[&probe].values().clone();
    shifted[0] += 1.0;
    let patch = PatchSpec::new(probe, Activation::new(shifted));
    let patched = model.forward(&tokens, Some(&patch), &[read]).unwrap();

    assert_ne!(clean.captured[&read], patched.captured[&read]);
}

#[test]
fn patch_never_touches_earlier_sites() {
    let model = toy_model(8);
    let tokens = [1, 2, 3, 4, 5, 6];
    let before = [HookPoint::resid_pre(0), HookPoint::resid_post(0)];

    let clean = model.forward(&tokens, None, &before).unwrap();
    let patch = PatchSpec::new(
        HookPoint::resid_pre(1),
        Activation::from_vec(vec![1.0; model.config().d_model]),
    );
    let patched = model.forward(&tokens, Some(&patch), &before).unwrap();

    for hook in &before {
        assert_eq!(clean.captured[hook], patched.captured[hook]);
    }
}

#[test]
fn capture_at_patched_site_returns_replacement() {
    let model = toy_model(9);
    let probe = HookPoint::resid_pre(1);
    let replacement = Activation::from_vec(vec![0.25; model.config().d_model]);
    let patch = PatchSpec::new(probe, replacement.clone());
    let out = model.forward(&[1, 2, 3], Some(&patch), &[probe]).unwrap();
    assert_eq!(out.captured[&probe], replacement);
}

#[test]
fn output_shapes() {
    let model = toy_model(10);
    let hook = HookPoint::resid_post(0);
    let out = model.forward(&[1, 2], None, &[hook]).unwrap();
    assert_eq!(out.captured[&hook].len(), model.config().d_model);
    assert_eq!(out.logits.unwrap().len(), model.config().vocab_size);
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = toy_model(11);
    assert!(matches!(
        model.forward(&[50], None, &[]),
        Err(Error::TokenOutOfRange { id: 50, .. })
    ));
    assert!(matches!(
        model.forward(&[], None, &[]),
        Err(Error::EmptyTokenSequence)
    ));
    let long = vec![0u32; model.config().max_seq_len + 1];
    assert!(matches!(
        model.forward(&long, None, &[]),
        Err(Error::SequenceTooLong { .. })
    ));
    assert!(matches!(
        model.forward(&[1], None, &[HookPoint::resid_pre(99)]),
        Err(Error::UnresolvableHook { .. })
    ));
    assert!(matches!(
        model.forward(&[1, 2], None, &[HookPoint::resid_pre(0).at(-3)]),
        Err(Error::UnresolvableHook { .. })
    ));
}

#[test]
fn negative_position_counts_from_end() {
    let model = toy_model(12);
    let tokens = [5, 6, 7, 8];
    let last = HookPoint::resid_pre(1).at(-1);
    let explicit = HookPoint::resid_pre(1).at(3);
    let out = model.forward(&tokens, None, &[last, explicit]).unwrap();
    assert_eq!(out.captured[&last], out.captured[&explicit]);
}

#[test]
fn resumed_forward_matches_full_forward_bitwise() {
    let model = toy_model(13);
    let tokens = [10, 20, 30, 40, 11];
    let probe = HookPoint::resid_pre(1);
    let read = HookPoint::resid_post(1);
    let patch = PatchSpec::new(
        probe,
        Activation::from_vec(vec![0.5; model.config().d_model]),
    );

    let full = model.forward(&tokens, Some(&patch), &[read]).unwrap();
    let state = model.state_at(&tokens, 1).unwrap();
    let resumed = model
        .forward_from(&state, Some(&patch), &[read], true)
        .unwrap();

    assert_eq!(full.captured[&read], resumed.captured[&read]);
    assert_eq!(full.logits.unwrap(), resumed.logits.unwrap());
}

#[test]
fn collect_activations_shapes_and_order() {
    let model = toy_model(14);
    let prompts = vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]];
    let hook = HookPoint::resid_pre(1);
    let acts = model.collect_activations(&prompts, &hook).unwrap();
    assert_eq!(acts.len(), 3);
    for (p, a) in prompts.iter().zip(acts.iter()) {
        assert_eq!(a.len(), model.config().d_model);
        let direct = model.forward(p, None, &[hook]).unwrap();
        assert_eq!(*a, direct.captured[&hook]);
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    let cfg = toy_config();
    let tf = toy_tensor_file(&cfg, 15);
    let model = Model::from_tensor_file(&tf, cfg.clone()).unwrap();
    let tokens = [3, 14, 15, 9, 26, 5, 35, 8, 9, 7];

    let got = model.forward(&tokens, None, &[]).unwrap().logits.unwrap();
    let want = reference_logits(&tf, &cfg, &tokens);

    let scale = want.iter().map(|v| v.abs()).fold(0.0_f64, f64::max);
    assert!(scale > 0.0);
    for (g, w) in got.iter().zip(want.iter()) {
        assert!(
            ((*g as f64) - w).abs() / scale <= 1e-5,
            "logit mismatch: got {g}, want {w}, scale {scale}"
        );
    }
}

#[test]
fn config_invariants_enforced() {
    let mut cfg = toy_config();
    cfg.d_head = 7;
    assert!(matches!(cfg.validate(), Err(Error::BadModelConfig(_))));
    let mut cfg = toy_config();
    cfg.d_mlp = cfg.d_model;
    assert!(matches!(cfg.validate(), Err(Error::BadModelConfig(_))));
    let mut cfg = toy_config();
    cfg.n_layers = 0;
    assert!(matches!(cfg.validate(), Err(Error::BadModelConfig(_))));
}
