//! Generate a toy model, SAE, and token dataset so the CLI can be tried
//! without real weights: `cargo run --example toy_inputs -- <dir>`.
use perturb_lab::model::{schema, ModelConfig};
use perturb_lab::tensorfile::TensorFile;
use rand::{Rng, SeedableRng};

fn main() {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap());
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let cfg = ModelConfig::toy(2, 2, 8, 50);
    let (d, m, v, c) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size, cfg.max_seq_len);
    let mut gen = |n: usize, s: f32| -> Vec<f32> {
        (0..n).map(|_| (rng.gen::<f32>() - 0.5) * 2.0 * s).collect()
    };
    let mut tf = TensorFile::new();
    tf.insert(schema::W_E, vec![v, d], gen(v * d, 0.5));
    tf.insert(schema::W_POS, vec![c, d], gen(c * d, 0.1));
    for l in 0..cfg.n_layers {
        let name = |s: &str| schema::block(l, s);
        for w in ["attn.W_Q", "attn.W_K", "attn.W_V", "attn.W_O"] {
            tf.insert(name(w), vec![d, d], gen(d * d, 0.15));
        }
        for b in ["attn.b_Q", "attn.b_K", "attn.b_V", "attn.b_O"] {
            tf.insert(name(b), vec![d], gen(d, 0.02));
        }
        for ln in ["ln1", "ln2"] {
            tf.insert(name(&format!("{ln}.w")), vec![d], vec![1.0; d]);
            tf.insert(name(&format!("{ln}.b")), vec![d], gen(d, 0.02));
        }
        tf.insert(name("mlp.W_in"), vec![d, m], gen(d * m, 0.15));
        tf.insert(name("mlp.b_in"), vec![m], gen(m, 0.02));
        tf.insert(name("mlp.W_out"), vec![m, d], gen(m * d, 0.15));
        tf.insert(name("mlp.b_out"), vec![d], gen(d, 0.02));
    }
    tf.insert(schema::LN_F_W, vec![d], vec![1.0; d]);
    tf.insert(schema::LN_F_B, vec![d], gen(d, 0.02));
    tf.write(dir.join("model.safetensors")).unwrap();

    let n = 128;
    let mut sae = TensorFile::new();
    sae.insert("W_enc", vec![d, n], gen(d * n, 1.0));
    let b_enc: Vec<f32> = gen(n, 0.2).iter().map(|x| x - 1.2).collect();
    sae.insert("b_enc", vec![n], b_enc);
    sae.insert("W_dec", vec![n, d], gen(n * d, 1.0));
    sae.insert("b_dec", vec![d], gen(d, 0.3));
    sae.write(dir.join("sae.safetensors")).unwrap();

    let prompts: Vec<Vec<u32>> = (0..200)
        .map(|_| (0..10).map(|_| rng.gen_range(0..v as u32)).collect())
        .collect();
    perturb_lab::tokens::write_text(dir.join("tokens.txt"), &prompts).unwrap();
}
