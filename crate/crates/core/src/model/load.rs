//! Model weight loading.
//!
//! Weights live in the named-tensor container of [`crate::tensorfile`]. The
//! name schema (shapes for a config with width `d`, MLP width `m = 4d`,
//! vocabulary `v`, context `c`):
//!
//! | name                      | shape    |
//! |---------------------------|----------|
//! | `embed.W_E`               | `[v, d]` |
//! | `pos_embed.W_pos`         | `[c, d]` |
//! | `blocks.{l}.ln1.w` / `.b` | `[d]`    |
//! | `blocks.{l}.attn.W_Q` / `W_K` / `W_V` / `W_O` | `[d, d]` |
//! | `blocks.{l}.attn.b_Q` / `b_K` / `b_V` / `b_O` | `[d]`    |
//! | `blocks.{l}.ln2.w` / `.b` | `[d]`    |
//! | `blocks.{l}.mlp.W_in`     | `[d, m]` |
//! | `blocks.{l}.mlp.b_in`     | `[m]`    |
//! | `blocks.{l}.mlp.W_out`    | `[m, d]` |
//! | `blocks.{l}.mlp.b_out`    | `[d]`    |
//! | `ln_f.w` / `ln_f.b`       | `[d]`    |
//! | `unembed.W_U` (optional)  | `[d, v]` |
//! | `unembed.b_U` (optional)  | `[v]`    |
//!
//! Projection matrices multiply from the right (`x @ W`), matching the
//! layout of the original GPT-2 checkpoint. When `unembed.W_U` is absent the
//! unembedding is tied to `embed.W_E` transposed.

use std::path::Path;

use crate::error::Result;
use crate::tensorfile::TensorFile;

use super::{AttentionWeights, Block, LayerNorm, MlpWeights, Model, ModelConfig};

/// Tensor-name builders for the schema above, shared by the loader and by
/// code that writes weight files.
pub mod schema {
    pub const W_E: &str = "embed.W_E";
    pub const W_POS: &str = "pos_embed.W_pos";
    pub const LN_F_W: &str = "ln_f.w";
    pub const LN_F_B: &str = "ln_f.b";
    pub const W_U: &str = "unembed.W_U";
    pub const B_U: &str = "unembed.b_U";

    pub fn block(layer: usize, suffix: &str) -> String {
        format!("blocks.{layer}.{suffix}")
    }
}

impl Model {
    /// Load weights from a container file, checking every tensor's presence,
    /// shape, and finiteness against `config`.
    pub fn load(path: impl AsRef<Path>, config: ModelConfig) -> Result<Model> {
        let tf = TensorFile::read(path)?;
        Model::from_tensor_file(&tf, config)
    }

    pub fn from_tensor_file(tf: &TensorFile, config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let (d, m, v, c) = (
            config.d_model,
            config.d_mlp,
            config.vocab_size,
            config.max_seq_len,
        );

        let w_e = tf.require_2d(schema::W_E, v, d)?;
        let w_pos = tf.require_2d(schema::W_POS, c, d)?;

        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let name = |s: &str| schema::block(l, s);
            blocks.push(Block {
                ln1: LayerNorm {
                    w: tf.require_1d(&name("ln1.w"), d)?,
                    b: tf.require_1d(&name("ln1.b"), d)?,
                },
                attn: AttentionWeights {
                    w_q: tf.require_2d(&name("attn.W_Q"), d, d)?,
                    b_q: tf.require_1d(&name("attn.b_Q"), d)?,
                    w_k: tf.require_2d(&name("attn.W_K"), d, d)?,
                    b_k: tf.require_1d(&name("attn.b_K"), d)?,
                    w_v: tf.require_2d(&name("attn.W_V"), d, d)?,
                    b_v: tf.require_1d(&name("attn.b_V"), d)?,
                    w_o: tf.require_2d(&name("attn.W_O"), d, d)?,
                    b_o: tf.require_1d(&name("attn.b_O"), d)?,
                },
                ln2: LayerNorm {
                    w: tf.require_1d(&name("ln2.w"), d)?,
                    b: tf.require_1d(&name("ln2.b"), d)?,
                },
                mlp: MlpWeights {
                    w_in: tf.require_2d(&name("mlp.W_in"), d, m)?,
                    b_in: tf.require_1d(&name("mlp.b_in"), m)?,
                    w_out: tf.require_2d(&name("mlp.W_out"), m, d)?,
                    b_out: tf.require_1d(&name("mlp.b_out"), d)?,
                },
            });
        }

        let ln_f = LayerNorm {
            w: tf.require_1d(schema::LN_F_W, d)?,
            b: tf.require_1d(schema::LN_F_B, d)?,
        };

        let w_u = if tf.get(schema::W_U).is_some() {
            tf.require_2d(schema::W_U, d, v)?
        } else {
            w_e.t().to_owned()
        };
        let b_u = if tf.get(schema::B_U).is_some() {
            Some(tf.require_1d(schema::B_U, v)?)
        } else {
            None
        };

        Ok(Model {
            config,
            w_e,
            w_pos,
            blocks,
            ln_f,
            w_u,
            b_u,
        })
    }
}
