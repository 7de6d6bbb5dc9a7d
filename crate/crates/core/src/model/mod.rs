//! Minimal decoder-only transformer (GPT-2 family) forward pass with named
//! hook points, activation capture, and activation patching.
//!
//! The architecture is fixed: learned positional embeddings, pre-LayerNorm
//! blocks, multi-head causal attention, a GELU (tanh approximation) MLP with
//! hidden width `4 * d_model`, a final LayerNorm, and a tied or untied
//! unembedding. All arithmetic and accumulation is in `f32`, so a forward
//! pass is bitwise deterministic for fixed weights and inputs.
//!
//! The residual stream is observable and patchable at two sites per block:
//! `resid_pre` (the block input) and `resid_post` (the block output).
//! `resid_post` of layer `l` is the same stream value as `resid_pre` of
//! layer `l + 1`. Patches are applied before captures at the same site, so a
//! capture at the patched hook returns the replacement.

mod load;

pub use load::schema;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Model dimensions. Defaults are the GPT-2 small sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_head")]
    pub d_head: usize,
    #[serde(default = "default_d_mlp")]
    pub d_mlp: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_layernorm_epsilon")]
    pub layernorm_epsilon: f32,
}

fn default_n_layers() -> usize {
    12
}
fn default_d_model() -> usize {
    768
}
fn default_n_heads() -> usize {
    12
}
fn default_d_head() -> usize {
    64
}
fn default_d_mlp() -> usize {
    3072
}
fn default_vocab_size() -> usize {
    50257
}
fn default_max_seq_len() -> usize {
    1024
}
fn default_layernorm_epsilon() -> f32 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::gpt2_small()
    }
}

impl ModelConfig {
    pub fn gpt2_small() -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_head: 64,
            d_mlp: 3072,
            vocab_size: 50257,
            max_seq_len: 1024,
            layernorm_epsilon: 1e-5,
        }
    }

    /// A small config for tests and toy experiments. `d_model = n_heads * d_head`
    /// and `d_mlp = 4 * d_model` as required for the GPT-2 family.
    pub fn toy(n_layers: usize, n_heads: usize, d_head: usize, vocab_size: usize) -> Self {
        let d_model = n_heads * d_head;
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_head,
            d_mlp: 4 * d_model,
            vocab_size,
            max_seq_len: 64,
            layernorm_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::BadModelConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::BadModelConfig(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_mlp != 4 * self.d_model {
            return Err(Error::BadModelConfig(format!(
                "d_mlp {} != 4 * d_model {}",
                self.d_mlp, self.d_model
            )));
        }
        if !(self.layernorm_epsilon.is_finite() && self.layernorm_epsilon > 0.0) {
            return Err(Error::BadModelConfig(
                "layernorm_epsilon must be a small positive real".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Hook points
// ---------------------------------------------------------------------------

/// Residual-stream observation/intervention site within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    ResidPre,
    ResidPost,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::ResidPre => "resid_pre",
            Site::ResidPost => "resid_post",
        }
    }
}

/// A (layer, site, token position) address in the residual stream.
/// Negative positions count from the end of the prompt; `-1` is the last
/// token, the default everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookPoint {
    pub layer: usize,
    pub site: Site,
    pub position: i64,
}

impl HookPoint {
    pub fn resid_pre(layer: usize) -> Self {
        HookPoint {
            layer,
            site: Site::ResidPre,
            position: -1,
        }
    }

    pub fn resid_post(layer: usize) -> Self {
        HookPoint {
            layer,
            site: Site::ResidPost,
            position: -1,
        }
    }

    pub fn at(mut self, position: i64) -> Self {
        self.position = position;
        self
    }

    /// Stream order of the site: `resid_pre l` < `resid_post l` < `resid_pre l+1`.
    fn stream_index(&self) -> usize {
        2 * self.layer
            + match self.site {
                Site::ResidPre => 0,
                Site::ResidPost => 1,
            }
    }

    fn resolve(&self, n_layers: usize, seq_len: usize) -> Result<usize> {
        let err = || Error::UnresolvableHook {
            hook: self.to_string(),
            n_layers,
            seq_len,
        };
        if self.layer >= n_layers {
            return Err(err());
        }
        let pos = if self.position < 0 {
            seq_len as i64 + self.position
        } else {
            self.position
        };
        if pos < 0 || pos as usize >= seq_len {
            return Err(err());
        }
        Ok(pos as usize)
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "blocks.{}.{}[{}]",
            self.layer,
            self.site.as_str(),
            self.position
        )
    }
}

// ---------------------------------------------------------------------------
// Activations and patches
// ---------------------------------------------------------------------------

/// A point in residual-stream space: a dense `d_model`-length f32 vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    values: Array1<f32>,
}

impl Activation {
    pub fn new(values: Array1<f32>) -> Self {
        Activation { values }
    }

    pub fn from_vec(values: Vec<f32>) -> Self {
        Activation {
            values: Array1::from_vec(values),
        }
    }

    /// Construct with a finiteness check, for values arriving from files.
    pub fn validated(values: Array1<f32>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Activation { values })
        } else {
            Err(Error::NonFiniteTensor {
                name: "activation".into(),
            })
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array1<f32> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f32] {
        self.values.as_slice().expect("contiguous activation")
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn l2_distance(&self, other: &Activation) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl Serialize for Activation {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.values.iter())
    }
}

/// Replace the residual stream at `hook` with `replacement` before the
/// stream flows onward.
#[derive(Debug, Clone)]
pub struct PatchSpec {
    pub hook: HookPoint,
    pub replacement: Activation,
}

impl PatchSpec {
    pub fn new(hook: HookPoint, replacement: Activation) -> Self {
        PatchSpec { hook, replacement }
    }
}

/// Full-sequence residual-stream snapshot at `resid_pre` of a layer, used to
/// resume a forward pass without recomputing the layers below.
#[derive(Debug, Clone)]
pub struct ResidState {
    layer: usize,
    state: Array2<f32>,
}

impl ResidState {
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn seq_len(&self) -> usize {
        self.state.nrows()
    }
}

/// Captured activations plus next-token logits at the last position.
/// `logits` is `None` only for [`Model::forward_from`] calls that skip the
/// unembedding.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub captured: BTreeMap<HookPoint, Activation>,
    pub logits: Option<Array1<f32>>,
}

impl ForwardOutput {
    pub fn take(&mut self, hook: &HookPoint) -> Result<Activation> {
        self.captured
            .remove(hook)
            .ok_or_else(|| Error::UnresolvableHook {
                hook: hook.to_string(),
                n_layers: usize::MAX,
                seq_len: usize::MAX,
            })
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub w: Array1<f32>,
    pub b: Array1<f32>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionWeights {
    pub w_q: Array2<f32>,
    pub b_q: Array1<f32>,
    pub w_k: Array2<f32>,
    pub b_k: Array1<f32>,
    pub w_v: Array2<f32>,
    pub b_v: Array1<f32>,
    pub w_o: Array2<f32>,
    pub b_o: Array1<f32>,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpWeights {
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub ln1: LayerNorm,
    pub attn: AttentionWeights,
    pub ln2: LayerNorm,
    pub mlp: MlpWeights,
}

/// A loaded model. Weights are immutable; every forward-pass entry point
/// takes `&self` and is safe to call from many threads at once.
#[derive(Debug, Clone)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) w_e: Array2<f32>,
    pub(crate) w_pos: Array2<f32>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_f: LayerNorm,
    pub(crate) w_u: Array2<f32>,
    pub(crate) b_u: Option<Array1<f32>>,
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// GELU, tanh approximation (the GPT-2 convention).
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn layernorm_rows(x: &Array2<f32>, ln: &LayerNorm, eps: f32) -> Array2<f32> {
    let d = x.ncols() as f32;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let mut var = 0.0f32;
        for v in row.iter() {
            let c = v - mean;
            var += c * c;
        }
        var /= d;
        let inv = 1.0 / (var + eps).sqrt();
        for (v, (&w, &b)) in row.iter_mut().zip(ln.w.iter().zip(ln.b.iter())) {
            *v = (*v - mean) * inv * w + b;
        }
    }
    out
}

fn layernorm_row(x: &Array1<f32>, ln: &LayerNorm, eps: f32) -> Array1<f32> {
    let d = x.len() as f32;
    let mean = x.sum() / d;
    let mut var = 0.0f32;
    for v in x.iter() {
        let c = v - mean;
        var += c * c;
    }
    var /= d;
    let inv = 1.0 / (var + eps).sqrt();
    let mut out = x.clone();
    for (v, (&w, &b)) in out.iter_mut().zip(ln.w.iter().zip(ln.b.iter())) {
        *v = (*v - mean) * inv * w + b;
    }
    out
}

/// Row-wise causal softmax: row `i` attends to columns `0..=i`.
fn causal_softmax_inplace(scores: &mut Array2<f32>) {
    let n = scores.ncols();
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let visible = i + 1;
        let mut max = f32::NEG_INFINITY;
        for j in 0..visible {
            max = max.max(row[j]);
        }
        let mut sum = 0.0f32;
        for j in 0..visible {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum += e;
        }
        for j in 0..visible {
            row[j] /= sum;
        }
        for j in visible..n {
            row[j] = 0.0;
        }
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed(&self, tokens: &[u32]) -> Result<Array2<f32>> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokenSequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        let mut x = Array2::zeros((tokens.len(), self.config.d_model));
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: tok,
                    vocab_size: self.config.vocab_size,
                });
            }
            let row = &self.w_e.row(tok as usize) + &self.w_pos.row(i);
            x.row_mut(i).assign(&row);
        }
        Ok(x)
    }

    fn attention(&self, attn: &AttentionWeights, x: &Array2<f32>) -> Array2<f32> {
        let (n_heads, d_head) = (self.config.n_heads, self.config.d_head);
        let seq = x.nrows();
        let q = x.dot(&attn.w_q) + &attn.b_q;
        let k = x.dot(&attn.w_k) + &attn.b_k;
        let v = x.dot(&attn.w_v) + &attn.b_v;
        let scale = 1.0 / (d_head as f32).sqrt();
        let mut ctx = Array2::zeros((seq, self.config.d_model));
        for h in 0..n_heads {
            let cols = h * d_head..(h + 1) * d_head;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            causal_softmax_inplace(&mut scores);
            let ctx_h = scores.dot(&vh);
            ctx.slice_mut(s![.., cols]).assign(&ctx_h);
        }
        ctx.dot(&attn.w_o) + &attn.b_o
    }

    fn block_forward(&self, block: &Block, x: Array2<f32>) -> Array2<f32> {
        let eps = self.config.layernorm_epsilon;
        let normed = layernorm_rows(&x, &block.ln1, eps);
        let x = x + self.attention(&block.attn, &normed);
        let normed = layernorm_rows(&x, &block.ln2, eps);
        let h = normed.dot(&block.mlp.w_in) + &block.mlp.b_in;
        let h = h.mapv(gelu);
        x + h.dot(&block.mlp.w_out) + &block.mlp.b_out
    }

    fn unembed_last(&self, x: &Array2<f32>) -> Array1<f32> {
        let last = x.row(x.nrows() - 1).to_owned();
        let normed = layernorm_row(&last, &self.ln_f, self.config.layernorm_epsilon);
        let logits = normed.dot(&self.w_u);
        match &self.b_u {
            Some(b) => logits + b,
            None => logits,
        }
    }

    fn run(
        &self,
        mut x: Array2<f32>,
        start_layer: usize,
        patch: Option<&PatchSpec>,
        capture: &[HookPoint],
        need_logits: bool,
    ) -> Result<ForwardOutput> {
        let n_layers = self.config.n_layers;
        let seq_len = x.nrows();
        let start_stream = 2 * start_layer;

        // Resolve and validate everything before touching the stream.
        if let Some(p) = patch {
            if p.replacement.len() != self.config.d_model {
                return Err(Error::DimensionMismatch {
                    expected: self.config.d_model,
                    got: p.replacement.len(),
                });
            }
            let _ = p.hook.resolve(n_layers, seq_len)?;
            if p.hook.stream_index() < start_stream {
                return Err(Error::UnresolvableHook {
                    hook: p.hook.to_string(),
                    n_layers,
                    seq_len,
                });
            }
        }
        for h in capture {
            let _ = h.resolve(n_layers, seq_len)?;
            if h.stream_index() < start_stream {
                return Err(Error::UnresolvableHook {
                    hook: h.to_string(),
                    n_layers,
                    seq_len,
                });
            }
        }

        let mut captured = BTreeMap::new();
        let mut visit = |x: &mut Array2<f32>, layer: usize, site: Site| {
            if let Some(p) = patch {
                if p.hook.layer == layer && p.hook.site == site {
                    let pos = p.hook.resolve(n_layers, seq_len).expect("validated");
                    x.row_mut(pos).assign(p.replacement.values());
                }
            }
            for h in capture {
                if h.layer == layer && h.site == site {
                    let pos = h.resolve(n_layers, seq_len).expect("validated");
                    captured.insert(*h, Activation::new(x.row(pos).to_owned()));
                }
            }
        };

        for layer in start_layer..n_layers {
            visit(&mut x, layer, Site::ResidPre);
            x = self.block_forward(&self.blocks[layer], x);
            visit(&mut x, layer, Site::ResidPost);
        }

        let logits = need_logits.then(|| self.unembed_last(&x));
        Ok(ForwardOutput { captured, logits })
    }

    /// Run the model on `tokens`, optionally applying one patch, capturing
    /// the requested hook points, and returning next-token logits at the
    /// last position.
    pub fn forward(
        &self,
        tokens: &[u32],
        patch: Option<&PatchSpec>,
        capture: &[HookPoint],
    ) -> Result<ForwardOutput> {
        let x = self.embed(tokens)?;
        self.run(x, 0, patch, capture, true)
    }

    /// Residual-stream snapshot at `resid_pre` of `layer`, for later
    /// [`Model::forward_from`] calls on the same prompt.
    pub fn state_at(&self, tokens: &[u32], layer: usize) -> Result<ResidState> {
        if layer >= self.config.n_layers {
            return Err(Error::UnresolvableHook {
                hook: HookPoint::resid_pre(layer).to_string(),
                n_layers: self.config.n_layers,
                seq_len: tokens.len(),
            });
        }
        let mut x = self.embed(tokens)?;
        for l in 0..layer {
            x = self.block_forward(&self.blocks[l], x);
        }
        Ok(ResidState { layer, state: x })
    }

    /// Resume a forward pass from a snapshot. Produces bitwise the same
    /// values as a full [`Model::forward`] with the same patch and captures,
    /// as long as every hook lies at or after the snapshot layer.
    pub fn forward_from(
        &self,
        state: &ResidState,
        patch: Option<&PatchSpec>,
        capture: &[HookPoint],
        need_logits: bool,
    ) -> Result<ForwardOutput> {
        self.run(
            state.state.clone(),
            state.layer,
            patch,
            capture,
            need_logits,
        )
    }

    /// The single activation at `hook` for one prompt.
    pub fn capture_at(&self, tokens: &[u32], hook: &HookPoint) -> Result<Activation> {
        let mut out = self.forward_partial(tokens, hook)?;
        out.take(hook)
    }

    /// One activation per prompt, captured at `hook` (last token position by
    /// default). Prompts are processed in parallel; output order matches
    /// input order.
    pub fn collect_activations(
        &self,
        prompts: &[Vec<u32>],
        hook: &HookPoint,
    ) -> Result<Vec<Activation>> {
        if prompts.is_empty() {
            return Err(Error::NoActivations);
        }
        prompts
            .par_iter()
            .map(|tokens| self.capture_at(tokens, hook))
            .collect()
    }

    /// Forward pass that stops as soon as `hook` has been captured, skipping
    /// the remaining layers and the unembedding.
    fn forward_partial(&self, tokens: &[u32], hook: &HookPoint) -> Result<ForwardOutput> {
        let mut x = self.embed(tokens)?;
        let pos = hook.resolve(self.config.n_layers, tokens.len())?;
        let mut captured = BTreeMap::new();
        for layer in 0..=hook.layer {
            if layer == hook.layer && hook.site == Site::ResidPre {
                break;
            }
            x = self.block_forward(&self.blocks[layer], x);
        }
        captured.insert(*hook, Activation::new(x.row(pos).to_owned()));
        Ok(ForwardOutput {
            captured,
            logits: None,
        })
    }

    /// The final LayerNorm, exposed so a readout can optionally be taken
    /// after it rather than on the raw block output.
    pub fn apply_final_ln(&self, a: &Activation) -> Activation {
        Activation::new(layernorm_row(
            a.values(),
            &self.ln_f,
            self.config.layernorm_epsilon,
        ))
    }
}

#[cfg(test)]
pub(crate) mod tests;
