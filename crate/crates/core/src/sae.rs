//! Sparse-autoencoder encode/decode over residual-stream activations, plus
//! per-latent statistics: firing frequency, the dead-latent set, and
//! decoder-direction geometry.
//!
//! The architecture is the standard single-hidden-layer form with the
//! decoder bias subtracted before encoding:
//!
//! ```text
//! z_i = relu(W_enc[:, i] . (a - b_dec) + b_enc[i])
//! a'  = b_dec + sum_i z_i . W_dec[i, :]
//! ```
//!
//! Weight files use the named-tensor container with the keys `W_enc`
//! (`[d_model, n_latents]`), `b_enc` (`[n_latents]`), `W_dec`
//! (`[n_latents, d_model]`, rows are latent directions), and `b_dec`
//! (`[d_model]`), the layout released GPT-2 residual SAEs ship in.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::ops::Add;
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Activation;
use crate::tensorfile::TensorFile;

// ---------------------------------------------------------------------------
// LatentVector
// ---------------------------------------------------------------------------

/// A sparse SAE code: strictly positive activation values keyed by latent
/// index, entries sorted by index with no duplicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentVector {
    entries: Vec<(u32, f32)>,
}

impl LatentVector {
    pub fn empty() -> Self {
        LatentVector {
            entries: Vec::new(),
        }
    }

    /// Build from arbitrary (index, value) pairs, validating the invariants:
    /// values strictly positive and finite, indices unique.
    pub fn from_entries(mut entries: Vec<(u32, f32)>) -> Result<Self> {
        entries.sort_by_key(|&(i, _)| i);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::BadLatentVector(format!(
                    "duplicate index {}",
                    w[0].0
                )));
            }
        }
        for &(i, v) in &entries {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::BadLatentVector(format!(
                    "value {v} at index {i} is not strictly positive and finite"
                )));
            }
        }
        Ok(LatentVector { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f32)> + '_ {
        self.entries.iter().copied()
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn get(&self, index: u32) -> Option<f32> {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .ok()
            .map(|slot| self.entries[slot].1)
    }

    pub fn contains(&self, index: u32) -> bool {
        self.get(index).is_some()
    }

    /// The active latent with the highest value; ties resolve to the
    /// smallest index.
    pub fn top_latent(&self) -> Option<(u32, f32)> {
        self.entries
            .iter()
            .copied()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
    }

    /// Values sorted descending (the value multiset).
    pub fn sorted_values(&self) -> Vec<f32> {
        let mut v: Vec<f32> = self.entries.iter().map(|&(_, x)| x).collect();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        v
    }

    /// Sum of values (the L1 norm; values are positive by invariant).
    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v as f64).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(_, v)| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

impl Add for &LatentVector {
    type Output = LatentVector;

    /// Entrywise sum; values stay positive, so the invariants hold.
    fn add(self, rhs: &LatentVector) -> LatentVector {
        let mut entries = Vec::with_capacity(self.len() + rhs.len());
        let (mut a, mut b) = (
            self.entries.iter().peekable(),
            rhs.entries.iter().peekable(),
        );
        loop {
            match (a.peek(), b.peek()) {
                (Some(&&(ia, va)), Some(&&(ib, vb))) => {
                    if ia < ib {
                        entries.push((ia, va));
                        a.next();
                    } else if ib < ia {
                        entries.push((ib, vb));
                        b.next();
                    } else {
                        entries.push((ia, va + vb));
                        a.next();
                        b.next();
                    }
                }
                (Some(&&e), None) => {
                    entries.push(e);
                    a.next();
                }
                (None, Some(&&e)) => {
                    entries.push(e);
                    b.next();
                }
                (None, None) => break,
            }
        }
        LatentVector { entries }
    }
}

// ---------------------------------------------------------------------------
// SparsityTable
// ---------------------------------------------------------------------------

/// Per-latent firing frequency over a reference corpus.
///
/// "Similar sparsity" is measured as `|log10(f_i + eps) - log10(f_j + eps)|`
/// with `eps = 1 / (10 * sample_count)`, since frequencies span orders of
/// magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityTable {
    freq: Vec<f64>,
    log_freq: Vec<f64>,
    sample_count: usize,
}

#[derive(Serialize, Deserialize)]
struct SparsitySidecar {
    n_latents: usize,
    sample_count: usize,
}

impl SparsityTable {
    pub fn new(freq: Vec<f64>, sample_count: usize) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::NoActivations);
        }
        if freq.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::BadLatentVector(
                "firing frequencies must lie in [0, 1]".into(),
            ));
        }
        let eps = 1.0 / (10.0 * sample_count as f64);
        let log_freq = freq.iter().map(|f| (f + eps).log10()).collect();
        Ok(SparsityTable {
            freq,
            log_freq,
            sample_count,
        })
    }

    pub fn n_latents(&self) -> usize {
        self.freq.len()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn frequency(&self, latent: u32) -> f64 {
        self.freq[latent as usize]
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freq
    }

    pub fn log_frequency(&self, latent: u32) -> f64 {
        self.log_freq[latent as usize]
    }

    /// Distance in the sparsity ordering.
    pub fn sparsity_distance(&self, i: u32, j: u32) -> f64 {
        (self.log_freq[i as usize] - self.log_freq[j as usize]).abs()
    }

    /// A latent is dead iff it never fired on the reference corpus.
    pub fn is_dead(&self, latent: u32) -> bool {
        self.freq[latent as usize] == 0.0
    }

    /// Flat binary of `n_latents` little-endian f64 frequencies, plus a JSON
    /// sidecar (`<path>.json`) carrying the sample count.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path)?;
        for v in &self.freq {
            f.write_all(&v.to_le_bytes())?;
        }
        let sidecar = SparsitySidecar {
            n_latents: self.freq.len(),
            sample_count: self.sample_count,
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar: SparsitySidecar =
            serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let bytes = fs::read(path)?;
        if bytes.len() != sidecar.n_latents * 8 {
            return Err(Error::BadTensorFile {
                path: path.to_path_buf(),
                reason: format!(
                    "expected {} bytes for {} latents, found {}",
                    sidecar.n_latents * 8,
                    sidecar.n_latents,
                    bytes.len()
                ),
            });
        }
        let freq = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        SparsityTable::new(freq, sidecar.sample_count)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

/// Latent indices that never fire on the reference corpus.
pub fn dead_latents(table: &SparsityTable) -> BTreeSet<u32> {
    (0..table.n_latents() as u32)
        .filter(|&i| table.is_dead(i))
        .collect()
}

// ---------------------------------------------------------------------------
// SaeParams
// ---------------------------------------------------------------------------

pub mod sae_schema {
    pub const W_ENC: &str = "W_enc";
    pub const B_ENC: &str = "b_enc";
    pub const W_DEC: &str = "W_dec";
    pub const B_DEC: &str = "b_dec";
}

/// Immutable SAE weights. All operations are pure and parallel-safe.
#[derive(Debug, Clone)]
pub struct SaeParams {
    /// `[d_model, n_latents]`; column `i` is the encoder direction of latent `i`.
    w_enc: Array2<f32>,
    b_enc: Array1<f32>,
    /// `[n_latents, d_model]`; row `i` is the decoder direction of latent `i`.
    w_dec: Array2<f32>,
    b_dec: Array1<f32>,
    /// Cached decoder row norms (f64), all strictly positive.
    dec_norms: Vec<f64>,
}

impl SaeParams {
    pub fn new(
        w_enc: Array2<f32>,
        b_enc: Array1<f32>,
        w_dec: Array2<f32>,
        b_dec: Array1<f32>,
    ) -> Result<Self> {
        let (d_model, n_latents) = w_enc.dim();
        if b_enc.len() != n_latents {
            return Err(Error::DimensionMismatch {
                expected: n_latents,
                got: b_enc.len(),
            });
        }
        if w_dec.dim() != (n_latents, d_model) {
            return Err(Error::ShapeMismatch {
                name: sae_schema::W_DEC.into(),
                expected: vec![n_latents, d_model],
                got: vec![w_dec.nrows(), w_dec.ncols()],
            });
        }
        if b_dec.len() != d_model {
            return Err(Error::DimensionMismatch {
                expected: d_model,
                got: b_dec.len(),
            });
        }
        for (name, ok) in [
            (sae_schema::W_ENC, w_enc.iter().all(|v| v.is_finite())),
            (sae_schema::B_ENC, b_enc.iter().all(|v| v.is_finite())),
            (sae_schema::W_DEC, w_dec.iter().all(|v| v.is_finite())),
            (sae_schema::B_DEC, b_dec.iter().all(|v| v.is_finite())),
        ] {
            if !ok {
                return Err(Error::NonFiniteTensor { name: name.into() });
            }
        }
        let mut dec_norms = Vec::with_capacity(n_latents);
        for (i, row) in w_dec.rows().into_iter().enumerate() {
            let norm = row
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormRow { index: i });
            }
            dec_norms.push(norm);
        }
        Ok(SaeParams {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            dec_norms,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let tf = TensorFile::read(path)?;
        Self::from_tensor_file(&tf)
    }

    /// Dimensions are inferred from the tensors; `b_enc` and `b_dec`
    /// disambiguate the two axes of `W_enc` when it is square.
    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        let b_dec_raw = tf.require(sae_schema::B_DEC)?;
        let b_enc_raw = tf.require(sae_schema::B_ENC)?;
        let d_model = b_dec_raw.numel();
        let n_latents = b_enc_raw.numel();
        let w_enc = tf.require_2d(sae_schema::W_ENC, d_model, n_latents)?;
        let b_enc = tf.require_1d(sae_schema::B_ENC, n_latents)?;
        let w_dec = tf.require_2d(sae_schema::W_DEC, n_latents, d_model)?;
        let b_dec = tf.require_1d(sae_schema::B_DEC, d_model)?;
        Self::new(w_enc, b_enc, w_dec, b_dec)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut tf = TensorFile::new();
        tf.insert_array2(sae_schema::W_ENC, &self.w_enc);
        tf.insert_array1(sae_schema::B_ENC, &self.b_enc);
        tf.insert_array2(sae_schema::W_DEC, &self.w_dec);
        tf.insert_array1(sae_schema::B_DEC, &self.b_dec);
        tf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn n_latents(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn b_dec(&self) -> &Array1<f32> {
        &self.b_dec
    }

    pub fn decoder_row(&self, latent: u32) -> ndarray::ArrayView1<'_, f32> {
        self.w_dec.row(latent as usize)
    }

    fn check_latent(&self, latent: u32) -> Result<()> {
        if (latent as usize) < self.n_latents() {
            Ok(())
        } else {
            Err(Error::InvalidLatent {
                index: latent as usize,
                n_latents: self.n_latents(),
            })
        }
    }

    /// Encode: relu of the affine encoder applied to `a - b_dec`; only
    /// strictly positive values are stored.
    pub fn encode(&self, a: &Activation) -> Result<LatentVector> {
        if a.len() != self.d_model() {
            return Err(Error::DimensionMismatch {
                expected: self.d_model(),
                got: a.len(),
            });
        }
        let delta = a.values() - &self.b_dec;
        let pre = delta.dot(&self.w_enc) + &self.b_enc;
        let entries = pre
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v > 0.0)
            .map(|(i, &v)| (i as u32, v))
            .collect();
        Ok(LatentVector { entries })
    }

    /// Decode: `b_dec + sum_i z_i * W_dec[i, :]`, accumulated in ascending
    /// latent order.
    pub fn decode(&self, z: &LatentVector) -> Result<Activation> {
        let mut out = self.b_dec.clone();
        for (i, v) in z.iter() {
            self.check_latent(i)?;
            out.scaled_add(v, &self.w_dec.row(i as usize));
        }
        Ok(Activation::new(out))
    }

    /// Firing frequency of every latent over `activations`.
    pub fn estimate_sparsity(&self, activations: &[Activation]) -> Result<SparsityTable> {
        if activations.is_empty() {
            return Err(Error::NoActivations);
        }
        let n = self.n_latents();
        let counts = activations
            .par_iter()
            .try_fold(
                || vec![0u64; n],
                |mut counts, a| -> Result<Vec<u64>> {
                    for (i, _) in self.encode(a)?.iter() {
                        counts[i as usize] += 1;
                    }
                    Ok(counts)
                },
            )
            .try_reduce(
                || vec![0u64; n],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                    Ok(a)
                },
            )?;
        let total = activations.len();
        let freq = counts.iter().map(|&c| c as f64 / total as f64).collect();
        SparsityTable::new(freq, total)
    }

    /// Cosine similarity of two decoder directions; accumulates in f64 and
    /// clamps to `[-1, 1]`.
    pub fn latent_cosine(&self, i: u32, j: u32) -> Result<f64> {
        self.check_latent(i)?;
        self.check_latent(j)?;
        let dot: f64 = self
            .w_dec
            .row(i as usize)
            .iter()
            .zip(self.w_dec.row(j as usize).iter())
            .map(|(&a, &b)| (a as f64) * (b as f64))
            .sum();
        Ok((dot / (self.dec_norms[i as usize] * self.dec_norms[j as usize])).clamp(-1.0, 1.0))
    }

    /// Cosine of every decoder direction against latent `i`'s, computed with
    /// the same formula as [`SaeParams::latent_cosine`].
    pub fn cosines_to(&self, i: u32) -> Result<Vec<f64>> {
        self.check_latent(i)?;
        let row_i = self.w_dec.row(i as usize);
        let norm_i = self.dec_norms[i as usize];
        Ok(self
            .w_dec
            .rows()
            .into_iter()
            .zip(self.dec_norms.iter())
            .map(|(row, &norm)| {
                let dot: f64 = row
                    .iter()
                    .zip(row_i.iter())
                    .map(|(&a, &b)| (a as f64) * (b as f64))
                    .sum();
                (dot / (norm * norm_i)).clamp(-1.0, 1.0)
            })
            .collect())
    }

    /// Cosine similarity of two activations with respect to the decoder
    /// bias: the cosine of `a - b_dec` and `b - b_dec`.
    pub fn activation_cosine_about_bias(&self, a: &Activation, b: &Activation) -> Result<f64> {
        for act in [a, b] {
            if act.len() != self.d_model() {
                return Err(Error::DimensionMismatch {
                    expected: self.d_model(),
                    got: act.len(),
                });
            }
        }
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for ((&x, &y), &c) in a
            .values()
            .iter()
            .zip(b.values().iter())
            .zip(self.b_dec.iter())
        {
            let da = (x - c) as f64;
            let db = (y - c) as f64;
            dot += da * db;
            na += da * da;
            nb += db * db;
        }
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNormAboutBias);
        }
        Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_sae(d_model: usize, n_latents: usize, seed: u64) -> SaeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |n: usize, scale: f32| -> Vec<f32> {
            (0..n)
                .map(|_| (rng.gen::<f32>() - 0.5) * 2.0 * scale)
                .collect()
        };
        let w_enc =
            Array2::from_shape_vec((d_model, n_latents), gen(d_model * n_latents, 1.0)).unwrap();
        let b_enc = Array1::from_vec(gen(n_latents, 0.1));
        let w_dec =
            Array2::from_shape_vec((n_latents, d_model), gen(n_latents * d_model, 1.0)).unwrap();
        let b_dec = Array1::from_vec(gen(d_model, 0.5));
        SaeParams::new(w_enc, b_enc, w_dec, b_dec).unwrap()
    }

    /// Independent dense encode: plain f64 loops, no ndarray dot. Returns
    /// relu of the pre-activation for every latent.
    fn dense_reference_encode(sae: &SaeParams, a: &Activation) -> Vec<f64> {
        let d = sae.d_model();
        (0..sae.n_latents())
            .map(|i| {
                let mut acc = sae.b_enc[i] as f64;
                for j in 0..d {
                    acc += (a.values()[j] as f64 - sae.b_dec[j] as f64) * sae.w_enc[[j, i]] as f64;
                }
                acc.max(0.0)
            })
            .collect()
    }

    #[test]
    fn encode_at_bias_with_zero_encoder_bias_is_empty() {
        let mut sae = random_sae(8, 16, 0);
        sae.b_enc = Array1::zeros(16);
        let a = Activation::new(sae.b_dec.clone());
        assert!(sae.encode(&a).unwrap().is_empty());
    }

    #[test]
    fn encode_matches_dense_reference() {
        let sae = random_sae(12, 40, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = Activation::from_vec((0..12).map(|_| rng.gen::<f32>() * 4.0 - 2.0).collect());
            let z = sae.encode(&a).unwrap();
            let want = dense_reference_encode(&sae, &a);
            let scale = want.iter().cloned().fold(1.0f64, f64::max);
            for (i, w) in want.iter().enumerate() {
                let got = z.get(i as u32).unwrap_or(0.0) as f64;
                assert!(
                    (got - w).abs() / scale <= 1e-6,
                    "latent {i}: {got} vs {w} (scale {scale})"
                );
            }
        }
    }

    #[test]
    fn encode_values_strictly_positive() {
        let sae = random_sae(10, 64, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = Activation::from_vec((0..10).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect());
            let z = sae.encode(&a).unwrap();
            assert!(z.iter().all(|(_, v)| v > 0.0));
        }
    }

    #[test]
    fn decode_empty_is_exactly_b_dec() {
        let sae = random_sae(6, 12, 5);
        let out = sae.decode(&LatentVector::empty()).unwrap();
        assert_eq!(out.values(), &sae.b_dec);
    }

    #[test]
    fn decode_one_hot_is_bias_plus_row() {
        let sae = random_sae(6, 12, 6);
        let z = LatentVector::from_entries(vec![(7, 1.0)]).unwrap();
        let out = sae.decode(&z).unwrap();
        let want = &sae.b_dec + &sae.w_dec.row(7);
        assert_eq!(out.values(), &want);
    }

    #[test]
    fn decode_rejects_out_of_range_latent() {
        let sae = random_sae(6, 12, 7);
        let z = LatentVector::from_entries(vec![(12, 1.0)]).unwrap();
        assert!(matches!(
            sae.decode(&z),
            Err(Error::InvalidLatent { index: 12, .. })
        ));
    }

    /// A low-loss SAE without training: orthonormal decoder rows (via
    /// Gram-Schmidt) with `W_enc = W_dec^T` recover sparse nonnegative codes
    /// exactly up to rounding.
    fn orthonormal_sae(d_model: usize, n_latents: usize, seed: u64) -> SaeParams {
        assert!(n_latents <= d_model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        while rows.len() < n_latents {
            let mut v: Vec<f64> = (0..d_model).map(|_| rng.gen::<f64>() - 0.5).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.iter().map(|x| x / norm).collect());
            }
        }
        let flat: Vec<f32> = rows.iter().flatten().map(|&x| x as f32).collect();
        let w_dec = Array2::from_shape_vec((n_latents, d_model), flat).unwrap();
        let w_enc = w_dec.t().to_owned();
        SaeParams::new(
            w_enc,
            Array1::zeros(n_latents),
            w_dec,
            Array1::from_vec((0..d_model).map(|i| (i as f32) * 0.01).collect()),
        )
        .unwrap()
    }

    #[test]
    fn low_loss_sae_reconstructs_sparse_inputs() {
        let sae = orthonormal_sae(32, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            // input = b_dec + positive combination of a few decoder rows
            let mut x = sae.b_dec.clone();
            for _ in 0..4 {
                let i = rng.gen_range(0..16);
                x.scaled_add(rng.gen::<f32>() + 0.5, &sae.w_dec.row(i));
            }
            let a = Activation::new(x);
            let recon = sae.decode(&sae.encode(&a).unwrap()).unwrap();
            let err = recon.l2_distance(&a) / a.norm().max(1.0);
            assert!(err <= 1e-4, "reconstruction error {err}");
        }
    }

    #[test]
    fn sparsity_counts() {
        // Encoder aligned with the two axes; inputs fire latent 0 in 5 of 10
        // samples and latent 1 never.
        let w_enc = array![[1.0f32, 0.0], [0.0, 1.0]];
        let w_dec = array![[1.0f32, 0.0], [0.0, 1.0]];
        let sae = SaeParams::new(w_enc, Array1::zeros(2), w_dec, Array1::zeros(2)).unwrap();
        let acts: Vec<Activation> = (0..10)
            .map(|k| Activation::from_vec(vec![if k < 5 { 1.0 } else { -1.0 }, -1.0]))
            .collect();
        let table = sae.estimate_sparsity(&acts).unwrap();
        assert_eq!(table.frequency(0), 0.5);
        assert_eq!(table.frequency(1), 0.0);
        assert_eq!(table.sample_count(), 10);
    }

    #[test]
    fn all_zero_encoder_never_fires() {
        let sae = SaeParams::new(
            Array2::zeros((4, 8)),
            Array1::zeros(8),
            Array2::ones((8, 4)),
            Array1::zeros(4),
        )
        .unwrap();
        let acts: Vec<Activation> = (0..6)
            .map(|k| Activation::from_vec(vec![k as f32; 4]))
            .collect();
        let table = sae.estimate_sparsity(&acts).unwrap();
        assert!(table.frequencies().iter().all(|&f| f == 0.0));
        assert_eq!(dead_latents(&table).len(), 8);
    }

    #[test]
    fn sparsity_matches_brute_force_recount() {
        let sae = random_sae(10, 32, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let acts: Vec<Activation> = (0..100)
            .map(|_| Activation::from_vec((0..10).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect()))
            .collect();
        let table = sae.estimate_sparsity(&acts).unwrap();
        for i in 0..32u32 {
            let count = acts
                .iter()
                .filter(|a| sae.encode(a).unwrap().contains(i))
                .count();
            assert_eq!(table.frequency(i), count as f64 / 100.0);
        }
    }

    #[test]
    fn dead_latent_sets() {
        let one_dead = SparsityTable::new(vec![0.5, 0.0, 0.1], 10).unwrap();
        assert_eq!(dead_latents(&one_dead), BTreeSet::from([1]));
        let none_dead = SparsityTable::new(vec![0.5, 0.2, 0.1], 10).unwrap();
        assert!(dead_latents(&none_dead).is_empty());
    }

    #[test]
    fn latent_cosine_identities() {
        let sae = random_sae(16, 24, 12);
        for i in 0..24u32 {
            assert!((sae.latent_cosine(i, i).unwrap() - 1.0).abs() < 1e-9);
        }
        // orthogonal rows
        let w_dec = array![[1.0f32, 0.0], [0.0, 2.0]];
        let sae2 = SaeParams::new(
            Array2::zeros((2, 2)),
            Array1::zeros(2),
            w_dec,
            Array1::zeros(2),
        )
        .unwrap();
        assert_eq!(sae2.latent_cosine(0, 1).unwrap(), 0.0);
    }

    #[test]
    fn latent_cosine_matches_direct_formula_and_is_symmetric() {
        let sae = random_sae(16, 24, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let i = rng.gen_range(0..24u32);
            let j = rng.gen_range(0..24u32);
            let c = sae.latent_cosine(i, j).unwrap();
            // exact symmetry
            assert_eq!(c.to_bits(), sae.latent_cosine(j, i).unwrap().to_bits());
            let (a, b) = (sae.w_dec.row(i as usize), sae.w_dec.row(j as usize));
            let dot: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((c - dot / (na * nb)).abs() <= 1e-6);
            // bulk path agrees with the pairwise path exactly
            assert_eq!(
                sae.cosines_to(i).unwrap()[j as usize].to_bits(),
                c.to_bits()
            );
        }
    }

    #[test]
    fn activation_cosine_about_bias_identities() {
        let sae = random_sae(16, 8, 15);
        let a = Activation::from_vec((0..16).map(|i| i as f32 * 0.3 - 1.0).collect());
        assert!((sae.activation_cosine_about_bias(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let at_bias = Activation::new(sae.b_dec.clone());
        assert!(matches!(
            sae.activation_cosine_about_bias(&a, &at_bias),
            Err(Error::ZeroNormAboutBias)
        ));
    }

    #[test]
    fn table_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sparsity.bin");
        let table = SparsityTable::new(vec![0.125, 0.0, 0.5, 1.0], 16).unwrap();
        table.save(&path).unwrap();
        assert_eq!(SparsityTable::load(&path).unwrap(), table);
    }

    #[test]
    fn sae_weights_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.safetensors");
        let sae = random_sae(8, 20, 16);
        sae.save(&path).unwrap();
        let back = SaeParams::load(&path).unwrap();
        assert_eq!(back.w_enc, sae.w_enc);
        assert_eq!(back.w_dec, sae.w_dec);
        assert_eq!(back.b_enc, sae.b_enc);
        assert_eq!(back.b_dec, sae.b_dec);
    }

    #[test]
    fn zero_norm_decoder_row_rejected() {
        let mut w_dec = Array2::<f32>::ones((4, 8));
        w_dec.row_mut(2).fill(0.0);
        assert!(matches!(
            SaeParams::new(
                Array2::zeros((8, 4)),
                Array1::zeros(4),
                w_dec,
                Array1::zeros(8)
            ),
            Err(Error::ZeroNormRow { index: 2 })
        ));
    }

    #[test]
    fn latent_vector_invariants() {
        assert!(LatentVector::from_entries(vec![(1, 1.0), (1, 2.0)]).is_err());
        assert!(LatentVector::from_entries(vec![(1, 0.0)]).is_err());
        assert!(LatentVector::from_entries(vec![(1, -1.0)]).is_err());
        assert!(LatentVector::from_entries(vec![(1, f32::NAN)]).is_err());
        let z = LatentVector::from_entries(vec![(9, 1.0), (2, 3.0)]).unwrap();
        assert_eq!(z.indices().collect::<Vec<_>>(), vec![2, 9]);
        assert_eq!(z.top_latent(), Some((2, 3.0)));
    }

    #[test]
    fn top_latent_tie_breaks_to_smallest_index() {
        let z = LatentVector::from_entries(vec![(5, 2.0), (3, 2.0), (8, 1.0)]).unwrap();
        assert_eq!(z.top_latent(), Some((3, 2.0)));
    }

    /// SAE on a dyadic grid: decoder entries are multiples of 1/256 in
    /// [-2, 2], bias likewise, latent values multiples of 1/2 in (0, 8].
    /// Every product and partial sum is then exactly representable in f32,
    /// so decode is exactly linear and the invariant can be asserted with
    /// bitwise equality.
    fn dyadic_sae(rng: &mut ChaCha8Rng, d_model: usize, n_latents: usize) -> SaeParams {
        let grid = |rng: &mut ChaCha8Rng| (rng.gen_range(-512i32..=512) as f32) / 256.0;
        let w_dec = Array2::from_shape_fn((n_latents, d_model), |_| {
            let mut v = grid(rng);
            if v == 0.0 {
                v = 1.0 / 256.0;
            }
            v
        });
        let b_dec = Array1::from_shape_fn(d_model, |_| grid(rng));
        SaeParams::new(
            Array2::zeros((d_model, n_latents)),
            Array1::zeros(n_latents),
            w_dec,
            b_dec,
        )
        .unwrap()
    }

    fn dyadic_code(rng: &mut ChaCha8Rng, n_latents: usize) -> LatentVector {
        let k = rng.gen_range(1..=n_latents / 2);
        let mut entries = Vec::new();
        let mut used = std::collections::BTreeSet::new();
        while entries.len() < k {
            let i = rng.gen_range(0..n_latents as u32);
            if used.insert(i) {
                entries.push((i, (rng.gen_range(1i32..=16) as f32) / 2.0));
            }
        }
        LatentVector::from_entries(entries).unwrap()
    }

    #[test]
    fn decode_linearity_exact_on_dyadic_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let sae = dyadic_sae(&mut rng, 12, 24);
            let z1 = dyadic_code(&mut rng, 24);
            let z2 = dyadic_code(&mut rng, 24);
            let lhs = sae.decode(&(&z1 + &z2)).unwrap().values() - sae.b_dec();
            let rhs = (sae.decode(&z1).unwrap().values() - sae.b_dec())
                + (sae.decode(&z2).unwrap().values() - sae.b_dec());
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn decode_linearity_approximate_in_general() {
        let sae = random_sae(16, 40, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                let mut entries = Vec::new();
                for i in 0..40u32 {
                    if rng.gen_bool(0.2) {
                        entries.push((i, rng.gen::<f32>() * 3.0 + 0.01));
                    }
                }
                LatentVector::from_entries(entries).unwrap()
            };
            let z1 = mk(&mut rng);
            let z2 = mk(&mut rng);
            let lhs = sae.decode(&(&z1 + &z2)).unwrap().values() - sae.b_dec();
            let rhs = (sae.decode(&z1).unwrap().values() - sae.b_dec())
                + (sae.decode(&z2).unwrap().values() - sae.b_dec());
            let num = (&lhs - &rhs).iter().map(|v| v.abs()).fold(0.0f32, f32::max);
            let den = rhs.iter().map(|v| v.abs()).fold(0.0f32, f32::max).max(1.0);
            assert!(num / den <= 1e-4);
        }
    }
}
