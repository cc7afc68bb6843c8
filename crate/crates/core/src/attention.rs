//! Frame-wise causal temporal attention with synthetic projections.
//!
//! Every token of the current frame attends to every cached token and to
//! every token of its own frame. Frames in the future never appear in the
//! key/value set, which is all the causality the temporal branch needs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, MultiHeadTensor, RealMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Camera,
    Register,
    Patch,
}

/// One frame's token embeddings: camera token, then `registers` register
/// tokens, then patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens {
    pub frame_index: usize,
    registers: usize,
    embeddings: RealMatrix,
}

impl FrameTokens {
    pub fn new(frame_index: usize, registers: usize, embeddings: RealMatrix) -> Result<Self> {
        if embeddings.rows() <= 1 + registers {
            return Err(Error::dim(format!(
                "frame with {} rows cannot hold a camera token, {registers} registers and any patches",
                embeddings.rows()
            )));
        }
        Ok(Self {
            frame_index,
            registers,
            embeddings,
        })
    }

    pub fn embeddings(&self) -> &RealMatrix {
        &self.embeddings
    }

    pub fn registers(&self) -> usize {
        self.registers
    }

    /// Camera plus register tokens.
    pub fn special_tokens(&self) -> usize {
        1 + self.registers
    }

    pub fn patch_tokens(&self) -> usize {
        self.embeddings.rows() - self.special_tokens()
    }

    pub fn token_count(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn token_kind(&self, row: usize) -> TokenKind {
        token_kind(row, self.registers)
    }
}

pub fn token_kind(row: usize, registers: usize) -> TokenKind {
    match row {
        0 => TokenKind::Camera,
        r if r <= registers => TokenKind::Register,
        _ => TokenKind::Patch,
    }
}

/// Q/K/V projections for one layer.
///
/// Keys are computed as `(x W_k + key_bias) * outlier_channel_scales`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: RealMatrix,
    pub w_k: RealMatrix,
    pub w_v: RealMatrix,
    pub key_bias: Vec<f32>,
    pub outlier_channel_scales: Vec<f32>,
    heads: usize,
    d_head: usize,
}

impl LayerWeights {
    /// Plain projections: zero key bias, unit channel scales.
    pub fn new(w_q: RealMatrix, w_k: RealMatrix, w_v: RealMatrix, heads: usize, d_head: usize) -> Result<Self> {
        let width = heads * d_head;
        Self::with_key_channels(w_q, w_k, w_v, heads, d_head, vec![0.0; width], vec![1.0; width])
    }

    pub fn with_key_channels(
        w_q: RealMatrix,
        w_k: RealMatrix,
        w_v: RealMatrix,
        heads: usize,
        d_head: usize,
        key_bias: Vec<f32>,
        outlier_channel_scales: Vec<f32>,
    ) -> Result<Self> {
        let width = heads * d_head;
        if heads == 0 || d_head == 0 {
            return Err(Error::param("heads and d_head must be positive"));
        }
        if w_q.shape() != w_k.shape() || w_q.shape() != w_v.shape() {
            return Err(Error::dim(format!(
                "projection shapes differ: q {:?}, k {:?}, v {:?}",
                w_q.shape(),
                w_k.shape(),
                w_v.shape()
            )));
        }
        if w_q.cols() != width {
            return Err(Error::dim(format!(
                "projection has {} columns, heads * d_head = {width}",
                w_q.cols()
            )));
        }
        if outlier_channel_scales.len() != width || key_bias.len() != width {
            return Err(Error::dim(format!("key channel vectors must have length {width}")));
        }
        if outlier_channel_scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::param("outlier channel scales must be finite and positive"));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            key_bias,
            outlier_channel_scales,
            heads,
            d_head,
        })
    }

    /// Gaussian projections with std `1/sqrt(d_model)`.
    ///
    /// The `outlier_channels` key channels (evenly spaced over `heads * d_head`)
    /// are made high-magnitude and consistent in sign: each carries a constant
    /// offset of `outlier_amp * E|k|` while its token-to-token variation keeps
    /// ordinary scale. A constant key offset adds the same logit to every key
    /// seen by a query, so it leaves attention weights and importance rankings
    /// untouched; only the quantizer notices it.
    pub fn seeded(
        d_model: usize,
        heads: usize,
        d_head: usize,
        outlier_channels: usize,
        outlier_amp: f32,
        seed: u64,
    ) -> Result<Self> {
        let width = heads * d_head;
        if outlier_channels > width {
            return Err(Error::param(format!(
                "{outlier_channels} outlier channels requested, only {width} key channels"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0 / (d_model as f32).sqrt()).map_err(|e| Error::param(e.to_string()))?;
        let gen = |rng: &mut ChaCha8Rng| {
            let data = (0..d_model * width).map(|_| normal.sample(rng)).collect();
            RealMatrix::new(d_model, width, data)
        };
        let w_q = gen(&mut rng)?;
        let mut w_k = gen(&mut rng)?;
        let w_v = gen(&mut rng)?;

        let mut key_bias = vec![0.0f32; width];
        let mut scales = vec![1.0f32; width];
        // Mean absolute value of a unit normal.
        let typical = (2.0 / std::f32::consts::PI).sqrt();
        for c in outlier_channel_indices(width, outlier_channels) {
            let sign: f32 = StandardNormal.sample(&mut rng);
            key_bias[c] = typical.copysign(sign);
            scales[c] = outlier_amp;
            for r in 0..d_model {
                let v = w_k.get(r, c);
                w_k.set(r, c, v / outlier_amp);
            }
        }
        Self::with_key_channels(w_q, w_k, w_v, heads, d_head, key_bias, scales)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }
}

/// Evenly spaced channel indices over `width` flattened key channels.
pub fn outlier_channel_indices(width: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i * width / count).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: MultiHeadTensor,
    pub k: MultiHeadTensor,
    pub v: MultiHeadTensor,
}

/// Output of temporal attention for the current frame's tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub values: MultiHeadTensor,
}

fn split_heads(m: &RealMatrix, heads: usize, d_head: usize) -> MultiHeadTensor {
    let tokens = m.rows();
    let mut data = Vec::with_capacity(m.data().len());
    for h in 0..heads {
        for t in 0..tokens {
            data.extend_from_slice(&m.row(t)[h * d_head..(h + 1) * d_head]);
        }
    }
    MultiHeadTensor::new(heads, tokens, d_head, data).expect("split preserves size")
}

pub fn project_qkv(frame: &FrameTokens, weights: &LayerWeights) -> Result<Qkv> {
    let x = frame.embeddings();
    if x.cols() != weights.w_q.rows() {
        return Err(Error::dim(format!(
            "frame embeddings have width {}, projections expect {}",
            x.cols(),
            weights.w_q.rows()
        )));
    }
    let q = matmul(x, &weights.w_q)?;
    let mut k = matmul(x, &weights.w_k)?;
    for t in 0..k.rows() {
        let row = k.row_mut(t);
        for ((v, &b), &s) in row
            .iter_mut()
            .zip(&weights.key_bias)
            .zip(&weights.outlier_channel_scales)
        {
            *v = (*v + b) * s;
        }
    }
    let v = matmul(x, &weights.w_v)?;
    let (h, d) = (weights.heads, weights.d_head);
    Ok(Qkv {
        q: split_heads(&q, h, d),
        k: split_heads(&k, h, d),
        v: split_heads(&v, h, d),
    })
}

/// `softmax(Q K^T / sqrt(d_head)) V` per head over all `T` key positions.
///
/// The current frame must occupy the trailing positions of `k_full`/`v_full`.
pub fn temporal_causal_attention(
    q_t: &MultiHeadTensor,
    k_full: &MultiHeadTensor,
    v_full: &MultiHeadTensor,
) -> Result<AttentionOutput> {
    if k_full.tokens() != v_full.tokens() {
        return Err(Error::CacheCorruption(format!(
            "key cache holds {} tokens, value cache {}",
            k_full.tokens(),
            v_full.tokens()
        )));
    }
    if q_t.heads() != k_full.heads()
        || k_full.heads() != v_full.heads()
        || q_t.channels() != k_full.channels()
        || k_full.channels() != v_full.channels()
    {
        return Err(Error::dim(format!(
            "attention shapes q {:?}, k {:?}, v {:?}",
            q_t.shape(),
            k_full.shape(),
            v_full.shape()
        )));
    }
    if k_full.tokens() < q_t.tokens() {
        return Err(Error::dim(format!(
            "{} key positions cannot include the {} current-frame tokens",
            k_full.tokens(),
            q_t.tokens()
        )));
    }

    let (heads, n_q, d) = q_t.shape();
    let n_kv = k_full.tokens();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(heads * n_q * d);
    let mut logits = vec![0.0f64; n_kv];
    let mut acc = vec![0.0f64; d];
    for h in 0..heads {
        for i in 0..n_q {
            let q = q_t.row(h, i);
            let mut max = f64::NEG_INFINITY;
            for (j, l) in logits.iter_mut().enumerate() {
                *l = dot(q, k_full.row(h, j)) * scale;
                max = max.max(*l);
            }
            let mut sum = 0.0f64;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                sum += *l;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, &p) in logits.iter().enumerate() {
                for (a, &v) in acc.iter_mut().zip(v_full.row(h, j)) {
                    *a += p * v as f64;
                }
            }
            out.extend(acc.iter().map(|&a| (a / sum) as f32));
        }
    }
    Ok(AttentionOutput {
        values: MultiHeadTensor::new(heads, n_q, d, out)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_rows;
    use rand::Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, h: usize, t: usize, c: usize) -> MultiHeadTensor {
        let data = (0..h * t * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        MultiHeadTensor::new(h, t, c, data).unwrap()
    }

    /// Dense per-head attention through the generic kernels, with an optional
    /// mask over key positions.
    fn dense_oracle(
        q: &MultiHeadTensor,
        k: &MultiHeadTensor,
        v: &MultiHeadTensor,
        masked_keys: &[bool],
    ) -> MultiHeadTensor {
        let d = q.channels();
        let heads = (0..q.heads())
            .map(|h| {
                let mut logits = matmul(&q.head(h), &k.head(h).transpose()).unwrap();
                for r in 0..logits.rows() {
                    for c in 0..logits.cols() {
                        let x = logits.get(r, c) / (d as f32).sqrt();
                        logits.set(r, c, x);
                    }
                }
                let mask: Vec<bool> = (0..logits.rows()).flat_map(|_| masked_keys.iter().copied()).collect();
                let p = softmax_rows(&logits, Some(&mask)).unwrap();
                matmul(&p, &v.head(h)).unwrap()
            })
            .collect::<Vec<_>>();
        MultiHeadTensor::from_heads(&heads).unwrap()
    }

    fn assert_close(a: &MultiHeadTensor, b: &MultiHeadTensor, tol: f32) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn single_position_returns_its_value() {
        let one = |v| MultiHeadTensor::new(1, 1, 1, vec![v]).unwrap();
        let out = temporal_causal_attention(&one(1.0), &one(1.0), &one(7.0)).unwrap();
        assert_eq!(out.values.data(), &[7.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = MultiHeadTensor::new(1, 1, 1, vec![0.3]).unwrap();
        let k = MultiHeadTensor::new(1, 2, 1, vec![1.0, 1.0]).unwrap();
        let v = MultiHeadTensor::new(1, 2, 1, vec![2.0, 4.0]).unwrap();
        let out = temporal_causal_attention(&q, &k, &v).unwrap();
        assert!((out.values.data()[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_tensor(&mut rng, 2, 3, 4);
        let k = random_tensor(&mut rng, 2, 6, 4);
        let v = random_tensor(&mut rng, 2, 6, 4);
        let out = temporal_causal_attention(&q, &k, &v).unwrap();
        assert_close(&out.values, &dense_oracle(&q, &k, &v, &[false; 6]), 1e-5);
    }

    #[test]
    fn joint_history_permutation_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let q = random_tensor(&mut rng, 2, 3, 5);
            let k = random_tensor(&mut rng, 2, 9, 5);
            let v = random_tensor(&mut rng, 2, 9, 5);
            // History is positions 0..6; the current frame (6..9) stays put.
            let mut perm: Vec<usize> = (0..6).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            perm.extend(6..9);
            let a = temporal_causal_attention(&q, &k, &v).unwrap();
            let b = temporal_causal_attention(&q, &k.select_tokens(&perm), &v.select_tokens(&perm)).unwrap();
            assert_close(&a.values, &b.values, 1e-5);
        }
    }

    #[test]
    fn masked_extra_history_token_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = random_tensor(&mut rng, 2, 2, 3);
        let k = random_tensor(&mut rng, 2, 5, 3);
        let v = random_tensor(&mut rng, 2, 5, 3);
        let base = temporal_causal_attention(&q, &k, &v).unwrap();
        let k_extra = random_tensor(&mut rng, 2, 1, 3).concat_tokens(&k).unwrap();
        let v_extra = random_tensor(&mut rng, 2, 1, 3).concat_tokens(&v).unwrap();
        let mut mask = vec![false; 6];
        mask[0] = true;
        let masked = dense_oracle(&q, &k_extra, &v_extra, &mask);
        assert_close(&base.values, &masked, 1e-5);
    }

    #[test]
    fn kv_token_mismatch_is_corruption() {
        let q = MultiHeadTensor::zeros(1, 1, 2);
        let k = MultiHeadTensor::zeros(1, 3, 2);
        let v = MultiHeadTensor::zeros(1, 2, 2);
        assert!(matches!(
            temporal_causal_attention(&q, &k, &v),
            Err(Error::CacheCorruption(_))
        ));
    }

    #[test]
    fn output_shape_independent_of_history_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = random_tensor(&mut rng, 3, 4, 2);
        for t in [4, 9, 31] {
            let k = random_tensor(&mut rng, 3, t, 2);
            let v = random_tensor(&mut rng, 3, t, 2);
            let out = temporal_causal_attention(&q, &k, &v).unwrap();
            assert_eq!(out.values.shape(), (3, 4, 2));
        }
    }

    #[test]
    fn projection_propagates_basis_vector() {
        // d_model = 4, two heads of width 2, identity projections.
        let id = RealMatrix::identity(4);
        let w = LayerWeights::new(id.clone(), id.clone(), id, 2, 2).unwrap();
        let x = RealMatrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]).unwrap();
        let frame = FrameTokens::new(0, 0, x).unwrap();
        let qkv = project_qkv(&frame, &w).unwrap();
        assert_eq!(qkv.q.row(0, 0), &[1.0, 0.0]);
        assert_eq!(qkv.q.row(1, 0), &[0.0, 0.0]);
        assert_eq!(qkv.q.row(1, 1), &[1.0, 0.0]);
    }

    #[test]
    fn zero_embeddings_give_zero_projections() {
        let w = LayerWeights::seeded(8, 2, 4, 0, 1.0, 5).unwrap();
        let frame = FrameTokens::new(0, 1, RealMatrix::zeros(5, 8)).unwrap();
        let qkv = project_qkv(&frame, &w).unwrap();
        for t in [&qkv.q, &qkv.k, &qkv.v] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn outlier_scale_multiplies_key_channel_magnitude() {
        let d_model = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let normal = Normal::new(0.0f32, 1.0 / (d_model as f32).sqrt()).unwrap();
        let mut w = || {
            let data = (0..d_model * 8).map(|_| normal.sample(&mut rng)).collect();
            RealMatrix::new(d_model, 8, data).unwrap()
        };
        let (wq, wk, wv) = (w(), w(), w());
        // Give channels 0 and 1 the same projection column so only the scale differs.
        let mut wk = wk;
        for r in 0..d_model {
            let v = wk.get(r, 1);
            wk.set(r, 0, v);
        }
        let mut scales = vec![1.0; 8];
        scales[0] = 20.0;
        let weights = LayerWeights::with_key_channels(wq, wk, wv, 2, 4, vec![0.0; 8], scales).unwrap();
        let x: Vec<f32> = (0..1000 * d_model).map(|_| StandardNormal.sample(&mut rng)).collect();
        let frame = FrameTokens::new(0, 0, RealMatrix::new(1000, d_model, x).unwrap()).unwrap();
        let k = project_qkv(&frame, &weights).unwrap().k;
        let mag = |c: usize| (0..1000).map(|t| k.get(0, t, c).abs() as f64).sum::<f64>();
        let ratio = mag(0) / mag(1);
        assert!((ratio - 20.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn seeded_outlier_channels_are_large_and_steady() {
        let w = LayerWeights::seeded(32, 2, 16, 2, 20.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f32> = (0..500 * 32).map(|_| StandardNormal.sample(&mut rng)).collect();
        let frame = FrameTokens::new(0, 0, RealMatrix::new(500, 32, x).unwrap()).unwrap();
        let k = project_qkv(&frame, &w).unwrap().k;
        let stats = |h: usize, c: usize| {
            let vals: Vec<f64> = (0..500).map(|t| k.get(h, t, c) as f64).collect();
            let mean_abs = vals.iter().map(|v| v.abs()).sum::<f64>() / 500.0;
            let mean = vals.iter().sum::<f64>() / 500.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
            (mean_abs, var.sqrt())
        };
        // Flattened outlier channels 0 and 16 are channel 0 of each head.
        let (big, big_sd) = stats(0, 0);
        let (normal, normal_sd) = stats(0, 1);
        assert!(big / normal > 10.0, "{big} vs {normal}");
        assert!(big_sd < 2.0 * normal_sd, "{big_sd} vs {normal_sd}");
    }
}
