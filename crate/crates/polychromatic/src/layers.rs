//! Non-FFN transformer components: RMSNorm, rotary position embeddings,
//! grouped-query attention with QK-Norm, and causal + document masking.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError, TensorResult};

/// Additive mask value for forbidden attention positions. Large enough that
/// the post-softmax probability underflows to exactly 0.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("n_q_heads ({n_q}) must be a multiple of n_kv_heads ({n_kv})")]
    HeadGrouping { n_q: usize, n_kv: usize },
    #[error("n_q_heads * head_dim ({got}) must equal d_model ({d_model})")]
    HeadDims { got: usize, d_model: usize },
    #[error("head_dim must be even for rotary embeddings, got {0}")]
    OddHeadDim(usize),
    #[error("document starts must begin at 0 and be strictly increasing below seq_len, got {starts:?} for seq_len {seq_len}")]
    BadDocStarts { starts: Vec<usize>, seq_len: usize },
    #[error("mask seq_len {mask} does not match sequence length {seq}")]
    MaskLength { mask: usize, seq: usize },
    #[error("n_layers must be positive for residual scaling")]
    ZeroLayers,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Attention geometry: query heads grouped onto shared key/value heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_theta: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), LayerError> {
        if self.n_kv_heads == 0 || self.n_q_heads % self.n_kv_heads != 0 {
            return Err(LayerError::HeadGrouping {
                n_q: self.n_q_heads,
                n_kv: self.n_kv_heads,
            });
        }
        if self.n_q_heads * self.head_dim != self.d_model {
            return Err(LayerError::HeadDims {
                got: self.n_q_heads * self.head_dim,
                d_model: self.d_model,
            });
        }
        if self.head_dim % 2 != 0 {
            return Err(LayerError::OddHeadDim(self.head_dim));
        }
        Ok(())
    }
}

/// Causal mask restricted to document spans: position i may attend to j iff
/// j ≤ i and both lie in the same document.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    doc_starts: Vec<usize>,
    seq_len: usize,
}

impl AttentionMask {
    pub fn new(doc_starts: Vec<usize>, seq_len: usize) -> Result<Self, LayerError> {
        let ok = doc_starts.first() == Some(&0)
            && doc_starts.windows(2).all(|w| w[0] < w[1])
            && doc_starts.last().map_or(false, |&l| l < seq_len);
        if !ok {
            return Err(LayerError::BadDocStarts {
                starts: doc_starts,
                seq_len,
            });
        }
        Ok(AttentionMask {
            doc_starts,
            seq_len,
        })
    }

    /// Whole window is one document.
    pub fn single_doc(seq_len: usize) -> Self {
        AttentionMask {
            doc_starts: vec![0],
            seq_len,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn doc_starts(&self) -> &[usize] {
        &self.doc_starts
    }

    /// Index of the document containing position `i`.
    fn doc_of(&self, i: usize) -> usize {
        match self.doc_starts.binary_search(&i) {
            Ok(d) => d,
            Err(d) => d - 1,
        }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        j <= i && self.doc_of(i) == self.doc_of(j)
    }

    /// Additive bias matrix [seq, seq]: 0 where attention is allowed,
    /// [`MASK_NEG`] where it is not.
    pub fn additive_bias<T: Scalar>(&self) -> Tensor<T> {
        let s = self.seq_len;
        let neg = T::from_f64(MASK_NEG);
        let mut data = vec![T::zero(); s * s];
        for i in 0..s {
            for j in 0..s {
                if !self.allows(i, j) {
                    data[i * s + j] = neg;
                }
            }
        }
        Tensor::from_vec(vec![s, s], data).expect("mask shape")
    }
}

/// x / sqrt(mean(x², last axis) + eps) · weight
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, eps: T) -> TensorResult<T> {
    let last = x.rank() - 1;
    let ms = x.mul(x)?.mean_axis(last, true)?;
    let inv_rms = ms.add_scalar(eps).sqrt();
    x.div(&inv_rms)?.mul(weight)
}

/// Rotates consecutive (even, odd) channel pairs of `x` ([seq, heads, head_dim])
/// by position-dependent angles `pos · theta^(−2i/head_dim)`. Norm-preserving;
/// dot products between rotated queries and keys depend only on relative position.
pub fn rope<T: Scalar>(x: &Tensor<T>, positions: &[usize], theta: f64) -> TensorResult<T> {
    if x.rank() != 3 {
        return Err(TensorError::RankMismatch {
            op: "rope",
            expected: 3,
            shape: x.shape().to_vec(),
        });
    }
    let (seq, heads, head_dim) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if head_dim % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "rope",
            msg: format!("head_dim must be even, got {head_dim}"),
        });
    }
    if positions.len() != seq {
        return Err(TensorError::Invalid {
            op: "rope",
            msg: format!("{} positions for seq_len {seq}", positions.len()),
        });
    }
    let pairs = head_dim / 2;
    // cos/sin per (position, pair), shared by forward and backward
    let mut cos = vec![T::zero(); seq * pairs];
    let mut sin = vec![T::zero(); seq * pairs];
    for (s, &pos) in positions.iter().enumerate() {
        for p in 0..pairs {
            let freq = theta.powf(-2.0 * p as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos[s * pairs + p] = T::from_f64(angle.cos());
            sin[s * pairs + p] = T::from_f64(angle.sin());
        }
    }

    let rotate = move |src: &[T], dst: &mut [T], invert: bool, cos: &[T], sin: &[T]| {
        for s in 0..seq {
            for h in 0..heads {
                let base = (s * heads + h) * head_dim;
                for p in 0..pairs {
                    let c = cos[s * pairs + p];
                    let sn = if invert {
                        -sin[s * pairs + p]
                    } else {
                        sin[s * pairs + p]
                    };
                    let x0 = src[base + 2 * p];
                    let x1 = src[base + 2 * p + 1];
                    dst[base + 2 * p] = x0 * c - x1 * sn;
                    dst[base + 2 * p + 1] = x0 * sn + x1 * c;
                }
            }
        }
    };

    let data = x.data();
    let mut out = vec![T::zero(); data.len()];
    rotate(&data, &mut out, false, &cos, &sin);
    drop(data);

    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        move |args| {
            // Rotation is orthonormal: the gradient rotates by the inverse angle.
            let mut back = vec![T::zero(); args.out_grad.len()];
            rotate(args.out_grad, &mut back, true, &cos, &sin);
            args.parents[0].accumulate_grad(&back);
        },
    ))
}

/// Projection weights for one attention layer. QK-Norm weights have length
/// `head_dim` and are shared across heads.
pub struct AttentionWeights<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub q_norm: Tensor<T>,
    pub k_norm: Tensor<T>,
}

/// Grouped-query attention over a single packed sequence [seq, d_model].
///
/// Queries and keys are RMS-normalized per head (QK-Norm) and RoPE-rotated;
/// each group of `n_q / n_kv` query heads shares one KV head; scores are
/// scaled by 1/sqrt(head_dim) and masked additively before softmax.
pub fn gqa_attention<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    mask: &AttentionMask,
    cfg: &AttentionConfig,
    norm_eps: T,
) -> Result<Tensor<T>, LayerError> {
    cfg.validate()?;
    let seq = x.shape()[0];
    if mask.seq_len() != seq {
        return Err(LayerError::MaskLength {
            mask: mask.seq_len(),
            seq,
        });
    }
    let (n_q, n_kv, hd) = (cfg.n_q_heads, cfg.n_kv_heads, cfg.head_dim);
    let group = n_q / n_kv;
    let positions: Vec<usize> = (0..seq).collect();

    let q = x.matmul(&w.wq)?.reshape(vec![seq, n_q, hd])?;
    let k = x.matmul(&w.wk)?.reshape(vec![seq, n_kv, hd])?;
    let v = x.matmul(&w.wv)?.reshape(vec![seq, n_kv, hd])?;

    let q = rope(
        &rmsnorm(&q, &w.q_norm, norm_eps)?,
        &positions,
        cfg.rope_theta,
    )?;
    let k = rope(
        &rmsnorm(&k, &w.k_norm, norm_eps)?,
        &positions,
        cfg.rope_theta,
    )?;

    let bias = mask.additive_bias::<T>();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let mut head_outputs = Vec::with_capacity(n_q);
    for h in 0..n_q {
        let qh = q.select(1, h)?;
        let kg = k.select(1, h / group)?;
        let vg = v.select(1, h / group)?;
        let scores = qh.matmul(&kg.transpose()?)?.mul_scalar(scale).add(&bias)?;
        let probs = scores.softmax(1)?;
        head_outputs.push(probs.matmul(&vg)?);
    }
    let merged = Tensor::concat(&head_outputs, 1)?;
    Ok(merged.matmul(&w.wo)?)
}

/// x + branch / sqrt(2·n_layers)
pub fn scaled_residual_add<T: Scalar>(
    x: &Tensor<T>,
    branch: &Tensor<T>,
    n_layers: usize,
) -> Result<Tensor<T>, LayerError> {
    if n_layers == 0 {
        return Err(LayerError::ZeroLayers);
    }
    if x.shape() != branch.shape() {
        return Err(LayerError::Tensor(TensorError::ShapeMismatch {
            op: "scaled_residual_add",
            lhs: x.shape().to_vec(),
            rhs: branch.shape().to_vec(),
        }));
    }
    let scale = T::from_f64(1.0 / (2.0 * n_layers as f64).sqrt());
    Ok(x.add(&branch.mul_scalar(scale))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn rand_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_weights(rng: &mut ChaCha20Rng, cfg: &AttentionConfig) -> AttentionWeights<f64> {
        let d = cfg.d_model;
        let qdim = cfg.n_q_heads * cfg.head_dim;
        let kvdim = cfg.n_kv_heads * cfg.head_dim;
        AttentionWeights {
            wq: Tensor::param(vec![d, qdim], rand_vec(rng, d * qdim)).unwrap(),
            wk: Tensor::param(vec![d, kvdim], rand_vec(rng, d * kvdim)).unwrap(),
            wv: Tensor::param(vec![d, kvdim], rand_vec(rng, d * kvdim)).unwrap(),
            wo: Tensor::param(vec![qdim, d], rand_vec(rng, qdim * d)).unwrap(),
            q_norm: Tensor::param(vec![cfg.head_dim], vec![1.0; cfg.head_dim]).unwrap(),
            k_norm: Tensor::param(vec![cfg.head_dim], vec![1.0; cfg.head_dim]).unwrap(),
        }
    }

    fn small_cfg() -> AttentionConfig {
        AttentionConfig {
            d_model: 8,
            n_q_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            rope_theta: 10_000.0,
        }
    }

    #[test]
    fn config_invariants() {
        assert!(small_cfg().validate().is_ok());
        let mut bad = small_cfg();
        bad.n_kv_heads = 3;
        assert!(matches!(
            bad.validate(),
            Err(LayerError::HeadGrouping { .. })
        ));
        let mut bad = small_cfg();
        bad.head_dim = 3;
        bad.d_model = 6;
        assert!(matches!(bad.validate(), Err(LayerError::OddHeadDim(3))));
    }

    #[test]
    fn rmsnorm_constant_vector() {
        let x = Tensor::from_vec(vec![4], vec![3.0_f64; 4]).unwrap();
        let w = Tensor::from_vec(vec![4], vec![2.0, 0.5, 1.0, -1.0]).unwrap();
        let out = rmsnorm(&x, &w, 1e-12).unwrap().to_vec();
        for (o, e) in out.iter().zip([2.0, 0.5, 1.0, -1.0]) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn rmsnorm_hand_values() {
        let x = Tensor::from_vec(vec![2], vec![3.0_f64, 4.0]).unwrap();
        let w = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let out = rmsnorm(&x, &w, 0.0).unwrap().to_vec();
        // [3,4]/sqrt(12.5)
        assert!((out[0] - 0.848_528_137).abs() < 1e-8);
        assert!((out[1] - 1.131_370_850).abs() < 1e-8);
    }

    #[test]
    fn rmsnorm_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = Tensor::param(vec![2, 4], rand_vec(&mut rng, 8)).unwrap();
        let w = Tensor::param(vec![4], rand_vec(&mut rng, 4)).unwrap();
        let probe = Tensor::from_vec(vec![2, 4], rand_vec(&mut rng, 8)).unwrap();
        let f = || {
            rmsnorm(&x, &w, 1e-6)
                .unwrap()
                .mul(&probe)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        assert!(grad_check(f, &x, 1e-6) <= 1e-6);
        assert!(grad_check(f, &w, 1e-6) <= 1e-6);
    }

    #[test]
    fn rmsnorm_output_has_unit_rms() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = Tensor::from_vec(vec![5, 2, 8], rand_vec(&mut rng, 80)).unwrap();
        let w = Tensor::from_vec(vec![8], vec![1.0; 8]).unwrap();
        let out = rmsnorm(&x, &w, 1e-6).unwrap();
        let ms = out.mul(&out).unwrap().mean_axis(2, false).unwrap().to_vec();
        for v in ms {
            assert!((v.sqrt() - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = Tensor::from_vec(vec![1, 2, 4], rand_vec(&mut rng, 8)).unwrap();
        let out = rope(&x, &[0], 10_000.0).unwrap();
        assert_eq!(out.to_vec(), x.to_vec());
    }

    #[test]
    fn rope_preserves_norm() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = Tensor::from_vec(vec![3, 2, 8], rand_vec(&mut rng, 48)).unwrap();
        let out = rope(&x, &[0, 7, 123], 10_000.0).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((norm(&out.to_vec()) - norm(&x.to_vec())).abs() <= 1e-6);
    }

    #[test]
    fn rope_dot_depends_on_relative_position_only() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let qv = rand_vec(&mut rng, 8);
        let kv = rand_vec(&mut rng, 8);
        let dot_at = |m: usize, n: usize| -> f64 {
            let q = Tensor::from_vec(vec![1, 1, 8], qv.clone()).unwrap();
            let k = Tensor::from_vec(vec![1, 1, 8], kv.clone()).unwrap();
            let qr = rope(&q, &[m], 10_000.0).unwrap().to_vec();
            let kr = rope(&k, &[n], 10_000.0).unwrap().to_vec();
            qr.iter().zip(kr.iter()).map(|(a, b)| a * b).sum()
        };
        assert!((dot_at(5, 2) - dot_at(13, 10)).abs() <= 1e-5);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 3]);
        assert!(rope(&x, &[0], 10_000.0).is_err());
    }

    #[test]
    fn rope_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x = Tensor::param(vec![2, 2, 4], rand_vec(&mut rng, 16)).unwrap();
        let probe = Tensor::from_vec(vec![2, 2, 4], rand_vec(&mut rng, 16)).unwrap();
        let f = || {
            rope(&x, &[1, 9], 10_000.0)
                .unwrap()
                .mul(&probe)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        assert!(grad_check(f, &x, 1e-6) <= 1e-8);
    }

    #[test]
    fn mask_documents() {
        let mask = AttentionMask::new(vec![0, 4], 8).unwrap();
        assert!(mask.allows(5, 4));
        assert!(!mask.allows(5, 2)); // cross-document
        assert!(!mask.allows(2, 5)); // future
        assert!(mask.allows(3, 0));
        let bias = mask.additive_bias::<f64>();
        assert_eq!(bias.data()[5 * 8 + 2], MASK_NEG);
        assert_eq!(bias.data()[5 * 8 + 4], 0.0);
    }

    #[test]
    fn mask_rejects_bad_starts() {
        assert!(AttentionMask::new(vec![1, 4], 8).is_err());
        assert!(AttentionMask::new(vec![0, 4, 4], 8).is_err());
        assert!(AttentionMask::new(vec![0, 9], 8).is_err());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let cfg = small_cfg();
        let w = rand_weights(&mut rng, &cfg);
        let x = Tensor::from_vec(vec![1, 8], rand_vec(&mut rng, 8)).unwrap();
        let out = gqa_attention(&x, &w, &AttentionMask::single_doc(1), &cfg, 1e-6).unwrap();
        // With one token the softmax is [1], so output = (x·Wv per group)·Wo.
        let v = x.matmul(&w.wv).unwrap().to_vec(); // [1, kv*hd], one kv head
        let expanded = Tensor::from_vec(vec![1, 8], [v.clone(), v].concat()).unwrap();
        let expect = expanded.matmul(&w.wo).unwrap().to_vec();
        for (a, b) in out.to_vec().iter().zip(expect.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_attention_probability_is_exactly_zero() {
        // softmax over a row with the additive mask must underflow to 0.0
        let row = Tensor::from_vec(vec![4], vec![1.0, MASK_NEG, 0.5, MASK_NEG]).unwrap();
        let p = row.softmax(0).unwrap().to_vec();
        assert_eq!(p[1], 0.0);
        assert_eq!(p[3], 0.0);
        assert!((p[0] + p[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn causality_and_document_isolation() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let cfg = small_cfg();
        let w = rand_weights(&mut rng, &cfg);
        let mask = AttentionMask::new(vec![0, 4], 8).unwrap();
        let base = rand_vec(&mut rng, 8 * 8);

        let run = |data: Vec<f64>| {
            let x = Tensor::from_vec(vec![8, 8], data).unwrap();
            gqa_attention(&x, &w, &mask, &cfg, 1e-6).unwrap().to_vec()
        };
        let out0 = run(base.clone());

        // Perturbing token 6 (doc B) must not change tokens 0..6 (causality)
        // nor any token of doc A (isolation).
        let mut bumped = base.clone();
        for c in 0..8 {
            bumped[6 * 8 + c] += 0.5;
        }
        let out1 = run(bumped);
        for i in 0..6 {
            for c in 0..8 {
                assert_eq!(out0[i * 8 + c], out1[i * 8 + c], "token {i} changed");
            }
        }

        // Perturbing token 1 (doc A) must not change doc B (tokens 4..8).
        let mut bumped = base.clone();
        for c in 0..8 {
            bumped[8 + c] -= 0.3;
        }
        let out2 = run(bumped);
        for i in 4..8 {
            for c in 0..8 {
                assert_eq!(out0[i * 8 + c], out2[i * 8 + c], "token {i} changed");
            }
        }
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let cfg = small_cfg();
        let w = rand_weights(&mut rng, &cfg);
        let x = Tensor::param(vec![3, 8], rand_vec(&mut rng, 24)).unwrap();
        let mask = AttentionMask::single_doc(3);
        let f = || {
            gqa_attention(&x, &w, &mask, &cfg, 1e-6)
                .unwrap()
                .tanh()
                .sum_all()
                .unwrap()
        };
        assert!(grad_check(f, &x, 1e-6) <= 1e-6);
        assert!(grad_check(f, &w.wq, 1e-6) <= 1e-6);
        assert!(grad_check(f, &w.q_norm, 1e-6) <= 1e-6);
    }

    #[test]
    fn residual_scale_values() {
        let x = Tensor::from_vec(vec![2], vec![1.0_f64, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let out = scaled_residual_add(&x, &b, 28).unwrap().to_vec();
        let scale = out[0] - 1.0;
        assert!((scale - 0.133_630_6).abs() < 1e-6);

        let zero = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(
            scaled_residual_add(&x, &zero, 28).unwrap().to_vec(),
            x.to_vec()
        );

        let out2 = scaled_residual_add(&x, &b, 2).unwrap().to_vec();
        assert!((out2[0] - 1.5).abs() < 1e-12);

        assert!(matches!(
            scaled_residual_add(&x, &b, 0),
            Err(LayerError::ZeroLayers)
        ));
        let bad = Tensor::<f64>::zeros(vec![3]);
        assert!(scaled_residual_add(&x, &bad, 2).is_err());
    }
}
