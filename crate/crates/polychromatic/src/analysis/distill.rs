//! Frozen-routing distillation: replaces each layer's routing with the fixed
//! per-neuron activation chosen by the argmax of its mean eval-time logits.
//! The distilled model carries zero routing parameters and computes exactly
//! one activation per neuron.

use crate::layers::{gqa_attention, rmsnorm, scaled_residual_add, AttentionMask, AttentionWeights};
use crate::model::{count_params, Model, ModelConfig, RMS_EPS};
use crate::pipeline::{Batch, PipelineError};
use crate::polyglu::{routing_param_count, ActivationId};
use crate::tensor::{Scalar, Tensor};

use super::mean_routing_logits;

pub struct DistilledBlock<T: Scalar> {
    pub attn_norm: Tensor<T>,
    pub attn: AttentionWeights<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    /// Selected activation per FFN neuron.
    pub table: Vec<ActivationId>,
}

pub struct DistilledModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub embedding: Tensor<T>,
    pub output_head: Option<Tensor<T>>,
    pub blocks: Vec<DistilledBlock<T>>,
    pub final_norm: Tensor<T>,
}

/// Applies `σ_{table[j]}` to channel j of the last axis, in one pass.
fn apply_activation_table<T: Scalar>(z: &Tensor<T>, table: &[ActivationId]) -> Tensor<T> {
    let d_ff = *z.shape().last().expect("non-scalar");
    debug_assert_eq!(d_ff, table.len());
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());

    let sigmoid = |v: T| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    };
    let forward = move |k: ActivationId, v: T| -> T {
        match k {
            ActivationId::Relu => v.max(T::zero()),
            ActivationId::Tanh => v.tanh(),
            ActivationId::Silu => v * sigmoid(v),
            ActivationId::Gelu => v * half * (T::one() + Scalar::erf(v * inv_sqrt2)),
        }
    };
    let derivative = move |k: ActivationId, v: T| -> T {
        match k {
            ActivationId::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationId::Tanh => {
                let t = v.tanh();
                T::one() - t * t
            }
            ActivationId::Silu => {
                let s = sigmoid(v);
                s * (T::one() + v * (T::one() - s))
            }
            ActivationId::Gelu => {
                let phi = half * (T::one() + Scalar::erf(v * inv_sqrt2));
                let pdf = inv_sqrt_2pi * (-v * v * half).exp();
                phi + v * pdf
            }
        }
    };

    let data = z.data();
    let out: Vec<T> = data
        .iter()
        .enumerate()
        .map(|(i, &v)| forward(table[i % d_ff], v))
        .collect();
    drop(data);
    let table_owned: Vec<ActivationId> = table.to_vec();
    Tensor::from_op(z.shape().to_vec(), out, vec![z.clone()], move |args| {
        let parent = &args.parents[0];
        let data = parent.data();
        parent.with_grad_buffer(|buf| {
            for i in 0..buf.len() {
                buf[i] = buf[i] + args.out_grad[i] * derivative(table_owned[i % d_ff], data[i]);
            }
        });
    })
}

/// Distills a trained model against eval batches. The per-neuron selection
/// comes from the argmax of the mean routing logits over `batches`; with an
/// empty eval set the static preferences alone decide.
pub fn distill_frozen(
    model: &Model<f32>,
    batches: &[Batch],
    tau: f64,
) -> Result<DistilledModel<f32>, PipelineError> {
    let mean = mean_routing_logits(model, batches, tau)?;
    let k = model.cfg.k;
    let blocks = model
        .blocks
        .iter()
        .zip(mean.into_iter())
        .map(|(block, logits)| {
            let table = logits
                .chunks_exact(k)
                .map(|lane| {
                    let mut best = 0usize;
                    for i in 1..k {
                        if lane[i] > lane[best] {
                            best = i;
                        }
                    }
                    ActivationId::from_index(best).expect("palette index")
                })
                .collect();
            DistilledBlock {
                attn_norm: block.attn_norm.clone(),
                attn: AttentionWeights {
                    wq: block.attn.wq.clone(),
                    wk: block.attn.wk.clone(),
                    wv: block.attn.wv.clone(),
                    wo: block.attn.wo.clone(),
                    q_norm: block.attn.q_norm.clone(),
                    k_norm: block.attn.k_norm.clone(),
                },
                ffn_norm: block.ffn_norm.clone(),
                w_gate: block.w_gate.clone(),
                w_up: block.w_up.clone(),
                w_down: block.w_down.clone(),
                table,
            }
        })
        .collect();
    Ok(DistilledModel {
        cfg: model.cfg.clone(),
        embedding: model.embedding.clone(),
        output_head: model.output_head.clone(),
        blocks,
        final_norm: model.final_norm.clone(),
    })
}

impl<T: Scalar> DistilledModel<T> {
    pub fn head(&self) -> &Tensor<T> {
        self.output_head.as_ref().unwrap_or(&self.embedding)
    }

    /// Parameter count with the routing machinery removed.
    pub fn param_count(&self) -> usize {
        let original = count_params(&self.cfg).total;
        original
            - self.cfg.n_layers
                * routing_param_count(
                    self.cfg.d_model,
                    self.cfg.d_ff,
                    self.cfg.k,
                    self.cfg.gate_hidden,
                )
    }

    pub fn activation_tables(&self) -> Vec<&[ActivationId]> {
        self.blocks.iter().map(|b| b.table.as_slice()).collect()
    }

    pub fn forward(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        masks: &[AttentionMask],
    ) -> Result<Tensor<T>, PipelineError> {
        let eps = T::from_f64(RMS_EPS);
        let attn_cfg = self.cfg.attention();
        let n_layers = self.cfg.n_layers;
        let d = self.cfg.d_model;

        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let ids: Vec<usize> = tokens[b * seq..(b + 1) * seq]
                .iter()
                .map(|&t| t as usize)
                .collect();
            rows.push(self.embedding.embedding(&ids)?);
        }
        let mut x = Tensor::stack(&rows)?;

        for block in &self.blocks {
            let normed = rmsnorm(&x, &block.attn_norm, eps)?;
            let mut attn_rows = Vec::with_capacity(batch);
            for b in 0..batch {
                let row = normed.select(0, b)?;
                attn_rows.push(
                    gqa_attention(&row, &block.attn, &masks[b], &attn_cfg, eps)
                        .map_err(|e| PipelineError::Data(e.to_string()))?,
                );
            }
            let attn_out = Tensor::stack(&attn_rows)?;
            x = scaled_residual_add(&x, &attn_out, n_layers)
                .map_err(|e| PipelineError::Data(e.to_string()))?;

            let normed = rmsnorm(&x, &block.ffn_norm, eps)?;
            let flat = normed.reshape(vec![batch * seq, d])?;
            let z = flat.matmul(&block.w_gate)?;
            let up = flat.matmul(&block.w_up)?;
            let mixed = apply_activation_table(&z, &block.table).mul(&up)?;
            let ffn_out = mixed.matmul(&block.w_down)?.reshape(vec![batch, seq, d])?;
            x = scaled_residual_add(&x, &ffn_out, n_layers)
                .map_err(|e| PipelineError::Data(e.to_string()))?;
        }
        let hidden = rmsnorm(&x, &self.final_norm, eps)?;
        let flat = hidden.reshape(vec![batch * seq, d])?;
        let logits = flat.matmul(&self.head().transpose()?)?;
        Ok(logits.reshape(vec![batch, seq, self.cfg.vocab_size])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::polyglu::RoutingMode;
    use crate::tensor::grad_check;

    /// Commits every neuron to a cyclic activation pattern via large α gaps
    /// and silences the dynamic pathway.
    fn committed_model(cfg: &ModelConfig, gap: f32) -> Model<f32> {
        let model = build_model::<f32>(cfg, 17).unwrap();
        for block in &model.blocks {
            {
                let mut alpha = block.routing.alpha.leaf_data_mut();
                for j in 0..cfg.d_ff {
                    alpha[j * 4 + (j % 4)] = gap;
                }
            }
            block.routing.beta.leaf_data_mut().fill(0.0);
        }
        model
    }

    #[test]
    fn exact_one_hot_equivalence() {
        let cfg = ModelConfig::tiny();
        let model = committed_model(&cfg, 50.0);
        let distilled = distill_frozen(&model, &[], 0.1).unwrap();
        for (b, block) in distilled.blocks.iter().enumerate() {
            for (j, &id) in block.table.iter().enumerate() {
                assert_eq!(id.index(), j % 4, "layer {b} neuron {j}");
            }
        }
        let masks = [AttentionMask::single_doc(6)];
        let tokens = [1u32, 5, 2, 8, 3, 4];
        let routed = model
            .forward(&tokens, 1, 6, &masks, 0.1, RoutingMode::EvalHard)
            .unwrap()
            .to_vec();
        let frozen = distilled.forward(&tokens, 1, 6, &masks).unwrap().to_vec();
        for (a, b) in routed.iter().zip(frozen.iter()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn near_one_hot_divergence_is_small() {
        let cfg = ModelConfig::tiny();
        // gap of 0.8 at tau 0.1 puts the max routing probability just past 0.999
        let model = committed_model(&cfg, 0.8);
        let distilled = distill_frozen(&model, &[], 0.1).unwrap();
        let masks = [AttentionMask::single_doc(6)];
        let tokens = [2u32, 9, 1, 7, 0, 3];
        let soft = model
            .forward(&tokens, 1, 6, &masks, 0.1, RoutingMode::EvalSoft)
            .unwrap()
            .to_vec();
        let frozen = distilled.forward(&tokens, 1, 6, &masks).unwrap().to_vec();
        let worst = soft
            .iter()
            .zip(frozen.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f32, f32::max);
        assert!(worst <= 1e-3, "divergence {worst}");
    }

    #[test]
    fn distilled_param_count_drops_routing_overhead() {
        let cfg = ModelConfig::desk();
        let model = build_model::<f32>(&cfg, 1).unwrap();
        let distilled = distill_frozen(&model, &[], 0.1).unwrap();
        let expected = count_params(&cfg).total
            - cfg.n_layers * routing_param_count(cfg.d_model, cfg.d_ff, cfg.k, cfg.gate_hidden);
        assert_eq!(distilled.param_count(), expected);
    }

    #[test]
    fn activation_table_op_gradients() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = Tensor::param(vec![3, 4], data).unwrap();
        let table = [
            ActivationId::Relu,
            ActivationId::Tanh,
            ActivationId::Silu,
            ActivationId::Gelu,
        ];
        let err = grad_check(
            || apply_activation_table(&z, &table).sum_all().unwrap(),
            &z,
            1e-6,
        );
        assert!(err <= 1e-6, "rel err {err}");
    }
}
