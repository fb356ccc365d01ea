//! Full decoder assembly: embeddings, pre-norm residual blocks (attention +
//! routed FFN, both branch-scaled by 1/sqrt(2·n_layers)), final norm, and a
//! tied output head. Also the analytic parameter count.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError, OptimizerEntry, OptimizerSnapshot};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;
use thiserror::Error;

use crate::layers::{
    gqa_attention, rmsnorm, scaled_residual_add, AttentionConfig, AttentionMask, AttentionWeights,
    LayerError,
};
use crate::polyglu::{
    gumbel_softmax, polyglu_forward_with_gates, routing_logits, PolyGluError, RoutingMode,
    RoutingState, GATE_HIDDEN, PALETTE_SIZE,
};
use crate::seeds::derive_seed;
use crate::tensor::{Scalar, Tensor, TensorError};

pub const RMS_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    PolyGlu(#[from] PolyGluError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub rope_theta: f64,
    pub k: usize,
    pub gate_hidden: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Full-scale configuration (597M parameters with the stock tokenizer).
    pub fn reference() -> Self {
        ModelConfig {
            d_model: 1024,
            d_ff: 4096,
            n_layers: 28,
            n_q_heads: 16,
            n_kv_heads: 8,
            head_dim: 64,
            vocab_size: 151_669,
            context_len: 4096,
            rope_theta: 10_000.0,
            k: 4,
            gate_hidden: 32,
            tie_embeddings: true,
        }
    }

    /// Byte-level configuration sized for CPU training runs.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 128,
            n_layers: 4,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            vocab_size: 261,
            context_len: 256,
            rope_theta: 10_000.0,
            k: 4,
            gate_hidden: 32,
            tie_embeddings: true,
        }
    }

    /// Two-layer miniature used by gradient verification.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 16,
            d_ff: 12,
            n_layers: 2,
            n_q_heads: 2,
            n_kv_heads: 1,
            head_dim: 8,
            vocab_size: 13,
            context_len: 8,
            rope_theta: 10_000.0,
            k: 4,
            gate_hidden: 32,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let attn = self.attention();
        attn.validate()?;
        if self.k != PALETTE_SIZE {
            return Err(ModelError::Config(format!(
                "palette size must be {PALETTE_SIZE}, got {}",
                self.k
            )));
        }
        if self.gate_hidden != GATE_HIDDEN {
            return Err(ModelError::Config(format!(
                "gate hidden width must be {GATE_HIDDEN}, got {}",
                self.gate_hidden
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_q_heads: self.n_q_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            rope_theta: self.rope_theta,
        }
    }

    /// Serializes as `key = value` lines (the same format config files use).
    pub fn to_kv_text(&self) -> String {
        format!(
            "d_model = {}\nd_ff = {}\nn_layers = {}\nn_q_heads = {}\nn_kv_heads = {}\nhead_dim = {}\nvocab_size = {}\ncontext_len = {}\nrope_theta = {}\nk = {}\ngate_hidden = {}\ntie_embeddings = {}\n",
            self.d_model,
            self.d_ff,
            self.n_layers,
            self.n_q_heads,
            self.n_kv_heads,
            self.head_dim,
            self.vocab_size,
            self.context_len,
            self.rope_theta,
            self.k,
            self.gate_hidden,
            self.tie_embeddings
        )
    }

    /// Reads fields from a parsed key-value map, starting from `base` and
    /// overriding any key present. Unknown keys are left to the caller.
    pub fn from_kv(map: &BTreeMap<String, String>, base: ModelConfig) -> Result<Self, ModelError> {
        let mut cfg = base;
        let parse_usize = |key: &str, v: &str| {
            v.parse::<usize>()
                .map_err(|_| ModelError::Config(format!("{key}: expected integer, got {v:?}")))
        };
        for (key, value) in map {
            match key.as_str() {
                "d_model" => cfg.d_model = parse_usize(key, value)?,
                "d_ff" => cfg.d_ff = parse_usize(key, value)?,
                "n_layers" => cfg.n_layers = parse_usize(key, value)?,
                "n_q_heads" => cfg.n_q_heads = parse_usize(key, value)?,
                "n_kv_heads" => cfg.n_kv_heads = parse_usize(key, value)?,
                "head_dim" => cfg.head_dim = parse_usize(key, value)?,
                "vocab_size" => cfg.vocab_size = parse_usize(key, value)?,
                "context_len" => cfg.context_len = parse_usize(key, value)?,
                "k" => cfg.k = parse_usize(key, value)?,
                "gate_hidden" => cfg.gate_hidden = parse_usize(key, value)?,
                "rope_theta" => {
                    cfg.rope_theta = value.parse::<f64>().map_err(|_| {
                        ModelError::Config(format!("rope_theta: expected float, got {value:?}"))
                    })?
                }
                "tie_embeddings" => {
                    cfg.tie_embeddings = value.parse::<bool>().map_err(|_| {
                        ModelError::Config(format!("tie_embeddings: expected bool, got {value:?}"))
                    })?
                }
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names of the keys [`from_kv`] consumes.
    pub fn kv_keys() -> &'static [&'static str] {
        &[
            "d_model",
            "d_ff",
            "n_layers",
            "n_q_heads",
            "n_kv_heads",
            "head_dim",
            "vocab_size",
            "context_len",
            "rope_theta",
            "k",
            "gate_hidden",
            "tie_embeddings",
        ]
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>, ModelError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ModelError::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// One pre-norm residual block.
pub struct Block<T: Scalar> {
    pub attn_norm: Tensor<T>,
    pub attn: AttentionWeights<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub routing: RoutingState<T>,
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub embedding: Tensor<T>,
    pub output_head: Option<Tensor<T>>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
}

/// Role of a parameter, used for optimizer grouping and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight2d,
    Norm,
    Bias,
    RoutingAlpha,
    RoutingBeta,
}

pub struct NamedParam<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

fn normal_init<T: Scalar>(rng: &mut ChaCha20Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::param(shape, data).expect("init shape")
}

fn ones_param<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::param(vec![n], vec![T::one(); n]).expect("ones")
}

/// Weights and embeddings ~ N(0, 0.02); norm weights 1; routing α = 0,
/// β = 1, gate biases 0.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let q_dim = cfg.n_q_heads * cfg.head_dim;
    let kv_dim = cfg.n_kv_heads * cfg.head_dim;

    let embedding = normal_init(&mut rng, vec![cfg.vocab_size, d], INIT_STD);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        blocks.push(Block {
            attn_norm: ones_param(d),
            attn: AttentionWeights {
                wq: normal_init(&mut rng, vec![d, q_dim], INIT_STD),
                wk: normal_init(&mut rng, vec![d, kv_dim], INIT_STD),
                wv: normal_init(&mut rng, vec![d, kv_dim], INIT_STD),
                wo: normal_init(&mut rng, vec![q_dim, d], INIT_STD),
                q_norm: ones_param(cfg.head_dim),
                k_norm: ones_param(cfg.head_dim),
            },
            ffn_norm: ones_param(d),
            w_gate: normal_init(&mut rng, vec![d, cfg.d_ff], INIT_STD),
            w_up: normal_init(&mut rng, vec![d, cfg.d_ff], INIT_STD),
            w_down: normal_init(&mut rng, vec![cfg.d_ff, d], INIT_STD),
            routing: RoutingState::init(d, cfg.d_ff, INIT_STD, &mut rng),
        });
    }
    let final_norm = ones_param(d);
    let output_head = if cfg.tie_embeddings {
        None
    } else {
        Some(normal_init(&mut rng, vec![cfg.vocab_size, d], INIT_STD))
    };
    Ok(Model {
        cfg: cfg.clone(),
        embedding,
        output_head,
        blocks,
        final_norm,
    })
}

impl<T: Scalar> Model<T> {
    /// Output projection matrix [vocab, d_model]; aliases the embedding when tied.
    pub fn head(&self) -> &Tensor<T> {
        self.output_head.as_ref().unwrap_or(&self.embedding)
    }

    /// Every trainable parameter exactly once, in a stable canonical order.
    pub fn params(&self) -> Vec<NamedParam<T>> {
        let mut out = Vec::new();
        let mut push = |name: String, tensor: &Tensor<T>, kind: ParamKind| {
            out.push(NamedParam {
                name,
                tensor: tensor.clone(),
                kind,
            });
        };
        push(
            "embedding.weight".into(),
            &self.embedding,
            ParamKind::Embedding,
        );
        for (i, b) in self.blocks.iter().enumerate() {
            push(
                format!("layers.{i}.attn_norm.weight"),
                &b.attn_norm,
                ParamKind::Norm,
            );
            push(
                format!("layers.{i}.attn.wq"),
                &b.attn.wq,
                ParamKind::Weight2d,
            );
            push(
                format!("layers.{i}.attn.wk"),
                &b.attn.wk,
                ParamKind::Weight2d,
            );
            push(
                format!("layers.{i}.attn.wv"),
                &b.attn.wv,
                ParamKind::Weight2d,
            );
            push(
                format!("layers.{i}.attn.wo"),
                &b.attn.wo,
                ParamKind::Weight2d,
            );
            push(
                format!("layers.{i}.attn.q_norm"),
                &b.attn.q_norm,
                ParamKind::Norm,
            );
            push(
                format!("layers.{i}.attn.k_norm"),
                &b.attn.k_norm,
                ParamKind::Norm,
            );
            push(
                format!("layers.{i}.ffn_norm.weight"),
                &b.ffn_norm,
                ParamKind::Norm,
            );
            push(
                format!("layers.{i}.ffn.w_gate"),
                &b.w_gate,
                ParamKind::Weight2d,
            );
            push(format!("layers.{i}.ffn.w_up"), &b.w_up, ParamKind::Weight2d);
            push(
                format!("layers.{i}.ffn.w_down"),
                &b.w_down,
                ParamKind::Weight2d,
            );
            push(
                format!("layers.{i}.routing.alpha"),
                &b.routing.alpha,
                ParamKind::RoutingAlpha,
            );
            push(
                format!("layers.{i}.routing.beta"),
                &b.routing.beta,
                ParamKind::RoutingBeta,
            );
            push(
                format!("layers.{i}.routing.gate_w1"),
                &b.routing.gate_w1,
                ParamKind::Weight2d,
            );
            push(
                format!("layers.{i}.routing.gate_b1"),
                &b.routing.gate_b1,
                ParamKind::Bias,
            );
            push(
                format!("layers.{i}.routing.gate_w2"),
                &b.routing.gate_w2,
                ParamKind::Weight2d,
            );
            push(
                format!("layers.{i}.routing.gate_b2"),
                &b.routing.gate_b2,
                ParamKind::Bias,
            );
        }
        push(
            "final_norm.weight".into(),
            &self.final_norm,
            ParamKind::Norm,
        );
        if let Some(head) = &self.output_head {
            push("output_head.weight".into(), head, ParamKind::Weight2d);
        }
        out
    }

    pub fn allocated_param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.tensor.zero_grad();
        }
    }

    /// Hidden states after the final norm, shape [batch, seq, d_model].
    /// `masks` carries one document mask per batch row.
    pub fn hidden_states(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        masks: &[AttentionMask],
        tau: f64,
        mode: RoutingMode,
    ) -> Result<Tensor<T>, ModelError> {
        self.forward_inner(tokens, batch, seq, masks, tau, mode, None)
    }

    /// Same as [`hidden_states`] but records each layer's routing logits
    /// ([batch, d_ff, K], detached) for diagnostics.
    pub fn hidden_states_traced(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        masks: &[AttentionMask],
        tau: f64,
        mode: RoutingMode,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), ModelError> {
        let mut trace = Vec::with_capacity(self.cfg.n_layers);
        let hidden = self.forward_inner(tokens, batch, seq, masks, tau, mode, Some(&mut trace))?;
        Ok((hidden, trace))
    }

    /// Full logits [batch, seq, vocab]. Fine for evaluation; training uses
    /// [`hidden_states`] plus the chunked loss to avoid materializing this.
    pub fn forward(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        masks: &[AttentionMask],
        tau: f64,
        mode: RoutingMode,
    ) -> Result<Tensor<T>, ModelError> {
        let hidden = self.hidden_states(tokens, batch, seq, masks, tau, mode)?;
        let flat = hidden.reshape(vec![batch * seq, self.cfg.d_model])?;
        let logits = flat.matmul(&self.head().transpose()?)?;
        Ok(logits.reshape(vec![batch, seq, self.cfg.vocab_size])?)
    }

    fn forward_inner(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        masks: &[AttentionMask],
        tau: f64,
        mode: RoutingMode,
        mut trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>, ModelError> {
        if tokens.len() != batch * seq {
            return Err(ModelError::Config(format!(
                "token buffer of {} for batch {batch} x seq {seq}",
                tokens.len()
            )));
        }
        if masks.len() != batch {
            return Err(ModelError::Config(format!(
                "{} masks for batch {batch}",
                masks.len()
            )));
        }
        if seq > self.cfg.context_len {
            return Err(ModelError::Config(format!(
                "sequence length {seq} exceeds context length {}",
                self.cfg.context_len
            )));
        }
        let eps = T::from_f64(RMS_EPS);
        let attn_cfg = self.cfg.attention();
        let n_layers = self.cfg.n_layers;

        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let ids: Vec<usize> = tokens[b * seq..(b + 1) * seq]
                .iter()
                .map(|&t| t as usize)
                .collect();
            rows.push(self.embedding.embedding(&ids)?);
        }
        let mut x = Tensor::stack(&rows)?; // [batch, seq, d_model]

        for (layer_idx, block) in self.blocks.iter().enumerate() {
            // Per-layer noise stream so routing draws are independent across depth.
            let layer_mode = match mode {
                RoutingMode::TrainSample { seed } => RoutingMode::TrainSample {
                    seed: derive_seed(seed, layer_idx as u64),
                },
                other => other,
            };

            let normed = rmsnorm(&x, &block.attn_norm, eps)?;
            let mut attn_rows = Vec::with_capacity(batch);
            for b in 0..batch {
                let row = normed.select(0, b)?;
                attn_rows.push(gqa_attention(&row, &block.attn, &masks[b], &attn_cfg, eps)?);
            }
            let attn_out = Tensor::stack(&attn_rows)?;
            x = scaled_residual_add(&x, &attn_out, n_layers)?;

            let normed = rmsnorm(&x, &block.ffn_norm, eps)?;
            let h_bar = normed.mean_axis(1, false)?;
            let logits = routing_logits(&h_bar, &block.routing)?;
            if let Some(trace) = trace.as_deref_mut() {
                trace.push(logits.detach());
            }
            let gates = gumbel_softmax(&logits, tau, layer_mode)?;
            let ffn_out = polyglu_forward_with_gates(
                &normed,
                &block.w_gate,
                &block.w_up,
                &block.w_down,
                &gates,
            )?;
            x = scaled_residual_add(&x, &ffn_out, n_layers)?;
        }
        Ok(rmsnorm(&x, &self.final_norm, eps)?)
    }
}

/// Per-component parameter counts, computed analytically (no allocation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub embedding: usize,
    pub per_layer_attn: usize,
    pub per_layer_ffn: usize,
    pub per_layer_routing: usize,
    pub per_layer_norms: usize,
    pub per_layer_qknorm: usize,
    pub final_norm: usize,
    pub output_head: usize,
    pub total: usize,
}

pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.d_model;
    let q_dim = cfg.n_q_heads * cfg.head_dim;
    let kv_dim = cfg.n_kv_heads * cfg.head_dim;
    let embedding = cfg.vocab_size * d;
    let per_layer_attn = d * q_dim + 2 * d * kv_dim + q_dim * d;
    let per_layer_ffn = 3 * d * cfg.d_ff;
    let per_layer_routing =
        crate::polyglu::routing_param_count(d, cfg.d_ff, cfg.k, cfg.gate_hidden);
    let per_layer_norms = 2 * d;
    let per_layer_qknorm = 2 * cfg.head_dim;
    let final_norm = d;
    let output_head = if cfg.tie_embeddings { 0 } else { embedding };
    let total = embedding
        + cfg.n_layers
            * (per_layer_attn
                + per_layer_ffn
                + per_layer_routing
                + per_layer_norms
                + per_layer_qknorm)
        + final_norm
        + output_head;
    ParamCount {
        embedding,
        per_layer_attn,
        per_layer_ffn,
        per_layer_routing,
        per_layer_norms,
        per_layer_qknorm,
        final_norm,
        output_head,
        total,
    }
}
