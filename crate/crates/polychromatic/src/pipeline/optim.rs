//! AdamW with decoupled weight decay and explicit parameter grouping, the
//! warmup + cosine learning-rate schedule, global-norm gradient clipping, and
//! the optimizer-state transplant that rewrites group membership in a
//! checkpoint without touching weights or moments.

use std::collections::BTreeMap;

use crate::model::{Checkpoint, Model, NamedParam, OptimizerEntry, OptimizerSnapshot, ParamKind};

use super::PipelineError;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub clip_norm: f64,
}

impl OptimizerConfig {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            peak_lr,
            warmup_steps,
            total_steps,
            clip_norm: 1.0,
        }
    }
}

/// Which parameters receive weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingRule {
    /// Rank ≥ 2 weight matrices and embeddings decay; biases, norm weights,
    /// and both routing-preference tensors (α, β) are exempt.
    Standard,
    /// Every rank ≥ 2 tensor decays. This is the naive grouping that silently
    /// pulls the 2D routing preference α toward zero; kept so the transplant
    /// fix has something real to correct.
    Rank2dOnly,
}

impl GroupingRule {
    pub fn decays(self, kind: ParamKind, rank: usize) -> bool {
        match self {
            GroupingRule::Standard => matches!(kind, ParamKind::Weight2d | ParamKind::Embedding),
            GroupingRule::Rank2dOnly => rank >= 2,
        }
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_schedule(t: usize, cfg: &OptimizerConfig) -> f64 {
    if cfg.warmup_steps > 0 && t < cfg.warmup_steps {
        return cfg.peak_lr * t as f64 / cfg.warmup_steps as f64;
    }
    if t >= cfg.total_steps || cfg.total_steps <= cfg.warmup_steps {
        return 0.0;
    }
    let progress = (t - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales all gradients so the global L2 norm is at most `max_norm`.
/// Returns the scale that was applied (1.0 when no clipping was needed).
pub fn clip_gradients<T: crate::tensor::Scalar>(
    params: &[NamedParam<T>],
    max_norm: f64,
) -> Result<f64, PipelineError> {
    let norm = grad_norm(params);
    if !norm.is_finite() {
        return Err(PipelineError::BadGradNorm(norm));
    }
    let scale = if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    };
    if scale < 1.0 {
        let s = T::from_f64(scale);
        for p in params {
            p.tensor.with_grad_buffer(|buf| {
                for v in buf.iter_mut() {
                    *v = *v * s;
                }
            });
        }
    }
    Ok(scale)
}

/// Global gradient L2 norm without modification.
pub fn grad_norm<T: crate::tensor::Scalar>(params: &[NamedParam<T>]) -> f64 {
    let mut sq_sum = 0.0_f64;
    for p in params {
        if let Some(g) = p.tensor.grad() {
            for v in g {
                sq_sum += v.to_f64() * v.to_f64();
            }
        }
    }
    sq_sum.sqrt()
}

pub struct AdamW {
    params: Vec<NamedParam<f32>>,
    decay_flags: Vec<bool>,
    exp_avg: Vec<Vec<f32>>,
    exp_avg_sq: Vec<Vec<f32>>,
    step: u64,
    cfg: OptimizerConfig,
}

impl AdamW {
    pub fn new(model: &Model<f32>, cfg: OptimizerConfig, rule: GroupingRule) -> Self {
        Self::from_params(model.params(), cfg, rule)
    }

    pub fn from_params(
        params: Vec<NamedParam<f32>>,
        cfg: OptimizerConfig,
        rule: GroupingRule,
    ) -> Self {
        // The decay / no-decay split must cover every trainable parameter
        // exactly once; duplicate names would double-apply updates.
        let mut seen = std::collections::HashSet::new();
        for p in &params {
            assert!(
                seen.insert(p.name.clone()),
                "duplicate parameter {}",
                p.name
            );
            assert!(p.tensor.requires_grad(), "{} is not trainable", p.name);
        }
        let decay_flags = params
            .iter()
            .map(|p| rule.decays(p.kind, p.tensor.rank()))
            .collect();
        let exp_avg = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        let exp_avg_sq = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamW {
            params,
            decay_flags,
            exp_avg,
            exp_avg_sq,
            step: 0,
            cfg,
        }
    }

    pub fn params(&self) -> &[NamedParam<f32>] {
        &self.params
    }

    pub fn decay_flags(&self) -> &[bool] {
        &self.decay_flags
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// One update with learning rate `lr`. Decoupled decay multiplies the
    /// decay set by (1 − lr·λ) before the moment-based update; moments are
    /// bias-corrected. A non-finite gradient aborts before any mutation.
    pub fn step(&mut self, lr: f64) -> Result<(), PipelineError> {
        let next_step = self.step + 1;
        for p in &self.params {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(PipelineError::NanGradient {
                        param: p.name.clone(),
                        step: next_step,
                    });
                }
            }
        }
        self.step = next_step;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let eps = self.cfg.eps as f32;
        let decay_factor = (1.0 - lr * self.cfg.weight_decay) as f32;
        let lr32 = lr as f32;
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);

        for (i, p) in self.params.iter().enumerate() {
            let grad = p.tensor.grad();
            let mut data = p.tensor.leaf_data_mut();
            let m = &mut self.exp_avg[i];
            let v = &mut self.exp_avg_sq[i];
            if self.decay_flags[i] {
                for w in data.iter_mut() {
                    *w *= decay_factor;
                }
            }
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr32 * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            entries: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| OptimizerEntry {
                    name: p.name.clone(),
                    decay: self.decay_flags[i],
                    exp_avg: self.exp_avg[i].clone(),
                    exp_avg_sq: self.exp_avg_sq[i].clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds optimizer state from a snapshot; group membership comes from
    /// the snapshot's stored flags, not from a rule.
    pub fn from_snapshot(
        model: &Model<f32>,
        cfg: OptimizerConfig,
        snapshot: &OptimizerSnapshot,
    ) -> Result<Self, PipelineError> {
        let params = model.params();
        let by_name: BTreeMap<&str, &OptimizerEntry> = snapshot
            .entries
            .iter()
            .map(|e| (e.name.as_str(), e))
            .collect();
        let mut decay_flags = Vec::with_capacity(params.len());
        let mut exp_avg = Vec::with_capacity(params.len());
        let mut exp_avg_sq = Vec::with_capacity(params.len());
        for p in &params {
            let entry = by_name.get(p.name.as_str()).ok_or_else(|| {
                PipelineError::OptimizerState(format!("missing moments for {}", p.name))
            })?;
            if entry.exp_avg.len() != p.tensor.numel() {
                return Err(PipelineError::OptimizerState(format!(
                    "moment size mismatch for {}",
                    p.name
                )));
            }
            decay_flags.push(entry.decay);
            exp_avg.push(entry.exp_avg.clone());
            exp_avg_sq.push(entry.exp_avg_sq.clone());
        }
        Ok(AdamW {
            params,
            decay_flags,
            exp_avg,
            exp_avg_sq,
            step: snapshot.step,
            cfg,
        })
    }
}

/// Rewrites a checkpoint's optimizer group membership under `new_rule`.
/// Moments, step counters, and model weights are carried over unchanged;
/// every parameter must already have optimizer state.
pub fn transplant_optimizer_state(
    ckpt: &Checkpoint,
    new_rule: GroupingRule,
) -> Result<Checkpoint, PipelineError> {
    let old = ckpt
        .optimizer
        .as_ref()
        .ok_or_else(|| PipelineError::OptimizerState("checkpoint has no optimizer state".into()))?;
    let model = ckpt.to_model()?;
    let params = model.params();
    let by_name: BTreeMap<&str, &OptimizerEntry> =
        old.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut entries = Vec::with_capacity(params.len());
    for p in &params {
        let entry = by_name.get(p.name.as_str()).ok_or_else(|| {
            PipelineError::OptimizerState(format!("missing moments for {}", p.name))
        })?;
        entries.push(OptimizerEntry {
            name: entry.name.clone(),
            decay: new_rule.decays(p.kind, p.tensor.rank()),
            exp_avg: entry.exp_avg.clone(),
            exp_avg_sq: entry.exp_avg_sq.clone(),
        });
    }
    Ok(Checkpoint {
        config: ckpt.config.clone(),
        training_step: ckpt.training_step,
        tensors: ckpt.tensors.clone(),
        optimizer: Some(OptimizerSnapshot {
            step: old.step,
            entries,
        }),
    })
}
