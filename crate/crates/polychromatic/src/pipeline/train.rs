//! Pre-training and supervised fine-tuning loops.
//!
//! Gradient accumulation averages micro-batch losses (each backward pass is
//! seeded with 1/k), so the parameter update is invariant to how a batch is
//! split. One metrics record is appended per optimizer step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::layers::AttentionMask;
use crate::model::{Checkpoint, Model};
use crate::polyglu::{RoutingMode, TauSchedule};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

use super::data::{Batch, ChatSample, MixedStreams};
use super::loss::chunked_cross_entropy;
use super::optim::{clip_gradients, grad_norm, lr_schedule, AdamW, GroupingRule, OptimizerConfig};
use super::PipelineError;

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub opt: OptimizerConfig,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub seq_len: usize,
    pub chunk_size: usize,
    pub seed: u64,
    pub tau: TauSchedule,
    /// Where checkpoints go (final state, plus the abort dump on a NaN loss).
    pub checkpoint_dir: Option<PathBuf>,
    /// Extra periodic checkpoint interval; 0 disables.
    pub checkpoint_every: usize,
    pub metrics_path: Option<PathBuf>,
    /// SFT logs per-layer static routing entropy every this many steps.
    pub eval_every: usize,
}

impl TrainSettings {
    pub fn new(opt: OptimizerConfig, seq_len: usize, tau: TauSchedule, seed: u64) -> Self {
        TrainSettings {
            opt,
            micro_batch: 1,
            grad_accum: 1,
            seq_len,
            chunk_size: 64,
            seed,
            tau,
            checkpoint_dir: None,
            checkpoint_every: 0,
            metrics_path: None,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
    pub tokens_per_sec: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_by_layer: Option<Vec<f64>>,
}

pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub final_checkpoint: Option<PathBuf>,
}

struct MetricsLog {
    file: Option<BufWriter<File>>,
    records: Vec<StepRecord>,
}

impl MetricsLog {
    fn open(path: Option<&Path>) -> Result<Self, PipelineError> {
        let file = match path {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        Ok(MetricsLog {
            file,
            records: Vec::new(),
        })
    }

    fn record(&mut self, rec: StepRecord) -> Result<(), PipelineError> {
        if let Some(f) = self.file.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Forward + masked chunked loss for one packed batch.
pub fn batch_loss(
    model: &Model<f32>,
    batch: &Batch,
    tau: f64,
    mode: RoutingMode,
    chunk_size: usize,
) -> Result<Tensor<f32>, PipelineError> {
    let hidden = model.hidden_states(
        &batch.tokens,
        batch.batch,
        batch.seq_len,
        &batch.masks,
        tau,
        mode,
    )?;
    let flat = hidden.reshape(vec![batch.batch * batch.seq_len, model.cfg.d_model])?;
    chunked_cross_entropy(
        &flat,
        model.head(),
        &batch.targets,
        &batch.loss_mask,
        chunk_size,
    )
}

fn dump_abort_checkpoint(
    model: &Model<f32>,
    opt: &AdamW,
    step: usize,
    dir: Option<&Path>,
) -> Option<PathBuf> {
    let dir = dir?;
    std::fs::create_dir_all(dir).ok()?;
    let path = dir.join("abort.ckpt");
    Checkpoint::from_model(model, step as u64, Some(opt.snapshot()))
        .save(&path)
        .ok()?;
    Some(path)
}

/// Pre-training over mixed token streams with Gumbel-sampled routing and the
/// annealed temperature schedule.
pub fn pretrain(
    model: &Model<f32>,
    data: &mut MixedStreams,
    settings: &TrainSettings,
) -> Result<TrainReport, PipelineError> {
    let mut opt = AdamW::new(model, settings.opt.clone(), GroupingRule::Standard);
    pretrain_with(model, data, settings, &mut opt)
}

/// Pre-training with a caller-supplied optimizer (resume paths).
pub fn pretrain_with(
    model: &Model<f32>,
    data: &mut MixedStreams,
    settings: &TrainSettings,
    opt: &mut AdamW,
) -> Result<TrainReport, PipelineError> {
    let total_steps = settings.opt.total_steps;
    let mut metrics = MetricsLog::open(settings.metrics_path.as_deref())?;
    let mut final_checkpoint = None;

    for step in 0..total_steps {
        let tau = settings.tau.tau(step);
        opt.zero_grads();
        let mut loss_sum = 0.0_f64;
        let started = Instant::now();
        for micro in 0..settings.grad_accum {
            let batch =
                data.next_batch(settings.micro_batch, settings.seq_len, step, total_steps)?;
            let noise_stream = (step * settings.grad_accum + micro) as u64;
            let mode = RoutingMode::TrainSample {
                seed: derive_seed(settings.seed, noise_stream),
            };
            let loss = batch_loss(model, &batch, tau, mode, settings.chunk_size)?;
            let loss_val = f64::from(loss.item());
            if !loss_val.is_finite() {
                dump_abort_checkpoint(model, opt, step, settings.checkpoint_dir.as_deref());
                return Err(PipelineError::NanLoss {
                    loss: loss_val,
                    step,
                });
            }
            loss.backward_with_seed(1.0 / settings.grad_accum as f32)?;
            loss_sum += loss_val;
        }
        let norm = grad_norm(opt.params());
        clip_gradients(opt.params(), settings.opt.clip_norm)?;
        let lr = lr_schedule(step, &settings.opt);
        opt.step(lr)?;

        let tokens = settings.micro_batch * settings.seq_len * settings.grad_accum;
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        metrics.record(StepRecord {
            step,
            loss: loss_sum / settings.grad_accum as f64,
            lr,
            tau,
            grad_norm: norm,
            tokens_per_sec: tokens as f64 / elapsed,
            entropy_by_layer: None,
        })?;

        if settings.checkpoint_every > 0
            && (step + 1) % settings.checkpoint_every == 0
            && settings.checkpoint_dir.is_some()
        {
            let dir = settings.checkpoint_dir.as_ref().unwrap();
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("step{:06}.ckpt", step + 1));
            Checkpoint::from_model(model, (step + 1) as u64, Some(opt.snapshot())).save(&path)?;
        }
    }
    if let Some(dir) = settings.checkpoint_dir.as_deref() {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("final.ckpt");
        Checkpoint::from_model(model, total_steps as u64, Some(opt.snapshot())).save(&path)?;
        final_checkpoint = Some(path);
    }
    Ok(TrainReport {
        records: metrics.records,
        final_checkpoint,
    })
}

/// Builds the next-token view of a chat sample: inputs are tokens[..n−1],
/// targets tokens[1..], and a position contributes to the loss only when the
/// token it predicts lies in an assistant span.
fn chat_batch(sample: &ChatSample, context_len: usize) -> Result<Batch, PipelineError> {
    let n = sample.tokens.len().min(context_len + 1);
    if n < 2 {
        return Err(PipelineError::Data("chat sample too short".into()));
    }
    let tokens = sample.tokens[..n - 1].to_vec();
    let targets = sample.tokens[1..n].to_vec();
    let loss_mask: Vec<bool> = sample.loss_mask[1..n].to_vec();
    if !loss_mask.iter().any(|&m| m) {
        return Err(PipelineError::Data(
            "chat sample has no assistant targets inside the context window".into(),
        ));
    }
    let seq_len = n - 1;
    Ok(Batch {
        batch: 1,
        seq_len,
        tokens,
        targets,
        masks: vec![AttentionMask::single_doc(seq_len)],
        loss_mask,
    })
}

/// Supervised fine-tuning: identical loop to pre-training, but the routing
/// temperature is frozen at 0.1, the loss mask covers assistant tokens only,
/// and per-layer static routing entropy is logged at eval intervals.
pub fn sft(
    model: &Model<f32>,
    samples: &[ChatSample],
    settings: &TrainSettings,
) -> Result<TrainReport, PipelineError> {
    const SFT_TAU: f64 = 0.1;
    if samples.is_empty() {
        return Err(PipelineError::Data("no chat samples".into()));
    }
    let mut opt = AdamW::new(model, settings.opt.clone(), GroupingRule::Standard);
    let total_steps = settings.opt.total_steps;
    let mut metrics = MetricsLog::open(settings.metrics_path.as_deref())?;

    // Seeded shuffle fixes the visitation order for the whole run.
    let order = {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(derive_seed(settings.seed, 0x5f7));
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        idx
    };

    let mut final_checkpoint = None;
    for step in 0..total_steps {
        opt.zero_grads();
        let mut loss_sum = 0.0_f64;
        let mut token_count = 0usize;
        let started = Instant::now();
        for micro in 0..settings.grad_accum {
            let pick = order[(step * settings.grad_accum + micro) % order.len()];
            let batch = chat_batch(&samples[pick], model.cfg.context_len)?;
            token_count += batch.seq_len;
            let noise_stream = (step * settings.grad_accum + micro) as u64;
            let mode = RoutingMode::TrainSample {
                seed: derive_seed(settings.seed, noise_stream),
            };
            let loss = batch_loss(model, &batch, SFT_TAU, mode, settings.chunk_size)?;
            let loss_val = f64::from(loss.item());
            if !loss_val.is_finite() {
                dump_abort_checkpoint(model, &opt, step, settings.checkpoint_dir.as_deref());
                return Err(PipelineError::NanLoss {
                    loss: loss_val,
                    step,
                });
            }
            loss.backward_with_seed(1.0 / settings.grad_accum as f32)?;
            loss_sum += loss_val;
        }
        let norm = grad_norm(opt.params());
        clip_gradients(opt.params(), settings.opt.clip_norm)?;
        let lr = lr_schedule(step, &settings.opt);
        opt.step(lr)?;

        let entropy = if settings.eval_every > 0 && step % settings.eval_every == 0 {
            Some(crate::analysis::static_entropy_by_layer(model))
        } else {
            None
        };
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        metrics.record(StepRecord {
            step,
            loss: loss_sum / settings.grad_accum as f64,
            lr,
            tau: SFT_TAU,
            grad_norm: norm,
            tokens_per_sec: token_count as f64 / elapsed,
            entropy_by_layer: entropy,
        })?;
    }
    if let Some(dir) = settings.checkpoint_dir.as_deref() {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("sft-final.ckpt");
        Checkpoint::from_model(model, total_steps as u64, Some(opt.snapshot())).save(&path)?;
        final_checkpoint = Some(path);
    }
    Ok(TrainReport {
        records: metrics.records,
        final_checkpoint,
    })
}
