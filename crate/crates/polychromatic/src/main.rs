use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use polychromatic::analysis::{
    distill_frozen, domain_perplexity, dynamic_entropy, dynamic_heatmap, eval_batches,
    gradient_suite, heatmap_to_csv, histogram_to_csv, layer_distribution,
    layer_distribution_to_csv, static_entropy_histogram, static_heatmap, GRAD_TOLERANCE,
};
use polychromatic::model::{
    build_model, count_params, parse_kv_text, Checkpoint, Model, ModelConfig,
};
use polychromatic::pipeline::{
    load_chat_samples, pretrain, sft, synthetic_documents, tokenize_documents,
    transplant_optimizer_state, write_token_file, GroupingRule, MixedStreams, OptimizerConfig,
    TokenStream, TrainSettings, EOS_ID,
};
use polychromatic::polyglu::TauSchedule;

#[derive(Parser)]
#[command(
    name = "polychromatic",
    about = "Train and probe a byte-scale decoder with activation-routing feed-forward layers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Reference,
    Desk,
    Tiny,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Reference => ModelConfig::reference(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Standard,
    Rank2dOnly,
}

impl From<RuleArg> for GroupingRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Standard => GroupingRule::Standard,
            RuleArg::Rank2dOnly => GroupingRule::Rank2dOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Analytic parameter count for a preset or config file.
    CountParams {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference verification of every registered gradient path.
    Gradcheck,
    /// Pre-train on token streams (or a generated synthetic corpus).
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Raw little-endian u32 token files, one per domain.
        #[arg(long)]
        data: Vec<PathBuf>,
        /// Generate a synthetic text corpus of roughly this many megabytes.
        #[arg(long)]
        synthetic_mb: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Domain weights before the mix switch, comma-separated.
        #[arg(long)]
        mix_phase1: Option<String>,
        /// Domain weights after the mix switch, comma-separated.
        #[arg(long)]
        mix_phase2: Option<String>,
        /// Fraction of training after which phase-2 weights apply.
        #[arg(long, default_value_t = 0.8)]
        mix_switch: f64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Supervised fine-tuning on chat JSONL (τ frozen at 0.1).
    Sft {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Held-out perplexity per domain.
    EvalPpl {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Domain streams as name=path pairs.
        #[arg(long, required = true)]
        data: Vec<String>,
        #[arg(long, default_value_t = 8)]
        n_seqs: usize,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dynamic + static routing-entropy diagnostics.
    AnalyzeRouting {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Build a fresh model from this config instead of a checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Held-out token file for the dynamic measurement.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        eval_seqs: usize,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-neuron preferred-activation maps and layer shares.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        eval_seqs: usize,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Freeze routing into per-neuron activation tables.
    Distill {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        eval_seqs: usize,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite a checkpoint's optimizer grouping without touching weights.
    Transplant {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_file: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        rule: RuleArg,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::CountParams { preset, config } => cmd_count_params(preset, config),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Pretrain {
            config,
            data,
            synthetic_mb,
            out,
            mix_phase1,
            mix_phase2,
            mix_switch,
            steps,
            seed,
        } => cmd_pretrain(
            config,
            data,
            synthetic_mb,
            out,
            mix_phase1,
            mix_phase2,
            mix_switch,
            steps,
            seed,
        ),
        Command::Sft {
            checkpoint,
            data,
            out,
            config,
            steps,
            seed,
        } => cmd_sft(checkpoint, data, out, config, steps, seed),
        Command::EvalPpl {
            checkpoint,
            data,
            n_seqs,
            seq_len,
            tau,
            out,
        } => cmd_eval_ppl(checkpoint, data, n_seqs, seq_len, tau, out),
        Command::AnalyzeRouting {
            checkpoint,
            config,
            seed,
            data,
            eval_seqs,
            tau,
            bins,
            out,
        } => cmd_analyze_routing(checkpoint, config, seed, data, eval_seqs, tau, bins, out),
        Command::Heatmap {
            checkpoint,
            data,
            eval_seqs,
            tau,
            out,
        } => cmd_heatmap(checkpoint, data, eval_seqs, tau, out),
        Command::Distill {
            checkpoint,
            data,
            eval_seqs,
            tau,
            out,
        } => cmd_distill(checkpoint, data, eval_seqs, tau, out),
        Command::Transplant {
            checkpoint,
            out_file,
            rule,
        } => cmd_transplant(checkpoint, out_file, rule.into()),
    }
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Training keys accepted in config files alongside the model keys.
const TRAIN_KEYS: &[&str] = &[
    "peak_lr",
    "warmup_steps",
    "total_steps",
    "micro_batch",
    "grad_accum",
    "seq_len",
    "chunk_size",
    "seed",
    "checkpoint_every",
    "eval_every",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "clip_norm",
];

fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let map = parse_kv_text(&text)?;
    for key in map.keys() {
        if !ModelConfig::kv_keys().contains(&key.as_str()) && !TRAIN_KEYS.contains(&key.as_str()) {
            bail!("{}: unknown config key {key:?}", path.display());
        }
    }
    Ok(map)
}

fn model_config_from(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
    Ok(ModelConfig::from_kv(map, ModelConfig::desk())?)
}

fn train_settings_from(map: &BTreeMap<String, String>, cfg: &ModelConfig) -> Result<TrainSettings> {
    let get_usize = |key: &str, default: usize| -> Result<usize> {
        match map.get(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("{key}: expected integer, got {v:?}")),
            None => Ok(default),
        }
    };
    let get_f64 = |key: &str, default: f64| -> Result<f64> {
        match map.get(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("{key}: expected float, got {v:?}")),
            None => Ok(default),
        }
    };
    let total_steps = get_usize("total_steps", 2000)?;
    let mut opt = OptimizerConfig::new(
        get_f64("peak_lr", 1e-3)?,
        get_usize("warmup_steps", 100)?,
        total_steps,
    );
    opt.beta1 = get_f64("beta1", opt.beta1)?;
    opt.beta2 = get_f64("beta2", opt.beta2)?;
    opt.eps = get_f64("eps", opt.eps)?;
    opt.weight_decay = get_f64("weight_decay", opt.weight_decay)?;
    opt.clip_norm = get_f64("clip_norm", opt.clip_norm)?;

    let mut settings = TrainSettings::new(
        opt,
        get_usize("seq_len", cfg.context_len)?,
        TauSchedule::new(total_steps)?,
        get_usize("seed", 0)? as u64,
    );
    settings.micro_batch = get_usize("micro_batch", 1)?;
    settings.grad_accum = get_usize("grad_accum", 1)?;
    settings.chunk_size = get_usize("chunk_size", 64)?;
    settings.checkpoint_every = get_usize("checkpoint_every", 0)?;
    settings.eval_every = get_usize("eval_every", 100)?;
    Ok(settings)
}

fn cmd_count_params(preset: Preset, config: Option<PathBuf>) -> Result<()> {
    let cfg = match config {
        Some(path) => model_config_from(&read_kv_file(&path)?)?,
        None => preset.config(),
    };
    let count = count_params(&cfg);
    println!("embedding          {}", thousands(count.embedding));
    println!("per-layer attn     {}", thousands(count.per_layer_attn));
    println!("per-layer ffn      {}", thousands(count.per_layer_ffn));
    println!("per-layer routing  {}", thousands(count.per_layer_routing));
    println!("per-layer norms    {}", thousands(count.per_layer_norms));
    println!("per-layer qk-norm  {}", thousands(count.per_layer_qknorm));
    println!("final norm         {}", thousands(count.final_norm));
    if count.output_head > 0 {
        println!("output head        {}", thousands(count.output_head));
    }
    println!("total              {}", thousands(count.total));
    let routing_total = cfg.n_layers * count.per_layer_routing;
    println!(
        "routing share      {} ({:.3}%)",
        thousands(routing_total),
        100.0 * routing_total as f64 / count.total as f64
    );
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let results = gradient_suite();
    let mut failures = 0usize;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<40} max_rel_err={:.3e}", r.name, r.max_rel_err);
        if !r.passed() {
            failures += 1;
        }
    }
    println!(
        "{} checks, {} failed (tolerance {:.0e})",
        results.len(),
        failures,
        GRAD_TOLERANCE
    );
    if failures > 0 {
        std::process::exit(1);
    }
    Ok(())
}

fn parse_weights(spec: Option<&str>, n: usize, what: &str) -> Result<Vec<f64>> {
    match spec {
        None => Ok(vec![1.0; n]),
        Some(s) => {
            let w: Vec<f64> = s
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .with_context(|| format!("{what}: expected comma-separated floats"))?;
            if w.len() != n {
                bail!("{what}: {} weights for {n} streams", w.len());
            }
            Ok(w)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_pretrain(
    config: Option<PathBuf>,
    data: Vec<PathBuf>,
    synthetic_mb: Option<usize>,
    out: PathBuf,
    mix_phase1: Option<String>,
    mix_phase2: Option<String>,
    mix_switch: f64,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    fs::create_dir_all(&out)?;
    let map = match config {
        Some(path) => read_kv_file(&path)?,
        None => BTreeMap::new(),
    };
    let cfg = model_config_from(&map)?;
    let mut train = train_settings_from(&map, &cfg)?;
    if let Some(s) = steps {
        train.opt.total_steps = s;
        train.tau = TauSchedule::new(s)?;
    }
    if let Some(s) = seed {
        train.seed = s;
    }
    train.checkpoint_dir = Some(out.clone());
    train.metrics_path = Some(out.join("metrics.jsonl"));

    let mut paths = data;
    if let Some(mb) = synthetic_mb {
        let docs = synthetic_documents(mb * 1_000_000, train.seed);
        let tokens = tokenize_documents(&docs);
        let path = out.join("synthetic.tokens");
        write_token_file(&path, &tokens)?;
        println!(
            "generated synthetic corpus: {} tokens at {}",
            thousands(tokens.len()),
            path.display()
        );
        paths.push(path);
    }
    if paths.is_empty() {
        bail!("no training data: pass --data or --synthetic-mb");
    }
    let streams = paths
        .iter()
        .map(|p| TokenStream::from_file(p, EOS_ID))
        .collect::<Result<Vec<_>, _>>()?;
    let phase1 = parse_weights(mix_phase1.as_deref(), streams.len(), "--mix-phase1")?;
    let phase2 = parse_weights(mix_phase2.as_deref(), streams.len(), "--mix-phase2")?;
    let mut mix = MixedStreams::new(streams, phase1, phase2, mix_switch, train.seed)?;

    let model = build_model::<f32>(&cfg, train.seed)?;
    println!(
        "pretraining {} params for {} steps (seq {}, micro-batch {} x accum {})",
        thousands(model.allocated_param_count()),
        train.opt.total_steps,
        train.seq_len,
        train.micro_batch,
        train.grad_accum
    );
    let report = pretrain(&model, &mut mix, &train)?;
    if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
        println!(
            "loss {:.4} -> {:.4} over {} steps",
            first.loss,
            last.loss,
            report.records.len()
        );
    }
    if let Some(path) = report.final_checkpoint {
        println!("checkpoint: {}", path.display());
    }
    Ok(())
}

fn cmd_sft(
    checkpoint: PathBuf,
    data: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    fs::create_dir_all(&out)?;
    let ckpt = Checkpoint::load(&checkpoint)?;
    let model = ckpt.to_model()?;
    let map = match config {
        Some(path) => read_kv_file(&path)?,
        None => BTreeMap::new(),
    };
    let mut train = train_settings_from(&map, &model.cfg)?;
    if !map.contains_key("peak_lr") {
        train.opt.peak_lr = 2e-5;
    }
    if let Some(s) = steps {
        train.opt.total_steps = s;
    }
    if let Some(s) = seed {
        train.seed = s;
    }
    train.checkpoint_dir = Some(out.clone());
    train.metrics_path = Some(out.join("sft-metrics.jsonl"));

    let samples = load_chat_samples(&data)?;
    println!(
        "fine-tuning on {} chat samples for {} steps",
        samples.len(),
        train.opt.total_steps
    );
    let report = sft(&model, &samples, &train)?;
    if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
        println!("loss {:.4} -> {:.4}", first.loss, last.loss);
    }
    if let Some(path) = report.final_checkpoint {
        println!("checkpoint: {}", path.display());
    }
    Ok(())
}

fn cmd_eval_ppl(
    checkpoint: PathBuf,
    data: Vec<String>,
    n_seqs: usize,
    seq_len: Option<usize>,
    tau: f64,
    out: PathBuf,
) -> Result<()> {
    fs::create_dir_all(&out)?;
    let model = Checkpoint::load(&checkpoint)?.to_model()?;
    let seq_len = seq_len.unwrap_or(model.cfg.context_len);
    let mut streams = Vec::new();
    for spec in &data {
        let (name, path) = spec
            .split_once('=')
            .with_context(|| format!("--data {spec:?}: expected name=path"))?;
        streams.push((
            name.to_string(),
            TokenStream::from_file(Path::new(path), EOS_ID)?,
        ));
    }
    let report = domain_perplexity(&model, &streams, n_seqs, seq_len, tau)?;
    let mut lines = String::new();
    for d in &report.domains {
        println!(
            "{}: ppl {:.4}  bits/token {:.4}  ({} seqs of {})",
            d.domain, d.perplexity, d.bits_per_token, d.sequences, seq_len
        );
        lines.push_str(&serde_json::to_string(d)?);
        lines.push('\n');
    }
    fs::write(out.join("perplexity.jsonl"), lines)?;
    Ok(())
}

fn load_or_build(
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
) -> Result<Model<f32>> {
    match (checkpoint, config) {
        (Some(path), _) => Ok(Checkpoint::load(path)?.to_model()?),
        (None, Some(path)) => Ok(build_model(
            &model_config_from(&read_kv_file(path)?)?,
            seed,
        )?),
        (None, None) => Ok(build_model(&ModelConfig::desk(), seed)?),
    }
}

fn batches_for(
    model: &Model<f32>,
    data: Option<&Path>,
    eval_seqs: usize,
) -> Result<Vec<polychromatic::pipeline::Batch>> {
    match data {
        Some(path) => {
            let stream = TokenStream::from_file(path, EOS_ID)?;
            let seq_len = model.cfg.context_len.min(stream.len().saturating_sub(1));
            Ok(eval_batches(&stream, eval_seqs, 1, seq_len)?)
        }
        None => Ok(vec![polychromatic::analysis::probe_batch(
            model.cfg.vocab_size,
            eval_seqs.max(1),
            model.cfg.context_len.min(64),
        )]),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze_routing(
    checkpoint: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: u64,
    data: Option<PathBuf>,
    eval_seqs: usize,
    tau: f64,
    bins: usize,
    out: PathBuf,
) -> Result<()> {
    fs::create_dir_all(&out)?;
    let model = load_or_build(checkpoint.as_deref(), config.as_deref(), seed)?;
    let batches = batches_for(&model, data.as_deref(), eval_seqs)?;
    let report = dynamic_entropy(&model, &batches, tau)?;
    let mut lines = String::new();
    for layer in &report.layers {
        println!(
            "layer {:>2}: mean {:.6} nats (raw {:.6}), fraction {}{}",
            layer.layer,
            layer.mean_scaled,
            layer.mean_raw,
            layer.fraction_scaled,
            if layer.flexibility_point {
                "  [flexibility point]"
            } else {
                ""
            }
        );
        lines.push_str(&serde_json::to_string(layer)?);
        lines.push('\n');
    }
    println!(
        "network mean {:.6} nats (neuron-first) / {:.6} (batch-first)",
        report.network_mean_scaled, report.network_mean_scaled_batch_first
    );
    fs::write(out.join("entropy.jsonl"), lines)?;

    let hist = static_entropy_histogram(&model, bins);
    fs::write(
        out.join("static_entropy_histogram.csv"),
        histogram_to_csv(&hist),
    )?;
    Ok(())
}

fn cmd_heatmap(
    checkpoint: PathBuf,
    data: Option<PathBuf>,
    eval_seqs: usize,
    tau: f64,
    out: PathBuf,
) -> Result<()> {
    fs::create_dir_all(&out)?;
    let model = Checkpoint::load(&checkpoint)?.to_model()?;
    let static_map = static_heatmap(&model);
    fs::write(out.join("heatmap_static.csv"), heatmap_to_csv(&static_map))?;
    fs::write(
        out.join("layer_distribution_static.csv"),
        layer_distribution_to_csv(&layer_distribution(&static_map)),
    )?;
    let batches = batches_for(&model, data.as_deref(), eval_seqs)?;
    let dynamic_map = dynamic_heatmap(&model, &batches, tau)?;
    fs::write(
        out.join("heatmap_dynamic.csv"),
        heatmap_to_csv(&dynamic_map),
    )?;
    fs::write(
        out.join("layer_distribution_dynamic.csv"),
        layer_distribution_to_csv(&layer_distribution(&dynamic_map)),
    )?;
    println!("wrote static + dynamic heatmaps to {}", out.display());
    Ok(())
}

fn cmd_distill(
    checkpoint: PathBuf,
    data: Option<PathBuf>,
    eval_seqs: usize,
    tau: f64,
    out: PathBuf,
) -> Result<()> {
    fs::create_dir_all(&out)?;
    let model = Checkpoint::load(&checkpoint)?.to_model()?;
    let batches = batches_for(&model, data.as_deref(), eval_seqs)?;
    let distilled = distill_frozen(&model, &batches, tau)?;
    let tables: Vec<Vec<_>> = distilled
        .activation_tables()
        .iter()
        .map(|t| t.to_vec())
        .collect();
    fs::write(out.join("activation_tables.csv"), heatmap_to_csv(&tables))?;
    let original = model.allocated_param_count();
    let summary = serde_json::json!({
        "original_params": original,
        "distilled_params": distilled.param_count(),
        "routing_params_removed": original - distilled.param_count(),
    });
    fs::write(
        out.join("distill_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "distilled {} -> {} params (routing tables at {})",
        thousands(original),
        thousands(distilled.param_count()),
        out.join("activation_tables.csv").display()
    );
    Ok(())
}

fn cmd_transplant(checkpoint: PathBuf, out_file: PathBuf, rule: GroupingRule) -> Result<()> {
    let ckpt = Checkpoint::load(&checkpoint)?;
    let fixed = transplant_optimizer_state(&ckpt, rule)?;
    fixed.save(&out_file)?;
    println!(
        "rewrote optimizer grouping ({} tensors) into {}",
        fixed.optimizer.as_ref().map_or(0, |o| o.entries.len()),
        out_file.display()
    );
    Ok(())
}
