//! Routing diagnostics and evaluation: dynamic/static routing entropy, the
//! per-neuron activation-preference heatmap, layer-wise activation shares,
//! domain perplexity, and frozen-routing distillation.

mod distill;
mod gradsuite;
mod reports;

pub use distill::{distill_frozen, DistilledModel};
pub use gradsuite::{gradient_suite, GradCheckResult, GRAD_TOLERANCE};
pub use reports::{heatmap_from_csv, heatmap_to_csv, histogram_to_csv, layer_distribution_to_csv};

use serde::Serialize;

use crate::layers::AttentionMask;
use crate::model::Model;
use crate::pipeline::{Batch, PipelineError, TokenStream};
use crate::polyglu::{ActivationId, RoutingMode, PALETTE_SIZE};
use crate::tensor::Scalar;

/// ln(4): maximum routing entropy for the four-member palette.
pub fn max_entropy() -> f64 {
    (PALETTE_SIZE as f64).ln()
}

/// Shannon entropy (nats) of softmax(logits / tau) over one palette lane.
pub fn softmax_entropy(logits: &[f64], tau: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let exps: Vec<f64> = scaled
        .iter()
        .map(|&l| {
            let e = (l - max).exp();
            sum += e;
            e
        })
        .collect();
    let mut h = 0.0;
    for e in exps {
        let p = e / sum;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Formats an entropy value as a percentage of ln(4), e.g. 4.1e-4 → "0.030%".
pub fn format_entropy_fraction(entropy: f64) -> String {
    format!("{:.3}%", 100.0 * entropy / max_entropy())
}

/// Per-layer dynamic routing entropy over held-out batches.
#[derive(Debug, Clone, Serialize)]
pub struct LayerEntropy {
    pub layer: usize,
    /// mean over (batch, neuron) of H(softmax(ℓ))
    pub mean_raw: f64,
    /// mean of H(softmax(ℓ/τ))
    pub mean_scaled: f64,
    pub max_raw: f64,
    pub max_scaled: f64,
    /// mean_scaled as a fraction of ln 4, formatted as a percentage
    pub fraction_scaled: String,
    /// elevated-entropy marker: mean above 10× the network median
    pub flexibility_point: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EntropyReport {
    pub tau: f64,
    pub layers: Vec<LayerEntropy>,
    /// mean over neurons of per-neuron batch means, then over layers
    pub network_mean_scaled: f64,
    /// same quantity averaged in the other order (batches before neurons);
    /// the two differ only when routing varies across batches
    pub network_mean_scaled_batch_first: f64,
}

/// Runs the model over eval batches and measures the entropy of the softmax
/// over the combined routing logits per (batch element, neuron), both raw
/// and scaled by 1/τ.
pub fn dynamic_entropy(
    model: &Model<f32>,
    batches: &[Batch],
    tau: f64,
) -> Result<EntropyReport, PipelineError> {
    if batches.is_empty() {
        return Err(PipelineError::Data("empty eval set".into()));
    }
    let n_layers = model.cfg.n_layers;
    let d_ff = model.cfg.d_ff;
    // per layer: sums of per-lane entropies + max
    let mut sum_raw = vec![0.0_f64; n_layers];
    let mut sum_scaled = vec![0.0_f64; n_layers];
    let mut max_raw = vec![0.0_f64; n_layers];
    let mut max_scaled = vec![0.0_f64; n_layers];
    let mut lanes = 0usize;
    let mut batch_means_scaled: Vec<f64> = Vec::new();

    for batch in batches {
        let (_, trace) = model.hidden_states_traced(
            &batch.tokens,
            batch.batch,
            batch.seq_len,
            &batch.masks,
            tau,
            RoutingMode::EvalSoft,
        )?;
        let mut batch_sum = 0.0;
        let mut batch_lanes = 0usize;
        for (layer, logits) in trace.iter().enumerate() {
            let data = logits.data();
            for lane in data.chunks_exact(PALETTE_SIZE) {
                let lane_f64: Vec<f64> = lane.iter().map(|&v| v.to_f64()).collect();
                let raw = softmax_entropy(&lane_f64, 1.0);
                let scaled = softmax_entropy(&lane_f64, tau);
                sum_raw[layer] += raw;
                sum_scaled[layer] += scaled;
                max_raw[layer] = max_raw[layer].max(raw);
                max_scaled[layer] = max_scaled[layer].max(scaled);
                batch_sum += scaled;
                batch_lanes += 1;
            }
        }
        lanes += batch.batch * d_ff;
        batch_means_scaled.push(batch_sum / batch_lanes as f64);
    }

    let per_layer_mean: Vec<f64> = sum_scaled.iter().map(|s| s / lanes as f64).collect();
    let mut sorted = per_layer_mean.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];

    let layers = (0..n_layers)
        .map(|layer| {
            let mean_scaled = per_layer_mean[layer];
            LayerEntropy {
                layer,
                mean_raw: sum_raw[layer] / lanes as f64,
                mean_scaled,
                max_raw: max_raw[layer],
                max_scaled: max_scaled[layer],
                fraction_scaled: format_entropy_fraction(mean_scaled),
                flexibility_point: median > 0.0 && mean_scaled > 10.0 * median,
            }
        })
        .collect::<Vec<_>>();

    let network_mean_scaled = per_layer_mean.iter().sum::<f64>() / n_layers as f64;
    let network_mean_scaled_batch_first =
        batch_means_scaled.iter().sum::<f64>() / batch_means_scaled.len() as f64;
    Ok(EntropyReport {
        tau,
        layers,
        network_mean_scaled,
        network_mean_scaled_batch_first,
    })
}

/// Mean static routing entropy H(softmax(α_j)) per layer, in nats.
pub fn static_entropy_by_layer<T: Scalar>(model: &Model<T>) -> Vec<f64> {
    model
        .blocks
        .iter()
        .map(|block| {
            let alpha = block.routing.alpha.data();
            let d_ff = block.routing.d_ff();
            let mut sum = 0.0;
            for j in 0..d_ff {
                let row: Vec<f64> = alpha[j * PALETTE_SIZE..(j + 1) * PALETTE_SIZE]
                    .iter()
                    .map(|&v| v.to_f64())
                    .collect();
                sum += softmax_entropy(&row, 1.0);
            }
            sum / d_ff as f64
        })
        .collect()
}

/// Histogram of per-neuron static entropy, all layers pooled, binned over
/// [0, ln 4].
#[derive(Debug, Clone, Serialize)]
pub struct EntropyHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn static_entropy_histogram<T: Scalar>(model: &Model<T>, bins: usize) -> EntropyHistogram {
    let bins = bins.max(1);
    let top = max_entropy();
    let width = top / bins as f64;
    let mut counts = vec![0usize; bins];
    for block in &model.blocks {
        let alpha = block.routing.alpha.data();
        for row in alpha.chunks_exact(PALETTE_SIZE) {
            let row_f64: Vec<f64> = row.iter().map(|&v| v.to_f64()).collect();
            let h = softmax_entropy(&row_f64, 1.0);
            let bin = ((h / width) as usize).min(bins - 1);
            counts[bin] += 1;
        }
    }
    let bin_edges = (0..=bins).map(|i| i as f64 * width).collect();
    EntropyHistogram { bin_edges, counts }
}

/// Per-neuron preferred activation (argmax of α; ties to the lowest index),
/// one row per layer.
pub fn static_heatmap<T: Scalar>(model: &Model<T>) -> Vec<Vec<ActivationId>> {
    model
        .blocks
        .iter()
        .map(|block| {
            let (arg, _) = block
                .routing
                .alpha
                .argmax_axis(1)
                .expect("alpha is [d_ff, K]");
            arg.into_iter()
                .map(|k| ActivationId::from_index(k).expect("palette index"))
                .collect()
        })
        .collect()
}

/// Dynamic counterpart: argmax of the mean eval-time routing logits.
/// With no batches the gate term is absent and this reduces to the static map.
pub fn dynamic_heatmap(
    model: &Model<f32>,
    batches: &[Batch],
    tau: f64,
) -> Result<Vec<Vec<ActivationId>>, PipelineError> {
    let mean = mean_routing_logits(model, batches, tau)?;
    Ok(mean
        .into_iter()
        .map(|layer| {
            layer
                .chunks_exact(PALETTE_SIZE)
                .map(|lane| {
                    let mut best = 0usize;
                    for k in 1..PALETTE_SIZE {
                        if lane[k] > lane[best] {
                            best = k;
                        }
                    }
                    ActivationId::from_index(best).expect("palette index")
                })
                .collect()
        })
        .collect())
}

/// Mean routing logits per layer over eval batches, flattened [d_ff * K].
/// An empty eval set yields the static preferences alone.
pub fn mean_routing_logits(
    model: &Model<f32>,
    batches: &[Batch],
    tau: f64,
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let d_ff = model.cfg.d_ff;
    let mut sums = vec![vec![0.0_f64; d_ff * PALETTE_SIZE]; model.cfg.n_layers];
    let mut rows = 0usize;
    for batch in batches {
        let (_, trace) = model.hidden_states_traced(
            &batch.tokens,
            batch.batch,
            batch.seq_len,
            &batch.masks,
            tau,
            RoutingMode::EvalSoft,
        )?;
        for (layer, logits) in trace.iter().enumerate() {
            let data = logits.data();
            for b in 0..batch.batch {
                let start = b * d_ff * PALETTE_SIZE;
                for (slot, &v) in sums[layer]
                    .iter_mut()
                    .zip(data[start..start + d_ff * PALETTE_SIZE].iter())
                {
                    *slot += v.to_f64();
                }
            }
        }
        rows += batch.batch;
    }
    if rows == 0 {
        for (layer, block) in model.blocks.iter().enumerate() {
            for (slot, &v) in sums[layer]
                .iter_mut()
                .zip(block.routing.alpha.data().iter())
            {
                *slot = v.to_f64();
            }
        }
    } else {
        for layer in sums.iter_mut() {
            for v in layer.iter_mut() {
                *v /= rows as f64;
            }
        }
    }
    Ok(sums)
}

/// Share (%) of each activation per layer, derived from a heatmap.
pub fn layer_distribution(heatmap: &[Vec<ActivationId>]) -> Vec<[f64; PALETTE_SIZE]> {
    heatmap
        .iter()
        .map(|row| {
            let mut counts = [0usize; PALETTE_SIZE];
            for id in row {
                counts[id.index()] += 1;
            }
            let total = row.len().max(1) as f64;
            let mut shares = [0.0; PALETTE_SIZE];
            for k in 0..PALETTE_SIZE {
                shares[k] = 100.0 * counts[k] as f64 / total;
            }
            shares
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DomainPerplexity {
    pub domain: String,
    pub sequences: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
    pub bits_per_token: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerplexityReport {
    pub domains: Vec<DomainPerplexity>,
}

/// Teacher-forced NLL per domain with document masking, soft routing at the
/// given (final) temperature, over `n_seqs` non-overlapping windows.
pub fn domain_perplexity(
    model: &Model<f32>,
    streams: &[(String, TokenStream)],
    n_seqs: usize,
    seq_len: usize,
    tau: f64,
) -> Result<PerplexityReport, PipelineError> {
    use crate::pipeline::load_batch;
    let mut domains = Vec::with_capacity(streams.len());
    for (name, stream) in streams {
        if stream.len() < n_seqs * seq_len + 1 {
            return Err(PipelineError::Data(format!(
                "domain {name}: stream of {} tokens cannot supply {n_seqs} non-overlapping windows of {seq_len}",
                stream.len()
            )));
        }
        let mut nll_sum = 0.0_f64;
        let mut positions = 0usize;
        let mut cursor = 0usize;
        for _ in 0..n_seqs {
            let (batch, next) = load_batch(stream, 1, seq_len, cursor)?;
            cursor = next;
            let loss =
                crate::pipeline::train::batch_loss(model, &batch, tau, RoutingMode::EvalSoft, 128)?;
            nll_sum += f64::from(loss.item()) * seq_len as f64;
            positions += seq_len;
        }
        let mean_nll = nll_sum / positions as f64;
        domains.push(DomainPerplexity {
            domain: name.clone(),
            sequences: n_seqs,
            mean_nll,
            perplexity: mean_nll.exp(),
            bits_per_token: mean_nll / std::f64::consts::LN_2,
        });
    }
    Ok(PerplexityReport { domains })
}

/// Builds single-document eval batches from a stream (helper for the CLI and
/// diagnostics).
pub fn eval_batches(
    stream: &TokenStream,
    n_batches: usize,
    batch: usize,
    seq_len: usize,
) -> Result<Vec<Batch>, PipelineError> {
    use crate::pipeline::load_batch;
    let mut out = Vec::with_capacity(n_batches);
    let mut cursor = 0usize;
    for _ in 0..n_batches {
        let (b, next) = load_batch(stream, batch, seq_len, cursor)?;
        cursor = next;
        out.push(b);
    }
    Ok(out)
}

/// Convenience: a uniform-content batch for smoke diagnostics on fresh models.
pub fn probe_batch(vocab: usize, batch: usize, seq_len: usize) -> Batch {
    let tokens: Vec<u32> = (0..batch * seq_len)
        .map(|i| (i * 31 + 7) as u32 % vocab as u32)
        .collect();
    let targets: Vec<u32> = tokens.iter().skip(1).copied().chain([0]).collect();
    Batch {
        batch,
        seq_len,
        tokens,
        targets,
        masks: vec![AttentionMask::single_doc(seq_len); batch],
        loss_mask: vec![true; batch * seq_len],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn fresh_desk_like() -> Model<f32> {
        let mut cfg = ModelConfig::tiny();
        cfg.d_ff = 16;
        build_model(&cfg, 21).unwrap()
    }

    #[test]
    fn fresh_model_entropy_is_ln4() {
        let model = fresh_desk_like();
        let batches = vec![probe_batch(model.cfg.vocab_size, 2, 6)];
        let report = dynamic_entropy(&model, &batches, 0.1).unwrap();
        for layer in &report.layers {
            assert!(
                (layer.mean_raw - max_entropy()).abs() <= 1e-3,
                "raw {}",
                layer.mean_raw
            );
            assert!(
                (layer.mean_scaled - max_entropy()).abs() <= 1e-3,
                "scaled {}",
                layer.mean_scaled
            );
        }
        assert!(
            (report.network_mean_scaled - report.network_mean_scaled_batch_first).abs() <= 1e-12,
            "equal-sized batches: both averaging orders agree"
        );
    }

    #[test]
    fn committed_alpha_rows_have_negligible_entropy() {
        let model = fresh_desk_like();
        for block in &model.blocks {
            let mut alpha = block.routing.alpha.leaf_data_mut();
            for j in 0..16 {
                alpha[j * 4] = 100.0;
            }
        }
        // β = 0 isolates the static pathway
        for block in &model.blocks {
            let mut beta = block.routing.beta.leaf_data_mut();
            beta.fill(0.0);
        }
        let batches = vec![probe_batch(model.cfg.vocab_size, 1, 6)];
        let report = dynamic_entropy(&model, &batches, 1.0).unwrap();
        for layer in &report.layers {
            assert!(layer.mean_raw <= 1e-40, "entropy {}", layer.mean_raw);
        }
    }

    #[test]
    fn entropy_fraction_formats_three_decimals() {
        assert_eq!(format_entropy_fraction(4.1e-4), "0.030%");
        assert_eq!(format_entropy_fraction(max_entropy()), "100.000%");
    }

    #[test]
    fn empty_eval_set_is_an_error() {
        let model = fresh_desk_like();
        assert!(dynamic_entropy(&model, &[], 0.1).is_err());
    }

    #[test]
    fn histogram_all_zero_alpha_spikes_at_max() {
        let model = fresh_desk_like();
        let hist = static_entropy_histogram(&model, 10);
        let total: usize = hist.counts.iter().sum();
        assert_eq!(total, model.cfg.n_layers * model.cfg.d_ff);
        assert_eq!(hist.counts[9], total, "all mass in the top bin");
    }

    #[test]
    fn histogram_committed_neuron_lands_in_lowest_bin() {
        let model = fresh_desk_like();
        {
            let mut alpha = model.blocks[0].routing.alpha.leaf_data_mut();
            alpha[0] = 5.0; // neuron 0 row becomes [5, 0, 0, 0]
        }
        // oracle: H(softmax([5,0,0,0])) computed here from first principles
        let h = softmax_entropy(&[5.0, 0.0, 0.0, 0.0], 1.0);
        assert!((h - 0.119_078_940_092).abs() < 1e-6, "oracle value {h}");
        let hist = static_entropy_histogram(&model, 10);
        assert_eq!(hist.counts[0], 1);
        let total: usize = hist.counts.iter().sum();
        assert_eq!(total, model.cfg.n_layers * model.cfg.d_ff);
    }

    #[test]
    fn heatmap_argmax_and_ties() {
        let model = fresh_desk_like();
        let map = static_heatmap(&model);
        assert_eq!(map.len(), model.cfg.n_layers);
        // all-zero alpha ties break to the lowest index
        for row in &map {
            assert!(row.iter().all(|&id| id == ActivationId::Relu));
        }
        {
            let mut alpha = model.blocks[1].routing.alpha.leaf_data_mut();
            for j in 0..model.cfg.d_ff {
                alpha[j * 4 + 1] = 3.0;
            }
        }
        let map = static_heatmap(&model);
        assert!(map[1].iter().all(|&id| id == ActivationId::Tanh));
        // argmax is shift-invariant
        {
            let mut alpha = model.blocks[1].routing.alpha.leaf_data_mut();
            for v in alpha.iter_mut() {
                *v += 7.0;
            }
        }
        assert_eq!(map, static_heatmap(&model));
    }

    #[test]
    fn layer_distribution_shares() {
        let map = vec![
            vec![ActivationId::Tanh; 6],
            vec![
                ActivationId::Relu,
                ActivationId::Relu,
                ActivationId::Silu,
                ActivationId::Gelu,
                ActivationId::Gelu,
                ActivationId::Gelu,
            ],
        ];
        let dist = layer_distribution(&map);
        assert_eq!(dist[0], [0.0, 100.0, 0.0, 0.0]);
        let row = dist[1];
        assert!((row[0] - 100.0 * 2.0 / 6.0).abs() < 1e-9);
        assert!((row[2] - 100.0 / 6.0).abs() < 1e-9);
        assert!((row[3] - 50.0).abs() < 1e-9);
        for row in dist {
            let sum: f64 = row.iter().sum();
            assert!((sum - 100.0).abs() <= 0.01);
        }
    }

    #[test]
    fn perplexity_of_uniform_model_is_vocab_size() {
        // zero weights everywhere: logits are exactly uniform
        let cfg = ModelConfig::tiny();
        let model = build_model::<f32>(&cfg, 1).unwrap();
        {
            let mut e = model.embedding.leaf_data_mut();
            e.fill(0.0);
        }
        let tokens: Vec<u32> = (0..40u32).map(|i| i % 12).chain([12]).collect();
        let stream = TokenStream::from_tokens(tokens, 12).unwrap();
        let report = domain_perplexity(&model, &[("uniform".into(), stream)], 2, 8, 0.1).unwrap();
        let d = &report.domains[0];
        assert!(
            (d.perplexity - cfg.vocab_size as f64).abs() < 1e-2,
            "ppl {}",
            d.perplexity
        );
        assert!((d.bits_per_token - d.perplexity.log2()).abs() <= 1e-9);
    }

    #[test]
    fn bits_per_token_matches_reference_pairs() {
        for (ppl, bits) in [(3.56, 1.83), (7.08, 2.82), (31.93, 5.00)] {
            let nll = f64::ln(ppl);
            let computed_bits = nll / std::f64::consts::LN_2;
            assert!(
                (computed_bits - bits).abs() <= 0.01,
                "{ppl} -> {computed_bits} vs {bits}"
            );
        }
    }

    #[test]
    fn uniform_random_argmax_shares_are_near_quarter() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(29);
        let row: Vec<ActivationId> = (0..4096)
            .map(|_| ActivationId::from_index(rng.gen_range(0..4)).unwrap())
            .collect();
        let dist = layer_distribution(&[row]);
        for share in dist[0] {
            assert!((share - 25.0).abs() <= 3.0, "share {share}");
        }
    }

    #[test]
    fn reported_entropies_stay_in_bounds() {
        use rand::prelude::*;
        let model = fresh_desk_like();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(33);
        for block in &model.blocks {
            let mut alpha = block.routing.alpha.leaf_data_mut();
            for v in alpha.iter_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
        }
        let batches = vec![probe_batch(model.cfg.vocab_size, 2, 6)];
        for tau in [0.1, 1.0] {
            let report = dynamic_entropy(&model, &batches, tau).unwrap();
            for layer in &report.layers {
                for h in [
                    layer.mean_raw,
                    layer.mean_scaled,
                    layer.max_raw,
                    layer.max_scaled,
                ] {
                    assert!((0.0..=max_entropy() + 1e-12).contains(&h), "{h}");
                }
            }
        }
        for h in static_entropy_by_layer(&model) {
            assert!((0.0..=max_entropy() + 1e-12).contains(&h));
        }
    }

    #[test]
    fn scaling_alpha_never_increases_static_entropy() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(31);
        for _ in 0..200 {
            let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c = rng.gen_range(1.0..5.0);
            let scaled: Vec<f64> = row.iter().map(|&v| v * c).collect();
            let h1 = softmax_entropy(&row, 1.0);
            let h2 = softmax_entropy(&scaled, 1.0);
            assert!(h2 <= h1 + 1e-12, "sharpening violated: {h1} -> {h2}");
        }
    }
}
