//! Straight-line f64 reference implementations, written with plain nested
//! loops over flat vectors. They share no code with the tensor machinery and
//! serve as the independent oracle the graph implementation is checked
//! against.

use polychromatic::layers::AttentionMask;
use polychromatic::model::{Model, ModelConfig, RMS_EPS};

pub struct NaiveLayer {
    pub attn_norm: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub q_norm: Vec<f64>,
    pub k_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub w_gate: Vec<f64>,
    pub w_up: Vec<f64>,
    pub w_down: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gate_w1: Vec<f64>,
    pub gate_b1: Vec<f64>,
    pub gate_w2: Vec<f64>,
    pub gate_b2: Vec<f64>,
}

pub struct NaiveWeights {
    pub cfg: ModelConfig,
    pub embedding: Vec<f64>,
    pub layers: Vec<NaiveLayer>,
    pub final_norm: Vec<f64>,
}

pub fn extract_weights(model: &Model<f64>) -> NaiveWeights {
    NaiveWeights {
        cfg: model.cfg.clone(),
        embedding: model.embedding.to_vec(),
        layers: model
            .blocks
            .iter()
            .map(|b| NaiveLayer {
                attn_norm: b.attn_norm.to_vec(),
                wq: b.attn.wq.to_vec(),
                wk: b.attn.wk.to_vec(),
                wv: b.attn.wv.to_vec(),
                wo: b.attn.wo.to_vec(),
                q_norm: b.attn.q_norm.to_vec(),
                k_norm: b.attn.k_norm.to_vec(),
                ffn_norm: b.ffn_norm.to_vec(),
                w_gate: b.w_gate.to_vec(),
                w_up: b.w_up.to_vec(),
                w_down: b.w_down.to_vec(),
                alpha: b.routing.alpha.to_vec(),
                beta: b.routing.beta.to_vec(),
                gate_w1: b.routing.gate_w1.to_vec(),
                gate_b1: b.routing.gate_b1.to_vec(),
                gate_w2: b.routing.gate_w2.to_vec(),
                gate_b2: b.routing.gate_b2.to_vec(),
            })
            .collect(),
        final_norm: model.final_norm.to_vec(),
    }
}

fn rmsnorm_row(row: &[f64], weight: &[f64], out: &mut [f64]) {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for i in 0..row.len() {
        out[i] = row[i] * inv * weight[i];
    }
}

/// out[r][..] = row · mat, mat is [rows(m), cols] row-major, row has len m.
fn vec_mat(row: &[f64], mat: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (t, &r) in row.iter().enumerate() {
        for c in 0..cols {
            out[c] += r * mat[t * cols + c];
        }
    }
    out
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + libm::erf(z / 2.0_f64.sqrt()))
}

fn palette(k: usize, z: f64) -> f64 {
    match k {
        0 => z.max(0.0),
        1 => z.tanh(),
        2 => silu(z),
        3 => gelu(z),
        _ => unreachable!(),
    }
}

/// QK-normed, rotary-positioned grouped-query attention for one sequence.
/// `x` is seq × d_model flat; returns the same shape.
pub fn naive_attention(
    w: &NaiveLayer,
    cfg: &ModelConfig,
    x: &[f64],
    seq: usize,
    mask: &AttentionMask,
) -> Vec<f64> {
    let d = cfg.d_model;
    let hd = cfg.head_dim;
    let n_q = cfg.n_q_heads;
    let n_kv = cfg.n_kv_heads;
    let group = n_q / n_kv;
    let q_dim = n_q * hd;
    let kv_dim = n_kv * hd;

    let mut q = vec![0.0; seq * q_dim];
    let mut k = vec![0.0; seq * kv_dim];
    let mut v = vec![0.0; seq * kv_dim];
    for t in 0..seq {
        q[t * q_dim..(t + 1) * q_dim].copy_from_slice(&vec_mat(
            &x[t * d..(t + 1) * d],
            &w.wq,
            q_dim,
        ));
        k[t * kv_dim..(t + 1) * kv_dim].copy_from_slice(&vec_mat(
            &x[t * d..(t + 1) * d],
            &w.wk,
            kv_dim,
        ));
        v[t * kv_dim..(t + 1) * kv_dim].copy_from_slice(&vec_mat(
            &x[t * d..(t + 1) * d],
            &w.wv,
            kv_dim,
        ));
    }

    // QK-Norm per head, then rotation by position-dependent pair angles.
    let rotate = |buf: &mut [f64], heads: usize, norm_w: &[f64]| {
        for t in 0..seq {
            for h in 0..heads {
                let base = t * heads * hd + h * hd;
                let head_slice = buf[base..base + hd].to_vec();
                let mut normed = vec![0.0; hd];
                rmsnorm_row(&head_slice, norm_w, &mut normed);
                for p in 0..hd / 2 {
                    let angle = t as f64 * cfg.rope_theta.powf(-2.0 * p as f64 / hd as f64);
                    let (sin, cos) = angle.sin_cos();
                    let x0 = normed[2 * p];
                    let x1 = normed[2 * p + 1];
                    buf[base + 2 * p] = x0 * cos - x1 * sin;
                    buf[base + 2 * p + 1] = x0 * sin + x1 * cos;
                }
            }
        }
    };
    rotate(&mut q, n_q, &w.q_norm);
    rotate(&mut k, n_kv, &w.k_norm);

    let scale = 1.0 / (hd as f64).sqrt();
    let mut merged = vec![0.0; seq * q_dim];
    for h in 0..n_q {
        let g = h / group;
        for t in 0..seq {
            let mut scores = vec![0.0; seq];
            for u in 0..seq {
                let mut dot = 0.0;
                for c in 0..hd {
                    dot += q[t * q_dim + h * hd + c] * k[u * kv_dim + g * hd + c];
                }
                scores[u] = dot * scale + if mask.allows(t, u) { 0.0 } else { -1e30 };
            }
            softmax_row(&mut scores);
            for c in 0..hd {
                let mut acc = 0.0;
                for u in 0..seq {
                    acc += scores[u] * v[u * kv_dim + g * hd + c];
                }
                merged[t * q_dim + h * hd + c] = acc;
            }
        }
    }

    let mut out = vec![0.0; seq * d];
    for t in 0..seq {
        out[t * d..(t + 1) * d].copy_from_slice(&vec_mat(
            &merged[t * q_dim..(t + 1) * q_dim],
            &w.wo,
            d,
        ));
    }
    out
}

/// Full forward for one sequence with deterministic soft routing; returns
/// seq × vocab logits, flat.
pub fn naive_forward(w: &NaiveWeights, tokens: &[u32], mask: &AttentionMask, tau: f64) -> Vec<f64> {
    let cfg = &w.cfg;
    let d = cfg.d_model;
    let seq = tokens.len();
    let n_layers = cfg.n_layers;
    let residual_scale = 1.0 / (2.0 * n_layers as f64).sqrt();

    let mut x = vec![0.0; seq * d];
    for (t, &tok) in tokens.iter().enumerate() {
        x[t * d..(t + 1) * d]
            .copy_from_slice(&w.embedding[tok as usize * d..(tok as usize + 1) * d]);
    }

    for layer in &w.layers {
        // attention branch
        let mut normed = vec![0.0; seq * d];
        for t in 0..seq {
            let row = x[t * d..(t + 1) * d].to_vec();
            rmsnorm_row(&row, &layer.attn_norm, &mut normed[t * d..(t + 1) * d]);
        }
        let attn_out = naive_attention(layer, cfg, &normed, seq, mask);
        for i in 0..seq * d {
            x[i] += attn_out[i] * residual_scale;
        }

        // routed feed-forward branch
        let mut normed = vec![0.0; seq * d];
        for t in 0..seq {
            let row = x[t * d..(t + 1) * d].to_vec();
            rmsnorm_row(&row, &layer.ffn_norm, &mut normed[t * d..(t + 1) * d]);
        }
        let logits = naive_routing_logits(layer, cfg, &normed, seq);
        let d_ff = cfg.d_ff;
        let mut gates = vec![0.0; d_ff * 4];
        for j in 0..d_ff {
            let mut lane = [0.0; 4];
            for kk in 0..4 {
                lane[kk] = logits[j * 4 + kk] / tau;
            }
            softmax_row(&mut lane);
            gates[j * 4..(j + 1) * 4].copy_from_slice(&lane);
        }
        for t in 0..seq {
            let row = &normed[t * d..(t + 1) * d];
            let z = vec_mat(row, &layer.w_gate, d_ff);
            let up = vec_mat(row, &layer.w_up, d_ff);
            let mut h = vec![0.0; d_ff];
            for j in 0..d_ff {
                let mut mix = 0.0;
                for kk in 0..4 {
                    mix += gates[j * 4 + kk] * palette(kk, z[j]);
                }
                h[j] = mix * up[j];
            }
            let ffn_out = vec_mat(&h, &layer.w_down, d);
            for c in 0..d {
                x[t * d + c] += ffn_out[c] * residual_scale;
            }
        }
    }

    let mut logits = vec![0.0; seq * cfg.vocab_size];
    let mut final_row = vec![0.0; d];
    for t in 0..seq {
        let row = x[t * d..(t + 1) * d].to_vec();
        rmsnorm_row(&row, &w.final_norm, &mut final_row);
        for v in 0..cfg.vocab_size {
            let mut dot = 0.0;
            for c in 0..d {
                dot += final_row[c] * w.embedding[v * d + c];
            }
            logits[t * cfg.vocab_size + v] = dot;
        }
    }
    logits
}

/// Combined routing logits for one sequence's FFN input: α + β ⊙ f(mean(x)).
pub fn naive_routing_logits(
    layer: &NaiveLayer,
    cfg: &ModelConfig,
    normed: &[f64],
    seq: usize,
) -> Vec<f64> {
    let d = cfg.d_model;
    let d_ff = cfg.d_ff;
    let gh = cfg.gate_hidden;
    let mut h_bar = vec![0.0; d];
    for t in 0..seq {
        for c in 0..d {
            h_bar[c] += normed[t * d + c];
        }
    }
    for c in h_bar.iter_mut() {
        *c /= seq as f64;
    }
    let mut hidden = vec![0.0; gh];
    for (i, h) in hidden.iter_mut().enumerate() {
        let mut acc = layer.gate_b1[i];
        for c in 0..d {
            acc += layer.gate_w1[i * d + c] * h_bar[c];
        }
        *h = acc.max(0.0);
    }
    let mut f = [0.0; 4];
    for (kk, f_k) in f.iter_mut().enumerate() {
        let mut acc = layer.gate_b2[kk];
        for (i, &h) in hidden.iter().enumerate() {
            acc += layer.gate_w2[kk * gh + i] * h;
        }
        *f_k = acc;
    }
    let mut logits = vec![0.0; d_ff * 4];
    for j in 0..d_ff {
        for kk in 0..4 {
            logits[j * 4 + kk] = layer.alpha[j * 4 + kk] + layer.beta[kk] * f[kk];
        }
    }
    logits
}
