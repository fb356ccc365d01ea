//! Registered finite-difference checks, runnable from the CLI and the
//! acceptance tests. Everything runs in double precision.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::layers::{gqa_attention, rmsnorm, AttentionConfig, AttentionMask, AttentionWeights};
use crate::model::{build_model, ModelConfig};
use crate::pipeline::chunked_cross_entropy;
use crate::polyglu::{
    activation, gate_forward, gumbel_softmax, polyglu_forward, routing_logits, ActivationId,
    RoutingMode, RoutingState,
};
use crate::tensor::{grad_check, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOLERANCE
    }
}

fn rand_vec(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Runs every registered check; results carry the worst relative error each.
pub fn gradient_suite() -> Vec<GradCheckResult> {
    let mut results = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(0xC0FFEE);
    let push = |name: &str, err: f64, results: &mut Vec<GradCheckResult>| {
        results.push(GradCheckResult {
            name: name.to_string(),
            max_rel_err: err,
        });
    };

    // palette activations (inputs kept away from the ReLU kink)
    for k in ActivationId::ALL {
        let data: Vec<f64> = rand_vec(&mut rng, 8, 2.0)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let x = Tensor::param(vec![8], data).unwrap();
        let err = grad_check(|| activation(k, &x).unwrap().sum_all().unwrap(), &x, EPS);
        push(&format!("activation/{}", k.name()), err, &mut results);
    }

    // rmsnorm w.r.t. input and weight
    {
        let x = Tensor::param(vec![3, 6], rand_vec(&mut rng, 18, 1.5)).unwrap();
        let w = Tensor::param(vec![6], rand_vec(&mut rng, 6, 1.0)).unwrap();
        let probe = Tensor::from_vec(vec![3, 6], rand_vec(&mut rng, 18, 1.0)).unwrap();
        let f = || {
            rmsnorm(&x, &w, 1e-6)
                .unwrap()
                .mul(&probe)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        push("rmsnorm/input", grad_check(&f, &x, EPS), &mut results);
        push("rmsnorm/weight", grad_check(&f, &w, EPS), &mut results);
    }

    // attention block with QK-Norm and rotary embeddings
    {
        let cfg = AttentionConfig {
            d_model: 8,
            n_q_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            rope_theta: 10_000.0,
        };
        let w = AttentionWeights {
            wq: Tensor::param(vec![8, 8], rand_vec(&mut rng, 64, 0.6)).unwrap(),
            wk: Tensor::param(vec![8, 4], rand_vec(&mut rng, 32, 0.6)).unwrap(),
            wv: Tensor::param(vec![8, 4], rand_vec(&mut rng, 32, 0.6)).unwrap(),
            wo: Tensor::param(vec![8, 8], rand_vec(&mut rng, 64, 0.6)).unwrap(),
            q_norm: Tensor::param(vec![4], vec![1.0; 4]).unwrap(),
            k_norm: Tensor::param(vec![4], vec![1.0; 4]).unwrap(),
        };
        let x = Tensor::param(vec![5, 8], rand_vec(&mut rng, 40, 1.0)).unwrap();
        let mask = AttentionMask::new(vec![0, 3], 5).unwrap();
        let f = || {
            gqa_attention(&x, &w, &mask, &cfg, 1e-6)
                .unwrap()
                .tanh()
                .sum_all()
                .unwrap()
        };
        push("attention/input", grad_check(&f, &x, EPS), &mut results);
        push("attention/wq", grad_check(&f, &w.wq, EPS), &mut results);
        push("attention/wk", grad_check(&f, &w.wk, EPS), &mut results);
        push("attention/wv", grad_check(&f, &w.wv, EPS), &mut results);
        push("attention/wo", grad_check(&f, &w.wo, EPS), &mut results);
        push(
            "attention/q_norm",
            grad_check(&f, &w.q_norm, EPS),
            &mut results,
        );
        push(
            "attention/k_norm",
            grad_check(&f, &w.k_norm, EPS),
            &mut results,
        );
    }

    // gate MLP, combined routing logits, soft relaxation, full routed FFN
    {
        let (d_model, d_ff) = (6, 5);
        let mut rs = RoutingState::<f64>::init(d_model, d_ff, 0.5, &mut rng);
        rs.alpha = Tensor::param(vec![d_ff, 4], rand_vec(&mut rng, d_ff * 4, 0.5)).unwrap();
        let h_bar = Tensor::from_vec(vec![2, d_model], rand_vec(&mut rng, 12, 1.0)).unwrap();
        let gate_probe = Tensor::from_vec(vec![2, 4], rand_vec(&mut rng, 8, 1.0)).unwrap();
        let f = || {
            gate_forward(&h_bar, &rs)
                .unwrap()
                .mul(&gate_probe)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        push(
            "gate_mlp/w1",
            grad_check(&f, &rs.gate_w1, EPS),
            &mut results,
        );
        push(
            "gate_mlp/b1",
            grad_check(&f, &rs.gate_b1, EPS),
            &mut results,
        );
        push(
            "gate_mlp/w2",
            grad_check(&f, &rs.gate_w2, EPS),
            &mut results,
        );
        push(
            "gate_mlp/b2",
            grad_check(&f, &rs.gate_b2, EPS),
            &mut results,
        );

        let logits_probe =
            Tensor::from_vec(vec![2, d_ff, 4], rand_vec(&mut rng, 2 * d_ff * 4, 1.0)).unwrap();
        let f = || {
            routing_logits(&h_bar, &rs)
                .unwrap()
                .mul(&logits_probe)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        push(
            "routing_logits/alpha",
            grad_check(&f, &rs.alpha, EPS),
            &mut results,
        );
        push(
            "routing_logits/beta",
            grad_check(&f, &rs.beta, EPS),
            &mut results,
        );

        let raw = Tensor::param(vec![d_ff, 4], rand_vec(&mut rng, d_ff * 4, 1.0)).unwrap();
        let gumbel_probe =
            Tensor::from_vec(vec![d_ff, 4], rand_vec(&mut rng, d_ff * 4, 1.0)).unwrap();
        let f = || {
            gumbel_softmax(&raw, 0.7, RoutingMode::EvalSoft)
                .unwrap()
                .mul(&gumbel_probe)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        push(
            "gumbel_softmax/eval_soft",
            grad_check(&f, &raw, EPS),
            &mut results,
        );

        let w_gate =
            Tensor::param(vec![d_model, d_ff], rand_vec(&mut rng, d_model * d_ff, 0.6)).unwrap();
        let w_up =
            Tensor::param(vec![d_model, d_ff], rand_vec(&mut rng, d_model * d_ff, 0.6)).unwrap();
        let w_down =
            Tensor::param(vec![d_ff, d_model], rand_vec(&mut rng, d_ff * d_model, 0.6)).unwrap();
        let x = Tensor::param(vec![1, 3, d_model], rand_vec(&mut rng, 18, 1.0)).unwrap();
        let f = || {
            polyglu_forward(&x, &w_gate, &w_up, &w_down, &rs, 0.7, RoutingMode::EvalSoft)
                .unwrap()
                .tanh()
                .sum_all()
                .unwrap()
        };
        for (name, t) in [
            ("x", &x),
            ("alpha", &rs.alpha),
            ("beta", &rs.beta),
            ("gate_w1", &rs.gate_w1),
            ("gate_b1", &rs.gate_b1),
            ("gate_w2", &rs.gate_w2),
            ("gate_b2", &rs.gate_b2),
            ("w_gate", &w_gate),
            ("w_up", &w_up),
            ("w_down", &w_down),
        ] {
            push(
                &format!("polyglu/{name}"),
                grad_check(&f, t, EPS),
                &mut results,
            );
        }
    }

    // full two-layer transformer: loss w.r.t. every parameter
    {
        let cfg = ModelConfig::tiny();
        let model = build_model::<f64>(&cfg, 0xAB).unwrap();
        // move alpha off its zero saddle so its gradients are informative
        for block in &model.blocks {
            let n = block.routing.alpha.numel();
            let vals = rand_vec(&mut rng, n, 0.5);
            block.routing.alpha.leaf_data_mut().copy_from_slice(&vals);
        }
        let tokens: Vec<u32> = vec![1, 7, 3, 11, 5, 2];
        let targets: Vec<u32> = vec![7, 3, 11, 5, 2, 9];
        let masks = [AttentionMask::new(vec![0, 4], 6).unwrap()];
        let loss_mask = vec![true; 6];
        let f = || {
            let hidden = model
                .hidden_states(&tokens, 1, 6, &masks, 0.7, RoutingMode::EvalSoft)
                .unwrap();
            let flat = hidden.reshape(vec![6, cfg.d_model]).unwrap();
            chunked_cross_entropy(&flat, model.head(), &targets, &loss_mask, 4).unwrap()
        };
        for p in model.params() {
            push(
                &format!("transformer/{}", p.name),
                grad_check(&f, &p.tensor, EPS),
                &mut results,
            );
        }
    }

    results
}
