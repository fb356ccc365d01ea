//! Activation-routing feed-forward layer.
//!
//! Each FFN neuron mixes four candidate activations through routing weights
//! computed from a learned per-neuron preference plus an input-conditioned
//! gate, relaxed to a differentiable choice with Gumbel-Softmax and a
//! linearly annealed temperature.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError, TensorResult};

/// Number of candidate activations in the palette.
pub const PALETTE_SIZE: usize = 4;

/// Hidden width of the routing gate MLP.
pub const GATE_HIDDEN: usize = 32;

#[derive(Debug, Error)]
pub enum PolyGluError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("schedule requires t_total > 0")]
    EmptySchedule,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The four-member activation palette, index order fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ActivationId {
    Relu = 0,
    Tanh = 1,
    Silu = 2,
    Gelu = 3,
}

impl ActivationId {
    pub const ALL: [ActivationId; PALETTE_SIZE] = [
        ActivationId::Relu,
        ActivationId::Tanh,
        ActivationId::Silu,
        ActivationId::Gelu,
    ];

    pub fn from_index(index: usize) -> Option<ActivationId> {
        Self::ALL.get(index).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationId::Relu => "relu",
            ActivationId::Tanh => "tanh",
            ActivationId::Silu => "silu",
            ActivationId::Gelu => "gelu",
        }
    }
}

/// σ_k(z). GELU uses the exact erf form, not the tanh approximation.
pub fn activation<T: Scalar>(k: ActivationId, z: &Tensor<T>) -> TensorResult<T> {
    match k {
        ActivationId::Relu => Ok(z.relu()),
        ActivationId::Tanh => Ok(z.tanh()),
        ActivationId::Silu => z.mul(&z.sigmoid()),
        ActivationId::Gelu => {
            let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
            let phi = z
                .mul_scalar(inv_sqrt2)
                .erf()
                .add_scalar(T::one())
                .mul_scalar(T::from_f64(0.5));
            z.mul(&phi)
        }
    }
}

/// Linear temperature annealing: τ(t) = max(floor, start − slope·t/t_total).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauSchedule {
    pub t_total: usize,
    pub floor: f64,
    pub start: f64,
    pub slope: f64,
}

impl TauSchedule {
    pub fn new(t_total: usize) -> Result<Self, PolyGluError> {
        if t_total == 0 {
            return Err(PolyGluError::EmptySchedule);
        }
        Ok(TauSchedule {
            t_total,
            floor: 0.1,
            start: 1.0,
            slope: 0.9,
        })
    }

    pub fn tau(&self, t: usize) -> f64 {
        (self.start - self.slope * t as f64 / self.t_total as f64).max(self.floor)
    }

    /// Constant temperature (fine-tuning freezes τ at the floor).
    pub fn frozen(tau: f64) -> Self {
        TauSchedule {
            t_total: 1,
            floor: tau,
            start: tau,
            slope: 0.0,
        }
    }
}

/// How routing weights are produced from logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Gumbel noise added to the logits, softmax at temperature τ. The seed
    /// is mandatory: noise is i.i.d. per (batch element, neuron, k) and must
    /// be reproducible.
    TrainSample { seed: u64 },
    /// Deterministic softmax of ℓ/τ, no noise. Default at evaluation.
    EvalSoft,
    /// One-hot at argmax ℓ, ties to the lowest index. Detached from the graph.
    EvalHard,
}

/// Per-layer routing parameters: static per-neuron preferences, per-activation
/// scales for the dynamic signal, and the gate MLP.
pub struct RoutingState<T: Scalar> {
    /// [d_ff, K], initialized to zero (uniform prior)
    pub alpha: Tensor<T>,
    /// [K], initialized to ones
    pub beta: Tensor<T>,
    /// [GATE_HIDDEN, d_model]
    pub gate_w1: Tensor<T>,
    /// [GATE_HIDDEN]
    pub gate_b1: Tensor<T>,
    /// [K, GATE_HIDDEN]
    pub gate_w2: Tensor<T>,
    /// [K]
    pub gate_b2: Tensor<T>,
}

impl<T: Scalar> RoutingState<T> {
    /// Fresh state: α = 0, β = 1, gate weights ~ N(0, std), gate biases = 0.
    pub fn init(d_model: usize, d_ff: usize, std: f64, rng: &mut ChaCha20Rng) -> Self {
        let normal = |rng: &mut ChaCha20Rng, n: usize| -> Vec<T> {
            use rand_distr::Distribution;
            let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
        };
        let k = PALETTE_SIZE;
        let h = GATE_HIDDEN;
        RoutingState {
            alpha: Tensor::param(vec![d_ff, k], vec![T::zero(); d_ff * k]).expect("alpha"),
            beta: Tensor::param(vec![k], vec![T::one(); k]).expect("beta"),
            gate_w1: Tensor::param(vec![h, d_model], normal(rng, h * d_model)).expect("gate_w1"),
            gate_b1: Tensor::param(vec![h], vec![T::zero(); h]).expect("gate_b1"),
            gate_w2: Tensor::param(vec![k, h], normal(rng, k * h)).expect("gate_w2"),
            gate_b2: Tensor::param(vec![k], vec![T::zero(); k]).expect("gate_b2"),
        }
    }

    pub fn d_ff(&self) -> usize {
        self.alpha.shape()[0]
    }
}

/// Gate MLP over the mean-pooled hidden state: W₂·ReLU(W₁h̄ + b₁) + b₂.
pub fn gate_forward<T: Scalar>(h_bar: &Tensor<T>, rs: &RoutingState<T>) -> TensorResult<T> {
    let hidden = h_bar
        .matmul(&rs.gate_w1.transpose()?)?
        .add(&rs.gate_b1)?
        .relu();
    hidden.matmul(&rs.gate_w2.transpose()?)?.add(&rs.gate_b2)
}

/// Combined routing logits ℓ[b,j,k] = α[j,k] + β[k]·f(h̄)[b,k]; the dynamic
/// term broadcasts over neurons.
pub fn routing_logits<T: Scalar>(h_bar: &Tensor<T>, rs: &RoutingState<T>) -> TensorResult<T> {
    let batch = h_bar.shape()[0];
    let dynamic = gate_forward(h_bar, rs)?.mul(&rs.beta)?; // [batch, K]
    let dynamic = dynamic.reshape(vec![batch, 1, PALETTE_SIZE])?;
    rs.alpha.add(&dynamic)
}

/// Routing weights over the palette from logits [..., K].
pub fn gumbel_softmax<T: Scalar>(
    logits: &Tensor<T>,
    tau: f64,
    mode: RoutingMode,
) -> Result<Tensor<T>, PolyGluError> {
    if tau <= 0.0 {
        return Err(PolyGluError::NonPositiveTau(tau));
    }
    let last = logits.rank() - 1;
    let inv_tau = T::from_f64(1.0 / tau);
    match mode {
        RoutingMode::TrainSample { seed } => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let noise: Vec<T> = (0..logits.numel())
                .map(|_| {
                    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                    T::from_f64(-(-u.ln()).ln())
                })
                .collect();
            let noise = Tensor::from_vec(logits.shape().to_vec(), noise)?;
            Ok(logits.add(&noise)?.mul_scalar(inv_tau).softmax(last)?)
        }
        RoutingMode::EvalSoft => Ok(logits.mul_scalar(inv_tau).softmax(last)?),
        RoutingMode::EvalHard => {
            let (arg, _) = logits.argmax_axis(last)?;
            let k = logits.shape()[last];
            let mut data = vec![T::zero(); logits.numel()];
            for (lane, &a) in arg.iter().enumerate() {
                data[lane * k + a] = T::one();
            }
            Ok(Tensor::from_vec(logits.shape().to_vec(), data)?)
        }
    }
}

/// Routing weights for an input x [batch, seq, d_model]: mean-pool over the
/// sequence, combine logits, relax. The result [batch, d_ff, K] is constant
/// along the sequence axis by construction.
pub fn routing_gates<T: Scalar>(
    x: &Tensor<T>,
    rs: &RoutingState<T>,
    tau: f64,
    mode: RoutingMode,
) -> Result<Tensor<T>, PolyGluError> {
    let h_bar = x.mean_axis(1, false)?; // [batch, d_model]
    let logits = routing_logits(&h_bar, rs)?;
    gumbel_softmax(&logits, tau, mode)
}

fn project<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> TensorResult<T> {
    let (b, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let out_dim = w.shape()[1];
    x.reshape(vec![b * s, d])?
        .matmul(w)?
        .reshape(vec![b, s, out_dim])
}

/// Feed-forward layer with routed activations:
/// `[Σ_k g_k·σ_k(xW_gate)] ⊙ (xW_up)`, then `W_down`.
pub fn polyglu_forward<T: Scalar>(
    x: &Tensor<T>,
    w_gate: &Tensor<T>,
    w_up: &Tensor<T>,
    w_down: &Tensor<T>,
    rs: &RoutingState<T>,
    tau: f64,
    mode: RoutingMode,
) -> Result<Tensor<T>, PolyGluError> {
    let gates = routing_gates(x, rs, tau, mode)?; // [batch, d_ff, K]
    polyglu_forward_with_gates(x, w_gate, w_up, w_down, &gates)
}

/// Forward pass with externally supplied routing weights [batch, d_ff, K];
/// also used by equivalence tests that force one-hot routing.
pub fn polyglu_forward_with_gates<T: Scalar>(
    x: &Tensor<T>,
    w_gate: &Tensor<T>,
    w_up: &Tensor<T>,
    w_down: &Tensor<T>,
    gates: &Tensor<T>,
) -> Result<Tensor<T>, PolyGluError> {
    let batch = x.shape()[0];
    let d_ff = w_gate.shape()[1];
    let z = project(x, w_gate)?; // [b, s, d_ff]
    let up = project(x, w_up)?;

    let mut mixed: Option<Tensor<T>> = None;
    for k in ActivationId::ALL {
        let g_k = gates.select(2, k.index())?.reshape(vec![batch, 1, d_ff])?;
        let term = activation(k, &z)?.mul(&g_k)?;
        mixed = Some(match mixed {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let h = mixed.expect("non-empty palette").mul(&up)?;
    Ok(project(&h, w_down)?)
}

/// Baseline gated feed-forward: `[SiLU(xW_gate)] ⊙ (xW_up)`, then `W_down`.
pub fn swiglu_forward<T: Scalar>(
    x: &Tensor<T>,
    w_gate: &Tensor<T>,
    w_up: &Tensor<T>,
    w_down: &Tensor<T>,
) -> Result<Tensor<T>, PolyGluError> {
    let z = project(x, w_gate)?;
    let up = project(x, w_up)?;
    let h = activation(ActivationId::Silu, &z)?.mul(&up)?;
    Ok(project(&h, w_down)?)
}

/// Routing parameter overhead per layer:
/// α (d_ff·K) + β (K) + gate MLP (h·d_model + h + K·h + K).
pub fn routing_param_count(d_model: usize, d_ff: usize, k: usize, gate_hidden: usize) -> usize {
    d_ff * k + k + (gate_hidden * d_model + gate_hidden + k * gate_hidden + k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn rand_vec(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    fn entropy(p: &[f64]) -> f64 {
        p.iter()
            .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
            .sum()
    }

    #[test]
    fn palette_vanishes_at_zero() {
        let z = Tensor::scalar(0.0_f64);
        for k in ActivationId::ALL {
            assert_eq!(activation(k, &z).unwrap().item(), 0.0, "{:?}", k);
        }
    }

    #[test]
    fn palette_reference_values() {
        let at = |k: ActivationId, v: f64| activation(k, &Tensor::scalar(v)).unwrap().item();
        assert_eq!(at(ActivationId::Relu, -1.0), 0.0);
        assert!((at(ActivationId::Tanh, -1.0) - (-0.761_594_155_955_764_9)).abs() < 1e-12);
        assert!((at(ActivationId::Silu, 1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((at(ActivationId::Gelu, 1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn palette_gradients() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for k in ActivationId::ALL {
            let x = Tensor::param(vec![6], rand_vec(&mut rng, 6, 2.0)).unwrap();
            let err = grad_check(|| activation(k, &x).unwrap().sum_all().unwrap(), &x, 1e-5);
            assert!(err <= 1e-6, "{:?}: {err}", k);
        }
    }

    #[test]
    fn tau_endpoints_and_milestones() {
        let sched = TauSchedule::new(19_531).unwrap();
        assert!((sched.tau(0) - 1.0).abs() < 1e-12);
        assert!((sched.tau(19_531) - 0.1).abs() < 1e-12);
        assert!((sched.tau(5_000) - 0.77).abs() <= 0.01);
        assert!((sched.tau(15_000) - 0.31).abs() <= 0.01);
        assert!(matches!(
            TauSchedule::new(0),
            Err(PolyGluError::EmptySchedule)
        ));
    }

    #[test]
    fn tau_monotone_and_bounded() {
        let sched = TauSchedule::new(1000).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..2000 {
            let tau = sched.tau(t);
            assert!((0.1..=1.0).contains(&tau));
            assert!(tau <= prev);
            prev = tau;
        }
    }

    #[test]
    fn gate_forward_zero_weights_give_zero() {
        let rs = RoutingState::<f64> {
            alpha: Tensor::param(vec![8, 4], vec![0.0; 32]).unwrap(),
            beta: Tensor::param(vec![4], vec![0.0; 4]).unwrap(),
            gate_w1: Tensor::param(vec![GATE_HIDDEN, 6], vec![0.0; GATE_HIDDEN * 6]).unwrap(),
            gate_b1: Tensor::param(vec![GATE_HIDDEN], vec![0.0; GATE_HIDDEN]).unwrap(),
            gate_w2: Tensor::param(vec![4, GATE_HIDDEN], vec![0.0; 4 * GATE_HIDDEN]).unwrap(),
            gate_b2: Tensor::param(vec![4], vec![0.0; 4]).unwrap(),
        };
        let h = Tensor::from_vec(vec![2, 6], vec![1.0; 12]).unwrap();
        assert_eq!(gate_forward(&h, &rs).unwrap().to_vec(), vec![0.0; 8]);
    }

    #[test]
    fn gate_forward_is_deterministic_per_row() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let rs = RoutingState::<f64>::init(6, 8, 0.5, &mut rng);
        let row = rand_vec(&mut rng, 6, 1.0);
        let h = Tensor::from_vec(vec![2, 6], [row.clone(), row].concat()).unwrap();
        let out = gate_forward(&h, &rs).unwrap().to_vec();
        assert_eq!(&out[..4], &out[4..]);
    }

    #[test]
    fn gate_forward_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let rs = RoutingState::<f64>::init(6, 8, 0.5, &mut rng);
        let h = Tensor::from_vec(vec![2, 6], rand_vec(&mut rng, 12, 1.0)).unwrap();
        let probe = Tensor::from_vec(vec![2, 4], rand_vec(&mut rng, 8, 1.0)).unwrap();
        let f = || {
            gate_forward(&h, &rs)
                .unwrap()
                .mul(&probe)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        assert!(grad_check(f, &rs.gate_w1, 1e-5) <= 1e-6);
        assert!(grad_check(f, &rs.gate_b2, 1e-5) <= 1e-6);
    }

    #[test]
    fn routing_logits_pathways() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let d_model = 6;
        let d_ff = 5;
        let mut rs = RoutingState::<f64>::init(d_model, d_ff, 0.5, &mut rng);
        let h = Tensor::from_vec(vec![2, d_model], rand_vec(&mut rng, 12, 1.0)).unwrap();

        // β = 0: logits equal α broadcast over the batch.
        rs.beta = Tensor::param(vec![4], vec![0.0; 4]).unwrap();
        let alpha_vals = rand_vec(&mut rng, d_ff * 4, 1.0);
        rs.alpha = Tensor::param(vec![d_ff, 4], alpha_vals.clone()).unwrap();
        let logits = routing_logits(&h, &rs).unwrap();
        assert_eq!(logits.shape(), &[2, d_ff, 4]);
        let got = logits.to_vec();
        assert_eq!(&got[..d_ff * 4], alpha_vals.as_slice());
        assert_eq!(&got[d_ff * 4..], alpha_vals.as_slice());

        // α = 0, β = 1: logits constant across neurons.
        rs.alpha = Tensor::param(vec![d_ff, 4], vec![0.0; d_ff * 4]).unwrap();
        rs.beta = Tensor::param(vec![4], vec![1.0; 4]).unwrap();
        let got = routing_logits(&h, &rs).unwrap().to_vec();
        for b in 0..2 {
            let first = &got[b * d_ff * 4..b * d_ff * 4 + 4];
            for j in 1..d_ff {
                let row = &got[(b * d_ff + j) * 4..(b * d_ff + j) * 4 + 4];
                assert_eq!(row, first);
            }
        }
    }

    #[test]
    fn routing_logits_match_scalar_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (d_model, d_ff, batch) = (6, 5, 3);
        let rs = RoutingState::<f64>::init(d_model, d_ff, 0.5, &mut rng);
        let alpha = rand_vec(&mut rng, d_ff * 4, 1.0);
        let beta = rand_vec(&mut rng, 4, 1.0);
        let rs = RoutingState {
            alpha: Tensor::param(vec![d_ff, 4], alpha.clone()).unwrap(),
            beta: Tensor::param(vec![4], beta.clone()).unwrap(),
            ..rs
        };
        let h_data = rand_vec(&mut rng, batch * d_model, 1.0);
        let h = Tensor::from_vec(vec![batch, d_model], h_data.clone()).unwrap();

        let got = routing_logits(&h, &rs).unwrap().to_vec();

        // independent scalar-loop recomputation
        let w1 = rs.gate_w1.to_vec();
        let b1 = rs.gate_b1.to_vec();
        let w2 = rs.gate_w2.to_vec();
        let b2 = rs.gate_b2.to_vec();
        for b in 0..batch {
            let mut hidden = vec![0.0; GATE_HIDDEN];
            for (i, h_i) in hidden.iter_mut().enumerate() {
                let mut acc = b1[i];
                for d in 0..d_model {
                    acc += w1[i * d_model + d] * h_data[b * d_model + d];
                }
                *h_i = acc.max(0.0);
            }
            let mut f = vec![0.0; 4];
            for (k, f_k) in f.iter_mut().enumerate() {
                let mut acc = b2[k];
                for (i, &h_i) in hidden.iter().enumerate() {
                    acc += w2[k * GATE_HIDDEN + i] * h_i;
                }
                *f_k = acc;
            }
            for j in 0..d_ff {
                for k in 0..4 {
                    let expect = alpha[j * 4 + k] + beta[k] * f[k];
                    let idx = (b * d_ff + j) * 4 + k;
                    assert!(
                        (got[idx] - expect).abs() <= 1e-7,
                        "b={b} j={j} k={k}: {} vs {expect}",
                        got[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn gumbel_outputs_are_distributions_in_all_modes() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let logits = Tensor::from_vec(vec![3, 5, 4], rand_vec(&mut rng, 60, 2.0)).unwrap();
        for mode in [
            RoutingMode::TrainSample { seed: 1 },
            RoutingMode::EvalSoft,
            RoutingMode::EvalHard,
        ] {
            let g = gumbel_softmax(&logits, 0.7, mode).unwrap();
            let sums: Vec<f64> = g.sum_axis(2, false).unwrap().to_vec();
            for s in sums {
                assert!((s - 1.0).abs() <= 1e-9, "{mode:?}");
            }
            for v in g.to_vec() {
                assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn eval_soft_saturates_on_large_gap() {
        let logits = Tensor::from_vec(vec![4], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let g = gumbel_softmax(&logits, 0.1, RoutingMode::EvalSoft).unwrap();
        assert!(g.to_vec()[0] >= 1.0 - 1e-40);
    }

    #[test]
    fn eval_hard_breaks_ties_low() {
        let logits = Tensor::from_vec(vec![4], vec![2.0, 2.0, 2.0, 0.0]).unwrap();
        let g = gumbel_softmax(&logits, 1.0, RoutingMode::EvalHard).unwrap();
        assert_eq!(g.to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gumbel_rejects_bad_tau() {
        let logits = Tensor::<f64>::zeros(vec![4]);
        assert!(matches!(
            gumbel_softmax(&logits, 0.0, RoutingMode::EvalSoft),
            Err(PolyGluError::NonPositiveTau(_))
        ));
    }

    #[test]
    fn train_sample_is_symmetric_on_uniform_logits() {
        let logits = Tensor::<f64>::zeros(vec![10_000, 4]);
        let g = gumbel_softmax(&logits, 1.0, RoutingMode::TrainSample { seed: 99 }).unwrap();
        let means: Vec<f64> = g.mean_axis(0, false).unwrap().to_vec();
        for m in means {
            assert!((m - 0.25).abs() <= 0.02, "mean {m}");
        }
    }

    #[test]
    fn train_sample_same_seed_is_reproducible() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let logits = Tensor::from_vec(vec![2, 3, 4], rand_vec(&mut rng, 24, 1.0)).unwrap();
        let a = gumbel_softmax(&logits, 0.5, RoutingMode::TrainSample { seed: 7 }).unwrap();
        let b = gumbel_softmax(&logits, 0.5, RoutingMode::TrainSample { seed: 7 }).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        let c = gumbel_softmax(&logits, 0.5, RoutingMode::TrainSample { seed: 8 }).unwrap();
        assert_ne!(a.to_vec(), c.to_vec());
    }

    #[test]
    fn sharpening_and_hard_limit() {
        let logits = Tensor::from_vec(vec![4], vec![0.9, 0.3, -0.2, 0.0]).unwrap();
        let h_warm = entropy(
            &gumbel_softmax(&logits, 1.0, RoutingMode::EvalSoft)
                .unwrap()
                .to_vec(),
        );
        let h_cold = entropy(
            &gumbel_softmax(&logits, 0.1, RoutingMode::EvalSoft)
                .unwrap()
                .to_vec(),
        );
        assert!(h_cold < h_warm);

        // τ → 0 converges to the one-hot argmax once the top-2 gap ≥ 0.01.
        let tight = Tensor::from_vec(vec![4], vec![0.51, 0.5, 0.1, 0.0]).unwrap();
        let g = gumbel_softmax(&tight, 1e-3, RoutingMode::EvalSoft)
            .unwrap()
            .to_vec();
        assert!(g[0] >= 0.999);
        let hard = gumbel_softmax(&tight, 1e-3, RoutingMode::EvalHard)
            .unwrap()
            .to_vec();
        assert_eq!(hard, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_logits_have_maximum_entropy() {
        let logits = Tensor::<f64>::zeros(vec![4]);
        let g = gumbel_softmax(&logits, 1.0, RoutingMode::EvalSoft).unwrap();
        assert!((entropy(&g.to_vec()) - 4.0_f64.ln()).abs() <= 1e-12);
    }

    fn rand_ffn(
        rng: &mut ChaCha20Rng,
        d_model: usize,
        d_ff: usize,
    ) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            Tensor::param(vec![d_model, d_ff], rand_vec(rng, d_model * d_ff, 0.5)).unwrap(),
            Tensor::param(vec![d_model, d_ff], rand_vec(rng, d_model * d_ff, 0.5)).unwrap(),
            Tensor::param(vec![d_ff, d_model], rand_vec(rng, d_ff * d_model, 0.5)).unwrap(),
        )
    }

    #[test]
    fn forced_silu_one_hot_reduces_to_swiglu() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (d_model, d_ff) = (6, 5);
        let (w_gate, w_up, w_down) = rand_ffn(&mut rng, d_model, d_ff);
        for _ in 0..10 {
            let x = Tensor::from_vec(vec![2, 3, d_model], rand_vec(&mut rng, 36, 2.0)).unwrap();
            let mut one_hot = vec![0.0; 2 * d_ff * 4];
            for lane in 0..2 * d_ff {
                one_hot[lane * 4 + ActivationId::Silu.index()] = 1.0;
            }
            let gates = Tensor::from_vec(vec![2, d_ff, 4], one_hot).unwrap();
            let routed = polyglu_forward_with_gates(&x, &w_gate, &w_up, &w_down, &gates).unwrap();
            let baseline = swiglu_forward(&x, &w_gate, &w_up, &w_down).unwrap();
            for (a, b) in routed.to_vec().iter().zip(baseline.to_vec().iter()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let (w_gate, w_up, w_down) = rand_ffn(&mut rng, 6, 5);
        let rs = RoutingState::<f64>::init(6, 5, 0.02, &mut rng);
        let x = Tensor::<f64>::zeros(vec![1, 3, 6]);
        let out =
            polyglu_forward(&x, &w_gate, &w_up, &w_down, &rs, 0.5, RoutingMode::EvalSoft).unwrap();
        assert_eq!(out.to_vec(), vec![0.0; 18]);
        let sw = swiglu_forward(&x, &w_gate, &w_up, &w_down).unwrap();
        assert_eq!(sw.to_vec(), vec![0.0; 18]);
    }

    #[test]
    fn polyglu_gradients_eval_soft() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (d_model, d_ff) = (6, 5);
        let (w_gate, w_up, w_down) = rand_ffn(&mut rng, d_model, d_ff);
        let mut rs = RoutingState::<f64>::init(d_model, d_ff, 0.5, &mut rng);
        rs.alpha = Tensor::param(vec![d_ff, 4], rand_vec(&mut rng, d_ff * 4, 0.5)).unwrap();
        let x = Tensor::param(vec![2, 3, d_model], rand_vec(&mut rng, 36, 1.0)).unwrap();
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
        ] {
            let err = grad_check(&f, t, 1e-5);
            assert!(err <= 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn swiglu_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let (w_gate, w_up, w_down) = rand_ffn(&mut rng, 6, 5);
        let x = Tensor::param(vec![1, 3, 6], rand_vec(&mut rng, 18, 1.0)).unwrap();
        let f = || {
            swiglu_forward(&x, &w_gate, &w_up, &w_down)
                .unwrap()
                .tanh()
                .sum_all()
                .unwrap()
        };
        assert!(grad_check(&f, &x, 1e-5) <= 1e-6);
        assert!(grad_check(&f, &w_gate, 1e-5) <= 1e-6);
    }

    #[test]
    fn routing_overhead_arithmetic() {
        assert_eq!(routing_param_count(1024, 4096, 4, 32), 49_320);
        // gate-network term alone
        assert_eq!(32 * 1024 + 32 + 4 * 32 + 4, 32_932);
        assert_eq!(28 * routing_param_count(1024, 4096, 4, 32), 1_380_960);
    }

    #[test]
    fn gates_are_constant_along_sequence() {
        // routing_gates pools over seq before the palette mix, so its output
        // has no sequence axis at all.
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let rs = RoutingState::<f64>::init(6, 5, 0.5, &mut rng);
        let x = Tensor::from_vec(vec![2, 7, 6], rand_vec(&mut rng, 84, 1.0)).unwrap();
        let g = routing_gates(&x, &rs, 0.5, RoutingMode::EvalSoft).unwrap();
        assert_eq!(g.shape(), &[2, 5, 4]);
    }
}
