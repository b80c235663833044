//! Neural-network Lyapunov candidates: a tanh MLP behind a positive-definite
//! wrapper, reverse-mode differentiation for parameter and state gradients,
//! the three hinge losses, and an Adam training loop with Xavier-uniform
//! initialization.

pub mod tape;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{substream, UncertainSystem};
use crate::candidate::LyapunovCandidate;
use crate::uncertainty::{AmbiguityConfig, SampleSet, UncertaintyError};
use tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("arity mismatch: expected {expected}, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("layer sizes must have at least two entries")]
    BadArchitecture,
    #[error("embedding input size mismatch: embedding produces {expected}, network takes {got}")]
    EmbeddingMismatch { expected: usize, got: usize },
    #[error("loss kind {0:?} requires disturbance samples")]
    MissingSamples(LossKind),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize, last: Box<MlpLyapunov> },
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("checkpoint parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WrapperMode {
    /// V = ‖φ(x) − φ(0)‖² + α̂‖x‖²
    Squared,
    /// V = |φ(x) − φ(0)| + α̂‖x‖ (scalar network output)
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Embedding {
    Identity,
    /// (θ, θ̇) ↦ (sin θ, cos θ, θ̇)
    PendulumTrig,
}

impl Embedding {
    pub fn input_dim(&self, state_dim: usize) -> usize {
        match self {
            Embedding::Identity => state_dim,
            Embedding::PendulumTrig => 3,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Embedding::Identity => x.to_vec(),
            Embedding::PendulumTrig => vec![x[0].sin(), x[0].cos(), x[1]],
        }
    }

    /// Jacobian ∂(embedded)/∂(state), row per embedded coordinate.
    fn jacobian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        match self {
            Embedding::Identity => {
                let n = x.len();
                (0..n)
                    .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect()
            }
            Embedding::PendulumTrig => vec![
                vec![x[0].cos(), 0.0],
                vec![-x[0].sin(), 0.0],
                vec![0.0, 1.0],
            ],
        }
    }

    fn apply_tape(&self, t: &mut Tape, x: &[Var]) -> Vec<Var> {
        match self {
            Embedding::Identity => x.to_vec(),
            Embedding::PendulumTrig => {
                vec![t.sin(x[0]), t.cos(x[0]), x[1]]
            }
        }
    }
}

/// Architecture + wrapper hyperparameters; everything about the candidate
/// except the trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    /// Network layer sizes, input (after embedding) first.
    pub layer_sizes: Vec<usize>,
    pub wrapper: WrapperMode,
    pub alpha_hat: f64,
    pub embedding: Embedding,
}

/// Tanh MLP Lyapunov candidate. Hidden layers use tanh; the output layer is
/// linear; the wrapper enforces V(0) = 0 and V > 0 elsewhere by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLyapunov {
    pub arch: MlpArch,
    /// Row-major weight matrices, one per layer transition.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// State dimension before embedding.
    pub state_dim: usize,
}

impl MlpLyapunov {
    /// Xavier-uniform weights, zero biases, deterministic per seed.
    pub fn init(arch: MlpArch, state_dim: usize, seed: u64) -> Result<Self, NnError> {
        if arch.layer_sizes.len() < 2 {
            return Err(NnError::BadArchitecture);
        }
        let expected = arch.embedding.input_dim(state_dim);
        if arch.layer_sizes[0] != expected {
            return Err(NnError::EmbeddingMismatch { expected, got: arch.layer_sizes[0] });
        }
        let mut rng = substream(seed, 0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in arch.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpLyapunov { arch, weights, biases, state_dim })
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.len();
            w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = b.len();
            b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    /// Raw network output φ(e) with all activations kept for backprop.
    fn phi_forward(&self, embedded: &[f64]) -> Vec<Vec<f64>> {
        let mut activations = vec![embedded.to_vec()];
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.arch.layer_sizes[l], self.arch.layer_sizes[l + 1]);
            let prev = &activations[l];
            let mut z = self.biases[l].clone();
            for o in 0..n_out {
                for i in 0..n_in {
                    z[o] += self.weights[l][o * n_in + i] * prev[i];
                }
            }
            if l < last {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            activations.push(z);
        }
        activations
    }

    fn phi(&self, embedded: &[f64]) -> Vec<f64> {
        self.phi_forward(embedded).pop().unwrap()
    }

    /// Jacobian ∂φ/∂(embedded input), one row per output.
    fn phi_jacobian(&self, activations: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n_out = *self.arch.layer_sizes.last().unwrap();
        let last = self.n_layers() - 1;
        (0..n_out)
            .map(|o| {
                // Seed e_o at the (linear) output and backpropagate.
                let mut delta = vec![0.0; n_out];
                delta[o] = 1.0;
                for l in (0..=last).rev() {
                    let (n_in, n_l_out) =
                        (self.arch.layer_sizes[l], self.arch.layer_sizes[l + 1]);
                    if l < last {
                        for (d, a) in delta.iter_mut().zip(&activations[l + 1]) {
                            *d *= 1.0 - a * a;
                        }
                    }
                    let mut next = vec![0.0; n_in];
                    for oo in 0..n_l_out {
                        for i in 0..n_in {
                            next[i] += self.weights[l][oo * n_in + i] * delta[oo];
                        }
                    }
                    delta = next;
                }
                delta
            })
            .collect()
    }

    fn check_arity(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.state_dim {
            return Err(NnError::Arity { expected: self.state_dim, got: x.len() });
        }
        Ok(())
    }

    /// V(x) per the wrapper mode.
    pub fn forward(&self, x: &[f64]) -> Result<f64, NnError> {
        self.check_arity(x)?;
        let phi_x = self.phi(&self.arch.embedding.apply(x));
        let phi_0 = self.phi(&self.arch.embedding.apply(&vec![0.0; self.state_dim]));
        let norm_sq: f64 = x.iter().map(|v| v * v).sum();
        Ok(match self.arch.wrapper {
            WrapperMode::Squared => {
                let dist: f64 = phi_x.iter().zip(&phi_0).map(|(a, b)| (a - b) * (a - b)).sum();
                dist + self.arch.alpha_hat * norm_sq
            }
            WrapperMode::Abs => {
                (phi_x[0] - phi_0[0]).abs() + self.arch.alpha_hat * norm_sq.sqrt()
            }
        })
    }

    /// ∇ₓV(x) by closed-form backpropagation (the fast validation path).
    pub fn grad_x(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_arity(x)?;
        let embedded = self.arch.embedding.apply(x);
        let activations = self.phi_forward(&embedded);
        let phi_x = activations.last().unwrap().clone();
        let phi_0 = self.phi(&self.arch.embedding.apply(&vec![0.0; self.state_dim]));
        let jac_phi = self.phi_jacobian(&activations);
        let jac_embed = self.arch.embedding.jacobian(x);
        let n = self.state_dim;
        // ∂φ_o/∂x_j through the embedding.
        let phi_dx = |o: usize, j: usize| -> f64 {
            jac_phi[o].iter().zip(&jac_embed).map(|(d, row)| d * row[j]).sum()
        };
        let mut grad = vec![0.0; n];
        match self.arch.wrapper {
            WrapperMode::Squared => {
                for (j, g) in grad.iter_mut().enumerate() {
                    for o in 0..phi_x.len() {
                        *g += 2.0 * (phi_x[o] - phi_0[o]) * phi_dx(o, j);
                    }
                    *g += 2.0 * self.arch.alpha_hat * x[j];
                }
            }
            WrapperMode::Abs => {
                let diff = phi_x[0] - phi_0[0];
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (j, g) in grad.iter_mut().enumerate() {
                    *g = sign * phi_dx(0, j)
                        + if norm > 0.0 { self.arch.alpha_hat * x[j] / norm } else { 0.0 };
                }
            }
        }
        Ok(grad)
    }

    /// V̇(x, ξ) = ∇ₓV(x) · (f(x) + d(x)ξ).
    pub fn vdot(
        &self,
        system: &UncertainSystem,
        x: &[f64],
        xi: &[f64],
    ) -> Result<f64, NnError> {
        self.check_arity(x)?;
        if xi.len() != system.m {
            return Err(NnError::Arity { expected: system.m, got: xi.len() });
        }
        let grad = self.grad_x(x)?;
        let rhs = system.eval_rhs(x, xi);
        Ok(grad.iter().zip(&rhs).map(|(g, r)| g * r).sum())
    }

    /// Build φ on the tape from parameter leaves.
    fn tape_phi(&self, t: &mut Tape, params: &[Var], input: &[Var]) -> Vec<Var> {
        let mut act: Vec<Var> = input.to_vec();
        let last = self.n_layers() - 1;
        let mut off = 0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.arch.layer_sizes[l], self.arch.layer_sizes[l + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut z = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let mut acc = b[o];
                for i in 0..n_in {
                    let prod = t.mul(w[o * n_in + i], act[i]);
                    acc = t.add(acc, prod);
                }
                z.push(if l < last { t.tanh(acc) } else { acc });
            }
            act = z;
        }
        act
    }

    /// V(x) as a tape expression of parameter leaves and state leaves.
    fn tape_value(&self, t: &mut Tape, params: &[Var], x: &[Var]) -> Var {
        let embedded = self.arch.embedding.apply_tape(t, x);
        let phi_x = self.tape_phi(t, params, &embedded);
        let zero_state: Vec<Var> = (0..self.state_dim).map(|_| t.leaf(0.0)).collect();
        let embedded_0 = self.arch.embedding.apply_tape(t, &zero_state);
        let phi_0 = self.tape_phi(t, params, &embedded_0);
        let sq_terms: Vec<Var> = x
            .iter()
            .map(|&v| t.mul(v, v))
            .collect();
        let norm_sq = t.sum(&sq_terms);
        match self.arch.wrapper {
            WrapperMode::Squared => {
                let dist_terms: Vec<Var> = phi_x
                    .iter()
                    .zip(&phi_0)
                    .map(|(&a, &b)| {
                        let d = t.sub(a, b);
                        t.mul(d, d)
                    })
                    .collect();
                let dist = t.sum(&dist_terms);
                let reg = t.scale(norm_sq, self.arch.alpha_hat);
                t.add(dist, reg)
            }
            WrapperMode::Abs => {
                let d = t.sub(phi_x[0], phi_0[0]);
                let a = t.abs(d);
                let norm = t.sqrt(norm_sq);
                let reg = t.scale(norm, self.arch.alpha_hat);
                t.add(a, reg)
            }
        }
    }
}

impl LyapunovCandidate for MlpLyapunov {
    fn n_vars(&self) -> usize {
        self.state_dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.forward(x).expect("arity checked by caller")
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.grad_x(x).expect("arity checked by caller")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Lf,
    Cc,
    Drcc,
}

/// Nominal hinge loss: (1/M) Σ (V̇(xᵢ) + γ‖xᵢ‖)₊ at ξ = 0.
pub fn loss_lf(
    model: &MlpLyapunov,
    states: &[Vec<f64>],
    system: &UncertainSystem,
    gamma: f64,
) -> Result<f64, NnError> {
    let zero = vec![0.0; system.m];
    let mut acc = 0.0;
    for x in states {
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc += (model.vdot(system, x, &zero)? + gamma * norm).max(0.0);
    }
    Ok(acc / states.len() as f64)
}

/// Sampled worst-case hinge loss: (1/M) Σ (max_j (V̇(xᵢ, ξⱼ) + γ‖xᵢ‖))₊.
pub fn loss_cc(
    model: &MlpLyapunov,
    states: &[Vec<f64>],
    system: &UncertainSystem,
    samples: &SampleSet,
    gamma: f64,
) -> Result<f64, NnError> {
    let mut acc = 0.0;
    for x in states {
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        // ∇V(x) is sample-independent; compute it once and dot it with each
        // sampled vector field (identical to per-sample vdot calls).
        let grad = model.grad_x(x)?;
        let worst = samples
            .samples()
            .iter()
            .map(|xi| {
                let rhs = system.eval_rhs(x, xi);
                grad.iter().zip(&rhs).map(|(g, r)| g * r).sum::<f64>() + gamma * norm
            })
            .fold(f64::NEG_INFINITY, f64::max);
        acc += worst.max(0.0);
    }
    Ok(acc / states.len() as f64)
}

/// Distributionally robust hinge loss: (1/M) Σ (r·maxⱼ|∇V(xᵢ)ᵀdⱼ| + β·maxⱼ V̇(xᵢ,ξⱼ)
/// + γ‖xᵢ‖)₊.
pub fn loss_drcc(
    model: &MlpLyapunov,
    states: &[Vec<f64>],
    system: &UncertainSystem,
    samples: &SampleSet,
    gamma: f64,
    cfg: &AmbiguityConfig,
) -> Result<f64, NnError> {
    if cfg.beta > 1.0 / samples.count() as f64 {
        return Err(NnError::Uncertainty(UncertaintyError::BetaExceedsInvN {
            beta: cfg.beta,
            n: samples.count(),
        }));
    }
    let mut acc = 0.0;
    for x in states {
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let grad = model.grad_x(x)?;
        let lip = system
            .eval_d_columns(x)
            .iter()
            .map(|col| grad.iter().zip(col).map(|(g, d)| g * d).sum::<f64>().abs())
            .fold(0.0f64, f64::max);
        let worst = samples
            .samples()
            .iter()
            .map(|xi| {
                let rhs = system.eval_rhs(x, xi);
                grad.iter().zip(&rhs).map(|(g, r)| g * r).sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        acc += (cfg.radius * lip + cfg.beta * worst + gamma * norm).max(0.0);
    }
    Ok(acc / states.len() as f64)
}

/// One state's contribution to the selected loss, as a tape expression of the
/// parameter leaves (for parameter gradients).
fn tape_loss_term(
    t: &mut Tape,
    model: &MlpLyapunov,
    system: &UncertainSystem,
    x: &[f64],
    samples: Option<&SampleSet>,
    gamma: f64,
    kind: LossKind,
    cfg: Option<&AmbiguityConfig>,
    params: &[Var],
) -> Var {
    let x_vars: Vec<Var> = x.iter().map(|&v| t.leaf(v)).collect();
    let v = model.tape_value(t, params, &x_vars);
    let grad = t.grad(v, &x_vars);
    let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let gamma_norm = t.leaf(gamma * norm);

    let vdot_at = |t: &mut Tape, xi: &[f64]| -> Var {
        let rhs = system.eval_rhs(x, xi);
        let terms: Vec<Var> = grad
            .iter()
            .zip(&rhs)
            .map(|(&g, &r)| t.scale(g, r))
            .collect();
        t.sum(&terms)
    };

    let inner = match kind {
        LossKind::Lf => {
            let vd = vdot_at(t, &vec![0.0; system.m]);
            t.add(vd, gamma_norm)
        }
        LossKind::Cc => {
            let samples = samples.expect("cc loss requires samples");
            let mut worst: Option<Var> = None;
            for xi in samples.samples() {
                let vd = vdot_at(t, xi);
                let term = t.add(vd, gamma_norm);
                worst = Some(match worst {
                    Some(w) => t.max(w, term),
                    None => term,
                });
            }
            worst.unwrap()
        }
        LossKind::Drcc => {
            let samples = samples.expect("drcc loss requires samples");
            let cfg = cfg.expect("drcc loss requires ambiguity config");
            let mut lip: Option<Var> = None;
            for col in system.eval_d_columns(x) {
                let terms: Vec<Var> = grad
                    .iter()
                    .zip(&col)
                    .map(|(&g, &d)| t.scale(g, d))
                    .collect();
                let dot = t.sum(&terms);
                let a = t.abs(dot);
                lip = Some(match lip {
                    Some(l) => t.max(l, a),
                    None => a,
                });
            }
            let lip = t.scale(lip.unwrap(), cfg.radius);
            let mut worst: Option<Var> = None;
            for xi in samples.samples() {
                let vd = vdot_at(t, xi);
                worst = Some(match worst {
                    Some(w) => t.max(w, vd),
                    None => vd,
                });
            }
            let bw = t.scale(worst.unwrap(), cfg.beta);
            let s = t.add(lip, bw);
            t.add(s, gamma_norm)
        }
    };
    t.relu(inner)
}

/// Parameter gradients of the selected loss at the model's current
/// parameters, averaged over `states` (the quantity the trainer descends).
pub fn loss_param_gradients(
    model: &MlpLyapunov,
    states: &[Vec<f64>],
    system: &UncertainSystem,
    samples: Option<&SampleSet>,
    gamma: f64,
    kind: LossKind,
    cfg: Option<&AmbiguityConfig>,
) -> Result<Vec<f64>, NnError> {
    if matches!(kind, LossKind::Cc | LossKind::Drcc) && samples.is_none() {
        return Err(NnError::MissingSamples(kind));
    }
    let params = model.flat_params();
    let mut total = vec![0.0; params.len()];
    let inv_m = 1.0 / states.len() as f64;
    for x in states {
        let mut t = Tape::new();
        let param_vars: Vec<Var> = params.iter().map(|&p| t.leaf(p)).collect();
        let term =
            tape_loss_term(&mut t, model, system, x, samples, gamma, kind, cfg, &param_vars);
        let grads = t.grad(term, &param_vars);
        for (tot, g) in total.iter_mut().zip(&grads) {
            *tot += t.value(*g) * inv_m;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// States per epoch (M); a fresh uniform batch is drawn every epoch.
    pub batch_size: usize,
    /// Training region X_δ, one (lo, hi) pair per state dimension.
    pub region: Vec<(f64, f64)>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Required for the drcc loss.
    pub ambiguity: Option<AmbiguityConfig>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best model by holdout loss over all epochs (the final iterate of a
    /// hinge loss on fresh batches is noisy; the holdout pick is stable).
    pub model: MlpLyapunov,
    /// Training-batch loss per epoch, before that epoch's update.
    pub loss_trace: Vec<f64>,
    /// Holdout loss of the returned model.
    pub holdout_loss: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam training on the selected loss; bit-reproducible for a fixed
/// (seed, config, system, architecture).
pub fn train(
    config: &TrainingConfig,
    system: &UncertainSystem,
    arch: &MlpArch,
    samples: Option<&SampleSet>,
) -> Result<TrainOutcome, NnError> {
    assert!(config.batch_size >= 1, "batch size must be >= 1");
    assert!(config.gamma > 0.0, "gamma must be > 0");
    if matches!(config.loss, LossKind::Cc | LossKind::Drcc) && samples.is_none() {
        return Err(NnError::MissingSamples(config.loss));
    }
    if let (LossKind::Drcc, Some(s), Some(cfg)) = (config.loss, samples, config.ambiguity.as_ref())
    {
        if cfg.beta > 1.0 / s.count() as f64 {
            return Err(NnError::Uncertainty(UncertaintyError::BetaExceedsInvN {
                beta: cfg.beta,
                n: s.count(),
            }));
        }
    }

    let mut model = MlpLyapunov::init(arch.clone(), system.n, config.seed)?;
    let mut params = model.flat_params();
    let mut m1 = vec![0.0; params.len()];
    let mut m2 = vec![0.0; params.len()];
    let mut loss_trace = Vec::with_capacity(config.epochs);

    // Fixed holdout batch on a dedicated substream (stream 0 is the
    // initializer, streams 1.. are the per-epoch batches).
    let holdout: Vec<Vec<f64>> = {
        let mut rng = substream(config.seed, u64::MAX);
        (0..4 * config.batch_size)
            .map(|_| config.region.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect())
            .collect()
    };
    let eval_holdout = |m: &MlpLyapunov| -> Result<f64, NnError> {
        match config.loss {
            LossKind::Lf => loss_lf(m, &holdout, system, config.gamma),
            LossKind::Cc => loss_cc(m, &holdout, system, samples.unwrap(), config.gamma),
            LossKind::Drcc => loss_drcc(
                m,
                &holdout,
                system,
                samples.unwrap(),
                config.gamma,
                config.ambiguity.as_ref().expect("drcc loss requires ambiguity config"),
            ),
        }
    };
    let mut best: Option<(f64, MlpLyapunov)> = None;

    for epoch in 0..config.epochs {
        let mut rng = substream(config.seed, epoch as u64 + 1);
        let states: Vec<Vec<f64>> = (0..config.batch_size)
            .map(|_| config.region.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect())
            .collect();

        // One small tape per state, evaluated in parallel; the reduction is
        // ordered, so runs are bit-reproducible regardless of thread count.
        let per_state: Vec<(f64, Vec<f64>)> = states
            .par_iter()
            .map(|x| {
                let mut t = Tape::new();
                let param_vars: Vec<Var> = params.iter().map(|&p| t.leaf(p)).collect();
                let term = tape_loss_term(
                    &mut t,
                    &model,
                    system,
                    x,
                    samples,
                    config.gamma,
                    config.loss,
                    config.ambiguity.as_ref(),
                    &param_vars,
                );
                let grads = t.grad(term, &param_vars);
                (t.value(term), grads.iter().map(|&g| t.value(g)).collect())
            })
            .collect();

        let inv_m = 1.0 / states.len() as f64;
        let loss: f64 = per_state.iter().map(|(l, _)| l).sum::<f64>() * inv_m;
        if !loss.is_finite() {
            return Err(NnError::Diverged { epoch, last: Box::new(model) });
        }
        loss_trace.push(loss);

        let step = epoch as f64 + 1.0;
        let bc1 = 1.0 - ADAM_BETA1.powf(step);
        let bc2 = 1.0 - ADAM_BETA2.powf(step);
        for i in 0..params.len() {
            let g: f64 = per_state.iter().map(|(_, gs)| gs[i]).sum::<f64>() * inv_m;
            m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * g;
            m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * g * g;
            params[i] -=
                config.learning_rate * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + ADAM_EPS);
        }
        model.set_flat_params(&params);

        let h = eval_holdout(&model)?;
        if h.is_finite() && best.as_ref().is_none_or(|(b, _)| h < *b) {
            best = Some((h, model.clone()));
        }
    }

    match best {
        Some((holdout_loss, model)) => Ok(TrainOutcome { model, loss_trace, holdout_loss }),
        None => {
            let holdout_loss = eval_holdout(&model)?;
            Ok(TrainOutcome { model, loss_trace, holdout_loss })
        }
    }
}

/// Textual checkpoint: layer sizes, wrapper, α̂, embedding, then row-major
/// weights and biases per layer, `{:?}`-formatted for exact round-trips.
pub fn save_checkpoint(model: &MlpLyapunov) -> String {
    let mut out = String::from("mlp-lyapunov v1\n");
    out.push_str(&format!("state_dim {}\n", model.state_dim));
    let sizes: Vec<String> = model.arch.layer_sizes.iter().map(|s| s.to_string()).collect();
    out.push_str(&format!("sizes {}\n", sizes.join(" ")));
    out.push_str(&format!(
        "wrapper {}\n",
        match model.arch.wrapper {
            WrapperMode::Squared => "squared",
            WrapperMode::Abs => "abs",
        }
    ));
    out.push_str(&format!("alpha_hat {:?}\n", model.arch.alpha_hat));
    out.push_str(&format!(
        "embedding {}\n",
        match model.arch.embedding {
            Embedding::Identity => "identity",
            Embedding::PendulumTrig => "pendulum-trig",
        }
    ));
    for (l, (w, b)) in model.weights.iter().zip(&model.biases).enumerate() {
        out.push_str(&format!("weights {l}\n"));
        let row: Vec<String> = w.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
        out.push_str(&format!("biases {l}\n"));
        let row: Vec<String> = b.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn load_checkpoint(text: &str) -> Result<MlpLyapunov, NnError> {
    let mut lines = text.lines();
    let parse = |s: Option<&str>, what: &str| -> Result<String, NnError> {
        s.map(str::to_string).ok_or_else(|| NnError::Parse(format!("missing {what}")))
    };
    let header = parse(lines.next(), "header")?;
    if header != "mlp-lyapunov v1" {
        return Err(NnError::Parse(format!("unknown header {header:?}")));
    }
    let field = |line: String, key: &str| -> Result<String, NnError> {
        line.strip_prefix(key)
            .map(|r| r.trim().to_string())
            .ok_or_else(|| NnError::Parse(format!("expected {key}, got {line:?}")))
    };
    let state_dim: usize = field(parse(lines.next(), "state_dim")?, "state_dim")?
        .parse()
        .map_err(|e| NnError::Parse(format!("state_dim: {e}")))?;
    let sizes_line = field(parse(lines.next(), "sizes")?, "sizes")?;
    let layer_sizes: Vec<usize> = sizes_line
        .split_whitespace()
        .map(|s| s.parse().map_err(|e| NnError::Parse(format!("sizes: {e}"))))
        .collect::<Result<_, _>>()?;
    let wrapper = match field(parse(lines.next(), "wrapper")?, "wrapper")?.as_str() {
        "squared" => WrapperMode::Squared,
        "abs" => WrapperMode::Abs,
        other => return Err(NnError::Parse(format!("unknown wrapper {other:?}"))),
    };
    let alpha_hat: f64 = field(parse(lines.next(), "alpha_hat")?, "alpha_hat")?
        .parse()
        .map_err(|e| NnError::Parse(format!("alpha_hat: {e}")))?;
    let embedding = match field(parse(lines.next(), "embedding")?, "embedding")?.as_str() {
        "identity" => Embedding::Identity,
        "pendulum-trig" => Embedding::PendulumTrig,
        other => return Err(NnError::Parse(format!("unknown embedding {other:?}"))),
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..layer_sizes.len() - 1 {
        let expect_w = layer_sizes[l] * layer_sizes[l + 1];
        let expect_b = layer_sizes[l + 1];
        let _ = field(parse(lines.next(), "weights header")?, &format!("weights {l}"))?;
        let w: Vec<f64> = parse(lines.next(), "weights row")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|e| NnError::Parse(format!("weight: {e}"))))
            .collect::<Result<_, _>>()?;
        if w.len() != expect_w {
            return Err(NnError::Parse(format!(
                "layer {l}: expected {expect_w} weights, got {}",
                w.len()
            )));
        }
        let _ = field(parse(lines.next(), "biases header")?, &format!("biases {l}"))?;
        let b: Vec<f64> = parse(lines.next(), "biases row")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|e| NnError::Parse(format!("bias: {e}"))))
            .collect::<Result<_, _>>()?;
        if b.len() != expect_b {
            return Err(NnError::Parse(format!(
                "layer {l}: expected {expect_b} biases, got {}",
                b.len()
            )));
        }
        weights.push(w);
        biases.push(b);
    }
    let arch = MlpArch { layer_sizes, wrapper, alpha_hat, embedding };
    let expected = arch.embedding.input_dim(state_dim);
    if arch.layer_sizes[0] != expected {
        return Err(NnError::Parse("embedding input size mismatch".into()));
    }
    Ok(MlpLyapunov { arch, weights, biases, state_dim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{make_pendulum, make_poly_system, sample_disturbances, DisturbanceSpec};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn small_arch() -> MlpArch {
        MlpArch {
            layer_sizes: vec![2, 8, 1],
            wrapper: WrapperMode::Abs,
            alpha_hat: 0.05,
            embedding: Embedding::Identity,
        }
    }

    fn random_model(seed: u64) -> MlpLyapunov {
        MlpLyapunov::init(small_arch(), 2, seed).unwrap()
    }

    #[test]
    fn wrapper_zero_at_origin_and_lower_bounded() {
        for (wrapper, seed) in [(WrapperMode::Squared, 1), (WrapperMode::Abs, 2)] {
            let arch = MlpArch { wrapper, ..small_arch() };
            let model = MlpLyapunov::init(arch, 2, seed).unwrap();
            assert_eq!(model.forward(&[0.0, 0.0]).unwrap(), 0.0);
            let mut rng = StdRng::seed_from_u64(3);
            for _ in 0..10_000 {
                let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let v = model.forward(&x).unwrap();
                let n_sq = x[0] * x[0] + x[1] * x[1];
                let bound = match wrapper {
                    WrapperMode::Squared => model.arch.alpha_hat * n_sq,
                    WrapperMode::Abs => model.arch.alpha_hat * n_sq.sqrt(),
                };
                assert!(v >= bound, "V = {v} below wrapper bound {bound}");
            }
        }
    }

    #[test]
    fn squared_wrapper_closed_form_linear_phi() {
        // φ linear single layer W = I, b = 0 (2-2 identity), α̂ = 1, squared:
        // V = ‖x‖² + ‖x‖² = 2 at x = (1, 0).
        let arch = MlpArch {
            layer_sizes: vec![2, 2],
            wrapper: WrapperMode::Squared,
            alpha_hat: 1.0,
            embedding: Embedding::Identity,
        };
        let mut model = MlpLyapunov::init(arch, 2, 0).unwrap();
        model.weights[0] = vec![1.0, 0.0, 0.0, 1.0];
        model.biases[0] = vec![0.0, 0.0];
        assert_eq!(model.forward(&[1.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn grad_x_zero_at_origin_squared() {
        let arch = MlpArch { wrapper: WrapperMode::Squared, ..small_arch() };
        let model = MlpLyapunov::init(arch, 2, 5).unwrap();
        let g = model.grad_x(&[0.0, 0.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    fn fd_grad_x(model: &MlpLyapunov, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|j| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[j] += h;
                xm[j] -= h;
                (model.forward(&xp).unwrap() - model.forward(&xm).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn grad_x_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        for seed in 0..10 {
            for wrapper in [WrapperMode::Squared, WrapperMode::Abs] {
                let arch = MlpArch { wrapper, ..small_arch() };
                let model = MlpLyapunov::init(arch, 2, seed).unwrap();
                for _ in 0..4 {
                    let x = [rng.gen_range(-2.0..2.0f64), rng.gen_range(-2.0..2.0)];
                    if x[0].hypot(x[1]) < 1e-2 {
                        continue;
                    }
                    let g = model.grad_x(&x).unwrap();
                    let o = fd_grad_x(&model, &x);
                    for (a, b) in g.iter().zip(&o) {
                        let denom = b.abs().max(1e-3);
                        assert!((a - b).abs() / denom < 1e-4, "grad {g:?} fd {o:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn pendulum_embedding_chain_rule() {
        let arch = MlpArch {
            layer_sizes: vec![3, 6, 1],
            wrapper: WrapperMode::Squared,
            alpha_hat: 0.5,
            embedding: Embedding::PendulumTrig,
        };
        let model = MlpLyapunov::init(arch, 2, 11).unwrap();
        for x in [[0.0, 1.0], [0.7, -0.4], [-1.2, 2.0]] {
            let g = model.grad_x(&x).unwrap();
            let o = fd_grad_x(&model, &x);
            for (a, b) in g.iter().zip(&o) {
                assert!((a - b).abs() / b.abs().max(1e-3) < 1e-4);
            }
        }
    }

    #[test]
    fn vdot_reduces_without_disturbance_columns() {
        let model = random_model(3);
        let sys = make_poly_system(1).unwrap();
        let x = [0.8, -0.6];
        let v0 = model.vdot(&sys, &x, &[0.0, 0.0]).unwrap();
        let grad = model.grad_x(&x).unwrap();
        let f = sys.eval_f(&x);
        let dot: f64 = grad.iter().zip(&f).map(|(g, r)| g * r).sum();
        assert!((v0 - dot).abs() < 1e-14);
    }

    #[test]
    fn losses_match_naive_loops_and_reductions() {
        let model = random_model(4);
        let sys = make_poly_system(2).unwrap();
        let dist = DisturbanceSpec::Gaussian { params: vec![(6.0, 1.0), (0.0, 1.0)] };
        let samples = sample_disturbances(&dist, 5, 8).unwrap();
        let mut rng = StdRng::seed_from_u64(9);
        let states: Vec<Vec<f64>> = (0..20)
            .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let gamma = 0.02;

        // loss_cc on {0} reduces to loss_lf.
        let zero_samples = SampleSet::new(vec![vec![0.0, 0.0]]).unwrap();
        let lf = loss_lf(&model, &states, &sys, gamma).unwrap();
        let cc0 = loss_cc(&model, &states, &sys, &zero_samples, gamma).unwrap();
        assert!((lf - cc0).abs() < 1e-15);

        // Naive double loop oracle for loss_cc.
        let cc = loss_cc(&model, &states, &sys, &samples, gamma).unwrap();
        let mut naive = 0.0;
        for x in &states {
            let norm = (x[0] * x[0] + x[1] * x[1]).sqrt();
            let mut worst = f64::NEG_INFINITY;
            for xi in samples.samples() {
                worst = worst.max(model.vdot(&sys, x, xi).unwrap() + gamma * norm);
            }
            naive += worst.max(0.0);
        }
        naive /= states.len() as f64;
        assert!((cc - naive).abs() < 1e-15);

        // drcc with r = 0, β = 1/N ~ scaled cc ingredients; just check the
        // naive recomputation with uncertainty::lipschitz_term.
        let cfg = AmbiguityConfig::new(0.15, 0.2);
        let drcc = loss_drcc(&model, &states, &sys, &samples, gamma, &cfg).unwrap();
        let mut naive = 0.0;
        for x in &states {
            let norm = (x[0] * x[0] + x[1] * x[1]).sqrt();
            let lip = crate::uncertainty::lipschitz_term(&model, &sys, x).unwrap();
            let mut worst = f64::NEG_INFINITY;
            for xi in samples.samples() {
                worst = worst.max(model.vdot(&sys, x, xi).unwrap());
            }
            naive += (cfg.radius * lip + cfg.beta * worst + gamma * norm).max(0.0);
        }
        naive /= states.len() as f64;
        assert!((drcc - naive).abs() < 1e-14);

        // Monotonicity in r pointwise per state (aggregate check here).
        let cfg0 = AmbiguityConfig::new(1e-12, 0.2);
        let drcc0 = loss_drcc(&model, &states, &sys, &samples, gamma, &cfg0).unwrap();
        assert!(drcc >= drcc0 - 1e-14);
    }

    #[test]
    fn loss_drcc_rejects_large_beta() {
        let model = random_model(4);
        let sys = make_poly_system(2).unwrap();
        let samples = SampleSet::new(vec![vec![0.0, 0.0]; 9]).unwrap();
        let cfg = AmbiguityConfig::new(0.1, 0.5);
        assert!(loss_drcc(&model, &[vec![1.0, 1.0]], &sys, &samples, 0.02, &cfg).is_err());
    }

    /// Parameter gradients of the tape losses against finite differences of
    /// the closed-form losses — the two paths are implemented independently.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        let sys = make_poly_system(2).unwrap();
        let dist = DisturbanceSpec::Gaussian { params: vec![(6.0, 1.0), (0.0, 1.0)] };
        let samples = sample_disturbances(&dist, 3, 12).unwrap();
        let cfg = AmbiguityConfig::new(0.15, 0.2);
        let gamma = 0.02;
        let mut rng = StdRng::seed_from_u64(13);
        let states: Vec<Vec<f64>> =
            (0..4).map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();

        for (kind, seed) in [(LossKind::Lf, 21u64), (LossKind::Cc, 22), (LossKind::Drcc, 23)] {
            let model = random_model(seed);
            let params = model.flat_params();
            let mut t = Tape::new();
            let param_vars: Vec<Var> = params.iter().map(|&p| t.leaf(p)).collect();
            let terms: Vec<Var> = states
                .iter()
                .map(|x| {
                    tape_loss_term(
                        &mut t, &model, &sys, x, Some(&samples), gamma, kind, Some(&cfg),
                        &param_vars,
                    )
                })
                .collect();
            let total = t.sum(&terms);
            let loss_var = t.scale(total, 1.0 / states.len() as f64);
            let grads = t.grad(loss_var, &param_vars);

            let eval = |m: &MlpLyapunov| -> f64 {
                match kind {
                    LossKind::Lf => loss_lf(m, &states, &sys, gamma).unwrap(),
                    LossKind::Cc => loss_cc(m, &states, &sys, &samples, gamma).unwrap(),
                    LossKind::Drcc => {
                        loss_drcc(m, &states, &sys, &samples, gamma, &cfg).unwrap()
                    }
                }
            };
            assert!((t.value(loss_var) - eval(&model)).abs() < 1e-12);

            let mut checked = 0;
            let mut idx_rng = StdRng::seed_from_u64(seed);
            while checked < 20 {
                let i = idx_rng.gen_range(0..params.len());
                let h = 1e-5;
                let mut pp = params.clone();
                pp[i] += h;
                let mut mp = model.clone();
                mp.set_flat_params(&pp);
                pp[i] -= 2.0 * h;
                let mut mm = model.clone();
                mm.set_flat_params(&pp);
                let fd = (eval(&mp) - eval(&mm)) / (2.0 * h);
                let g = t.value(grads[i]);
                let denom = fd.abs().max(1e-4);
                assert!(
                    (g - fd).abs() / denom < 1e-4,
                    "{kind:?} param {i}: tape {g} fd {fd}"
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn zero_epoch_training_returns_init() {
        let sys = make_poly_system(2).unwrap();
        let config = TrainingConfig {
            batch_size: 8,
            region: vec![(-2.0, 2.0), (-2.0, 2.0)],
            gamma: 0.02,
            learning_rate: 0.005,
            epochs: 0,
            seed: 99,
            loss: LossKind::Lf,
            ambiguity: None,
        };
        let out = train(&config, &sys, &small_arch(), None).unwrap();
        let init = MlpLyapunov::init(small_arch(), 2, 99).unwrap();
        assert_eq!(out.model, init);
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let sys = make_poly_system(1).unwrap();
        let config = TrainingConfig {
            batch_size: 32,
            region: vec![(-2.0, 2.0), (-2.0, 2.0)],
            gamma: 0.02,
            learning_rate: 0.005,
            epochs: 60,
            seed: 5,
            loss: LossKind::Lf,
            ambiguity: None,
        };
        let a = train(&config, &sys, &small_arch(), None).unwrap();
        let b = train(&config, &sys, &small_arch(), None).unwrap();
        assert_eq!(a.model, b.model, "training must be bit-reproducible");
        assert_eq!(a.loss_trace, b.loss_trace);
        let head: f64 = a.loss_trace[..10].iter().sum();
        let tail: f64 = a.loss_trace[a.loss_trace.len() - 10..].iter().sum();
        assert!(tail < head, "loss should decrease: head {head} tail {tail}");
    }

    #[test]
    fn training_requires_samples_for_cc() {
        let sys = make_poly_system(2).unwrap();
        let config = TrainingConfig {
            batch_size: 4,
            region: vec![(-2.0, 2.0), (-2.0, 2.0)],
            gamma: 0.02,
            learning_rate: 0.005,
            epochs: 1,
            seed: 0,
            loss: LossKind::Cc,
            ambiguity: None,
        };
        assert!(matches!(
            train(&config, &sys, &small_arch(), None),
            Err(NnError::MissingSamples(LossKind::Cc))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = random_model(31);
        let text = save_checkpoint(&model);
        let back = load_checkpoint(&text).unwrap();
        assert_eq!(model, back);
        let arch = MlpArch {
            layer_sizes: vec![3, 4, 2],
            wrapper: WrapperMode::Squared,
            alpha_hat: 0.5,
            embedding: Embedding::PendulumTrig,
        };
        let model = MlpLyapunov::init(arch, 2, 32).unwrap();
        let back = load_checkpoint(&save_checkpoint(&model)).unwrap();
        assert_eq!(model, back);
        assert!(load_checkpoint("garbage").is_err());
    }

    #[test]
    fn pendulum_trains_without_divergence() {
        let sys = make_pendulum();
        let arch = MlpArch {
            layer_sizes: vec![3, 8, 1],
            wrapper: WrapperMode::Squared,
            alpha_hat: 0.5,
            embedding: Embedding::PendulumTrig,
        };
        let config = TrainingConfig {
            batch_size: 16,
            region: sys.region.clone(),
            gamma: 0.02,
            learning_rate: 0.002,
            epochs: 20,
            seed: 17,
            loss: LossKind::Lf,
            ambiguity: None,
        };
        let out = train(&config, &sys, &arch, None).unwrap();
        assert!(out.loss_trace.iter().all(|l| l.is_finite()));
    }
}
