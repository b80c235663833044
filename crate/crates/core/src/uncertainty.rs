//! Distributional machinery: the constraint function G, empirical CVaR via
//! the sort-and-breakpoint closed form, the L∞ Lipschitz regularization term,
//! the distributionally robust chance-constraint (DRCC) margin, and the
//! Wasserstein radius estimate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::UncertainSystem;
use crate::candidate::LyapunovCandidate;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("empty value list")]
    EmptyValues,
    #[error("beta exceeds 1/N (beta = {beta}, N = {n})")]
    BetaExceedsInvN { beta: f64, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("formula excludes m=2")]
    RadiusExcludesM2,
}

/// Offline disturbance samples {ξᵢ}ᵢ₌₁ᴺ, the atoms of the empirical
/// distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    samples: Vec<Vec<f64>>,
    m: usize,
}

impl SampleSet {
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self, UncertaintyError> {
        if samples.is_empty() {
            return Err(UncertaintyError::EmptyValues);
        }
        let m = samples[0].len();
        for s in &samples {
            if s.len() != m {
                return Err(UncertaintyError::Dimension { expected: m, got: s.len() });
            }
        }
        Ok(SampleSet { samples, m })
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn dim(&self) -> usize {
        self.m
    }
}

/// 1-Wasserstein ambiguity ball (L₁ ground metric) of radius `r`, with chance
/// level `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityConfig {
    pub radius: f64,
    pub beta: f64,
}

impl AmbiguityConfig {
    pub fn new(radius: f64, beta: f64) -> Self {
        assert!(radius >= 0.0, "radius must be >= 0");
        assert!(beta > 0.0 && beta < 1.0, "beta must lie in (0,1)");
        AmbiguityConfig { radius, beta }
    }
}

/// Inputs of the Wasserstein radius estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusParams {
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
    pub rho: f64,
}

/// G(x, ξ) = ∇V(x)ᵀ(f(x) + d(x)ξ) + ε‖x‖². Negativity of G at all x ≠ 0 is
/// the (sampled) Lyapunov decrease condition.
pub fn g_value(
    v: &dyn LyapunovCandidate,
    system: &UncertainSystem,
    x: &[f64],
    xi: &[f64],
    epsilon: f64,
) -> Result<f64, UncertaintyError> {
    if x.len() != system.n {
        return Err(UncertaintyError::Dimension { expected: system.n, got: x.len() });
    }
    if xi.len() != system.m {
        return Err(UncertaintyError::Dimension { expected: system.m, got: xi.len() });
    }
    let grad = v.grad(x);
    let rhs = system.eval_rhs(x, xi);
    let vdot: f64 = grad.iter().zip(&rhs).map(|(g, r)| g * r).sum();
    let norm_sq: f64 = x.iter().map(|xi| xi * xi).sum();
    Ok(vdot + epsilon * norm_sq)
}

/// inf over t of (1/N)Σ(vᵢ+t)₊ − tβ, returned with the attaining t*.
///
/// The objective is piecewise linear with breakpoints at t = −vᵢ; the slope on
/// the interval right of the k-th largest value is k/N − β, so the infimum is
/// attained at t* = −v₍ₖ₎ for the smallest k with k/N ≥ β. For β ≤ 1/N this
/// collapses to β·maxᵢ vᵢ.
pub fn cvar_empirical_inf(values: &[f64], beta: f64) -> Result<(f64, f64), UncertaintyError> {
    if values.is_empty() {
        return Err(UncertaintyError::EmptyValues);
    }
    assert!(beta > 0.0 && beta < 1.0, "beta must lie in (0,1)");
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("values must be finite"));
    let mut k = (beta * n as f64).ceil() as usize;
    k = k.max(1);
    while (k as f64) / (n as f64) < beta {
        k += 1;
    }
    let t_star = -sorted[k - 1];
    let inf: f64 = sorted
        .iter()
        .map(|v| (v + t_star).max(0.0))
        .sum::<f64>()
        / n as f64
        - t_star * beta;
    Ok((inf, t_star))
}

/// L_G(x) = max over columns j of |∇V(x)ᵀ dⱼ(x)| — the L∞ dual-norm Lipschitz
/// constant of ξ ↦ G(x, ξ) under the L₁ ground metric.
pub fn lipschitz_term(
    v: &dyn LyapunovCandidate,
    system: &UncertainSystem,
    x: &[f64],
) -> Result<f64, UncertaintyError> {
    if x.len() != system.n {
        return Err(UncertaintyError::Dimension { expected: system.n, got: x.len() });
    }
    let grad = v.grad(x);
    let mut best = 0.0f64;
    for col in system.eval_d_columns(x) {
        let dot: f64 = grad.iter().zip(&col).map(|(g, d)| g * d).sum();
        best = best.max(dot.abs());
    }
    Ok(best)
}

/// DRCC margin r·L_G(x) + β·maxᵢ G(x, ξᵢ); a nonpositive value certifies the
/// distributionally robust chance constraint at x. Requires β ≤ 1/N, the
/// regime where the CVaR infimum has the β·max closed form.
pub fn drcc_margin(
    v: &dyn LyapunovCandidate,
    system: &UncertainSystem,
    x: &[f64],
    samples: &SampleSet,
    cfg: &AmbiguityConfig,
    epsilon: f64,
) -> Result<f64, UncertaintyError> {
    if cfg.beta > 1.0 / samples.count() as f64 {
        return Err(UncertaintyError::BetaExceedsInvN { beta: cfg.beta, n: samples.count() });
    }
    drcc_margin_general(v, system, x, samples, cfg, epsilon)
}

/// The same margin via the general CVaR breakpoint form, usable for any
/// β ∈ (0,1): r·L_G(x) + inf_t[(1/N)Σ(G(x,ξᵢ)+t)₊ − tβ]. Provided for study;
/// the synthesis pipelines assume β ≤ 1/N and use [`drcc_margin`].
pub fn drcc_margin_general(
    v: &dyn LyapunovCandidate,
    system: &UncertainSystem,
    x: &[f64],
    samples: &SampleSet,
    cfg: &AmbiguityConfig,
    epsilon: f64,
) -> Result<f64, UncertaintyError> {
    let g_values: Vec<f64> = samples
        .samples()
        .iter()
        .map(|xi| g_value(v, system, x, xi, epsilon))
        .collect::<Result<_, _>>()?;
    let (cvar_inf, _) = cvar_empirical_inf(&g_values, cfg.beta)?;
    let lip = lipschitz_term(v, system, x)?;
    Ok(cfg.radius * lip + cvar_inf)
}

/// Wasserstein radius estimate r*(N, α):
/// (log(c₁/α)/(c₂N))^(1/max(m,2)) when N ≥ log(c₁/α)/c₂, otherwise the same
/// base with exponent 1/ρ. The concentration bound behind the formula excludes
/// m = 2. A nonpositive log term (the confidence boundary) yields r* = 0.
pub fn wasserstein_radius(params: &RadiusParams) -> Result<f64, UncertaintyError> {
    if params.m == 2 {
        return Err(UncertaintyError::RadiusExcludesM2);
    }
    assert!(params.n >= 1, "N must be >= 1");
    assert!(params.c1 > 0.0 && params.c2 > 0.0 && params.rho > 0.0);
    let log_term = (params.c1 / params.alpha).ln();
    if log_term <= 0.0 {
        return Ok(0.0);
    }
    let base = log_term / (params.c2 * params.n as f64);
    let exponent = if params.n as f64 >= log_term / params.c2 {
        1.0 / params.m.max(2) as f64
    } else {
        1.0 / params.rho
    };
    Ok(base.powf(exponent))
}

/// Probability guarantee (1−α)(1−β) of the radius-calibrated DRCC pipeline.
pub fn drcc_probability_bound(alpha: f64, beta: f64) -> f64 {
    (1.0 - alpha) * (1.0 - beta)
}
