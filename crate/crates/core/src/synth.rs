//! Assembly and solution of the three SOS Lyapunov certificate programs for
//! polynomial uncertain systems: the nominal baseline, the chance-constrained
//! (CC) sampled form, and the distributionally robust (DRCC) form with its
//! signed Lipschitz constraints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::UncertainSystem;
use crate::poly::{monomial_basis_range, Monomial, PolyVector, Polynomial};
use crate::sdp::{SolveStatus, SolverConfig};
use crate::sos::{
    compile, extract_certificates, solve_feasibility, verify_certificate, GramCertificate,
    ParamPolynomial, SosConstraint, SosError, SosProgram, Verdict,
};
use crate::uncertainty::AmbiguityConfig;
use crate::uncertainty::SampleSet;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("requires polynomial field")]
    NonPolynomialField,
    #[error("beta exceeds 1/N (beta = {beta}, N = {n})")]
    BetaExceedsInvN { beta: f64, n: usize },
    #[error("degree must be even and positive, got {0}")]
    BadDegree(u32),
    #[error(transparent)]
    Sos(#[from] SosError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    Baseline,
    Cc,
    Drcc,
}

/// Sign of the ε‖x‖² term inside the DRCC derivative constraints. The
/// derivation mode penalizes +ε inside (so the certified margin is
/// r·L_G + β·max G ≤ 0); the literal mode reproduces the −ε rendering for
/// comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonSignMode {
    Derivation,
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SosSynthesisSpec {
    /// Even total degree 2d of the candidate V.
    pub degree: u32,
    pub epsilon: f64,
    pub formulation: Formulation,
    pub ambiguity: AmbiguityConfig,
    pub epsilon_sign_mode: EpsilonSignMode,
}

impl SosSynthesisSpec {
    pub fn new(formulation: Formulation, ambiguity: AmbiguityConfig) -> Self {
        SosSynthesisSpec {
            degree: 4,
            epsilon: 1e-3,
            formulation,
            ambiguity,
            epsilon_sign_mode: EpsilonSignMode::Derivation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverDiagnostics {
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub duality_gap: f64,
}

#[derive(Debug, Clone)]
pub struct SosLyapunovResult {
    /// The synthesized candidate; no constant term.
    pub v: Polynomial,
    /// One Gram certificate per SOS constraint, in program order.
    pub certificates: Vec<GramCertificate>,
    /// Verification verdict for each certificate against its instantiated
    /// constraint polynomial (tolerance 1e-6).
    pub verifications: Vec<Verdict>,
    /// Uniform PSD feasibility margin t*.
    pub margin: f64,
    pub diagnostics: SolverDiagnostics,
}

/// Feasibility is an outcome, not an error: infeasible programs are a normal
/// answer for unstable or insufficiently robust systems.
#[derive(Debug, Clone)]
pub enum SynthOutcome {
    Feasible(SosLyapunovResult),
    Infeasible { margin: f64, status: SolveStatus, diagnostics: SolverDiagnostics },
}

impl SynthOutcome {
    pub fn feasible(&self) -> Option<&SosLyapunovResult> {
        match self {
            SynthOutcome::Feasible(r) => Some(r),
            SynthOutcome::Infeasible { .. } => None,
        }
    }
}

fn poly_fields(system: &UncertainSystem) -> Result<(&PolyVector, Vec<&PolyVector>), SynthError> {
    let f = system.f.as_poly().ok_or(SynthError::NonPolynomialField)?;
    let d: Option<Vec<&PolyVector>> = system.d_columns.iter().map(|c| c.as_poly()).collect();
    Ok((f, d.ok_or(SynthError::NonPolynomialField)?))
}

/// Candidate monomials x^k for k of degree 1..2d (c₀ = 0 by construction);
/// decision variable k is the coefficient of `basis[k]`.
fn candidate_basis(n_vars: usize, degree: u32) -> Vec<Monomial> {
    monomial_basis_range(n_vars, 1, degree)
}

fn round_up_even(d: u32) -> u32 {
    d + d % 2
}

/// The positivity constraint V − ε‖x‖² ∈ SOS as a parametric polynomial.
fn positivity_constraint(
    basis: &[Monomial],
    n_vars: usize,
    epsilon: f64,
    degree: u32,
) -> SosConstraint {
    let linear_parts = basis
        .iter()
        .enumerate()
        .map(|(k, m)| (k, Polynomial::monomial(m.clone(), 1.0)))
        .collect();
    SosConstraint {
        poly: ParamPolynomial {
            constant_part: Polynomial::norm_sq(n_vars).scale(-epsilon),
            linear_parts,
        },
        degree_bound: round_up_even(degree),
    }
}

/// ∇(x^k)ᵀ·field for every candidate monomial, i.e. the decision-linear parts
/// of V̇ along `field`.
fn lie_parts(basis: &[Monomial], field: &PolyVector) -> Vec<Polynomial> {
    basis
        .iter()
        .map(|m| {
            Polynomial::monomial(m.clone(), 1.0)
                .lie_derivative(field)
                .expect("arity checked at construction")
        })
        .collect()
}

/// Field f + Σⱼ dⱼ·ξⱼ for a fixed sample ξ.
fn sampled_field(f: &PolyVector, d: &[&PolyVector], xi: &[f64]) -> PolyVector {
    let mut out = f.clone();
    for (col, &w) in d.iter().zip(xi) {
        out = out.add(&col.scale(w)).expect("arity checked at construction");
    }
    out
}

fn derivative_constraint(parts: Vec<Polynomial>, constant: Polynomial) -> SosConstraint {
    let degree = parts
        .iter()
        .map(|p| p.degree())
        .chain([constant.degree()])
        .max()
        .unwrap_or(0);
    SosConstraint {
        poly: ParamPolynomial {
            constant_part: constant,
            linear_parts: parts.into_iter().enumerate().collect(),
        },
        degree_bound: round_up_even(degree),
    }
}

fn build_program(
    system: &UncertainSystem,
    samples: Option<&SampleSet>,
    spec: &SosSynthesisSpec,
) -> Result<SosProgram, SynthError> {
    if spec.degree == 0 || spec.degree % 2 != 0 {
        return Err(SynthError::BadDegree(spec.degree));
    }
    let (f, d) = poly_fields(system)?;
    let n = system.n;
    let basis = candidate_basis(n, spec.degree);
    let eps_ball = Polynomial::norm_sq(n).scale(spec.epsilon);

    let mut sos_constraints = vec![positivity_constraint(&basis, n, spec.epsilon, spec.degree)];

    match spec.formulation {
        Formulation::Baseline => {
            // −V̇(x) − ε‖x‖² ∈ SOS at the nominal field (ξ = 0).
            let parts = lie_parts(&basis, f).into_iter().map(|p| p.scale(-1.0)).collect();
            sos_constraints.push(derivative_constraint(parts, eps_ball.scale(-1.0)));
        }
        Formulation::Cc => {
            let samples = samples.expect("cc requires samples");
            // −V̇(x, ξᵢ) − ε‖x‖² ∈ SOS for each of the N offline samples.
            for xi in samples.samples() {
                let field = sampled_field(f, &d, xi);
                let parts =
                    lie_parts(&basis, &field).into_iter().map(|p| p.scale(-1.0)).collect();
                sos_constraints.push(derivative_constraint(parts, eps_ball.scale(-1.0)));
            }
        }
        Formulation::Drcc => {
            let samples = samples.expect("drcc requires samples");
            let r = spec.ambiguity.radius;
            let beta = spec.ambiguity.beta;
            let eps_sign = match spec.epsilon_sign_mode {
                EpsilonSignMode::Derivation => -1.0,
                EpsilonSignMode::PaperLiteral => 1.0,
            };
            // ±r·∇Vᵀdⱼ − β·V̇(x, ξᵢ) ∓ β·ε‖x‖² ∈ SOS: 2Nm constraints.
            for xi in samples.samples() {
                let field = sampled_field(f, &d, xi);
                let vdot_parts = lie_parts(&basis, &field);
                for col in &d {
                    let lip_parts = lie_parts(&basis, col);
                    for sign in [1.0, -1.0] {
                        let parts = vdot_parts
                            .iter()
                            .zip(&lip_parts)
                            .map(|(vd, lp)| {
                                lp.scale(sign * r)
                                    .add(&vd.scale(-beta))
                                    .expect("arity checked at construction")
                            })
                            .collect();
                        sos_constraints
                            .push(derivative_constraint(parts, eps_ball.scale(eps_sign * beta)));
                    }
                }
            }
        }
    }

    Ok(SosProgram {
        n_decision_vars: basis.len(),
        sos_constraints,
        linear_constraints: vec![],
    })
}

fn check_beta(samples: &SampleSet, cfg: &AmbiguityConfig) -> Result<(), SynthError> {
    if cfg.beta > 1.0 / samples.count() as f64 {
        return Err(SynthError::BetaExceedsInvN { beta: cfg.beta, n: samples.count() });
    }
    Ok(())
}

fn run(
    system: &UncertainSystem,
    samples: Option<&SampleSet>,
    spec: &SosSynthesisSpec,
    config: &SolverConfig,
) -> Result<SynthOutcome, SynthError> {
    let program = build_program(system, samples, spec)?;
    let compiled = compile(&program)?;
    let result = solve_feasibility(&compiled, config)?;
    let diagnostics = SolverDiagnostics {
        status: result.solution.status,
        iterations: result.solution.iterations,
        primal_residual: result.solution.primal_residual,
        dual_residual: result.solution.dual_residual,
        duality_gap: result.solution.duality_gap,
    };
    if !result.feasible {
        return Ok(SynthOutcome::Infeasible {
            margin: result.margin,
            status: result.solution.status,
            diagnostics,
        });
    }
    let (mut theta, certificates) = extract_certificates(&compiled, &result)?;
    // Zero out solver noise in the coefficients: structurally-zero entries
    // come back as ~1e-14 values that would otherwise reappear as spurious
    // (and unrepresentable) monomials in V̇.
    let scale = theta.iter().fold(0.0f64, |a, t| a.max(t.abs()));
    for t in &mut theta {
        if t.abs() < 1e-10 * scale {
            *t = 0.0;
        }
    }
    let basis = candidate_basis(system.n, spec.degree);
    let v = Polynomial::from_terms(
        system.n,
        basis.into_iter().zip(theta.iter().copied()),
    );
    let verifications = program
        .sos_constraints
        .iter()
        .zip(&certificates)
        .map(|(c, cert)| verify_certificate(&c.poly.instantiate(&theta), cert, 1e-6))
        .collect();
    Ok(SynthOutcome::Feasible(SosLyapunovResult {
        v,
        certificates,
        verifications,
        margin: result.margin,
        diagnostics,
    }))
}

/// Nominal SOS search (ξ = 0): V − ε‖x‖² ∈ SOS and −V̇ − ε‖x‖² ∈ SOS.
pub fn synth_baseline(
    system: &UncertainSystem,
    spec: &SosSynthesisSpec,
    config: &SolverConfig,
) -> Result<SynthOutcome, SynthError> {
    run(system, None, spec, config)
}

/// Chance-constrained SOS: one derivative constraint per offline sample.
pub fn synth_cc(
    system: &UncertainSystem,
    samples: &SampleSet,
    spec: &SosSynthesisSpec,
    config: &SolverConfig,
) -> Result<SynthOutcome, SynthError> {
    check_beta(samples, &spec.ambiguity)?;
    run(system, Some(samples), spec, config)
}

/// Distributionally robust SOS: the positivity constraint plus 2Nm signed
/// derivative constraints.
pub fn synth_drcc(
    system: &UncertainSystem,
    samples: &SampleSet,
    spec: &SosSynthesisSpec,
    config: &SolverConfig,
) -> Result<SynthOutcome, SynthError> {
    check_beta(samples, &spec.ambiguity)?;
    run(system, Some(samples), spec, config)
}

/// Textual certificate file: the candidate V followed by each Gram
/// certificate (basis monomials as exponent rows, then the Gram matrix
/// row-major).
pub fn serialize_result(result: &SosLyapunovResult) -> String {
    let mut out = String::new();
    out.push_str(&result.v.serialize());
    out.push_str(&format!("certificates {}\n", result.certificates.len()));
    for cert in &result.certificates {
        out.push_str(&format!("basis {}\n", cert.basis.len()));
        for m in &cert.basis {
            let row: Vec<String> = m.exponents().iter().map(|e| e.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out.push_str("gram\n");
        for i in 0..cert.gram.nrows() {
            let row: Vec<String> =
                (0..cert.gram.ncols()).map(|j| format!("{:?}", cert.gram[(i, j)])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out
}
