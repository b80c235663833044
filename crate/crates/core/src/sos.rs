//! Sum-of-squares programs over decision-parametrized polynomials, compiled
//! to block SDPs via Gram-matrix parametrization.
//!
//! A constraint polynomial is affine in the decision parameters:
//! `p(x; theta) = p0(x) + sum_k theta_k * p_k(x)`. Each SOS membership
//! constraint becomes one PSD Gram block over the half-degree monomial
//! basis; coefficient matching yields the equality rows. Decision variables
//! enter the SDP as differences of two nonnegative scalar blocks.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::poly::{monomial_basis_range, Monomial, Polynomial};
use crate::sdp::{self, EqEntry, Equality, SdpProblem, SdpSolution, SolveStatus, SolverConfig};

#[derive(Debug, Error)]
pub enum SosError {
    #[error("constraint {0} has odd degree bound {1}")]
    OddDegree(usize, u32),
    #[error("constraint {0} has an empty monomial basis")]
    EmptyBasis(usize),
    #[error("decision variable id {0} out of range")]
    BadVarId(usize),
    #[error("no certificate: solver status {0:?}")]
    NoCertificate(SolveStatus),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
}

/// `constant_part + sum_k theta_k * linear_parts[k]`, affine in the decision
/// vector theta.
#[derive(Debug, Clone)]
pub struct ParamPolynomial {
    pub constant_part: Polynomial,
    /// Pairs (decision variable id, polynomial multiplier); ids unique.
    pub linear_parts: Vec<(usize, Polynomial)>,
}

impl ParamPolynomial {
    pub fn constant(p: Polynomial) -> Self {
        ParamPolynomial { constant_part: p, linear_parts: Vec::new() }
    }

    pub fn n_vars(&self) -> usize {
        self.constant_part.n_vars()
    }

    pub fn degree(&self) -> u32 {
        self.linear_parts
            .iter()
            .map(|(_, p)| p.degree())
            .chain([self.constant_part.degree()])
            .max()
            .unwrap_or(0)
    }

    /// Substitute decision values, producing a concrete polynomial.
    pub fn instantiate(&self, theta: &[f64]) -> Polynomial {
        let mut out = self.constant_part.clone();
        for (k, p) in &self.linear_parts {
            out = out.add(&p.scale(theta[*k])).expect("arity");
        }
        out
    }

    /// True when the coefficient of `m` is identically zero in theta.
    fn coeff_identically_zero(&self, m: &Monomial) -> bool {
        self.constant_part.coefficient(m) == 0.0
            && self.linear_parts.iter().all(|(_, p)| p.coefficient(m) == 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct SosConstraint {
    pub poly: ParamPolynomial,
    /// Even total degree bound 2d for the Gram parametrization.
    pub degree_bound: u32,
}

#[derive(Debug, Clone)]
pub struct SosProgram {
    pub n_decision_vars: usize,
    pub sos_constraints: Vec<SosConstraint>,
    /// Affine equalities `sum coeff_k * theta_k = rhs` over decision vars.
    pub linear_constraints: Vec<(Vec<(usize, f64)>, f64)>,
}

/// PSD Gram certificate for one SOS constraint: `p(x) = z(x)^T Q z(x)`.
#[derive(Debug, Clone)]
pub struct GramCertificate {
    pub basis: Vec<Monomial>,
    pub gram: DMatrix<f64>,
}

impl GramCertificate {
    /// Expand `z(x)^T Q z(x)` back into a polynomial.
    pub fn expand(&self) -> Polynomial {
        let n_vars = self.basis.first().map_or(0, Monomial::n_vars);
        let mut out = Polynomial::zero(n_vars);
        for (a, ma) in self.basis.iter().enumerate() {
            for (b, mb) in self.basis.iter().enumerate() {
                out.add_term(ma.mul(mb), self.gram[(a, b)]);
            }
        }
        out
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.gram.nrows() == 0 {
            return 0.0;
        }
        self.gram
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub ok: bool,
    pub max_coeff_error: f64,
    pub min_eigenvalue: f64,
    /// Worst-matching monomial, when a coefficient mismatch exists.
    pub failing_monomial: Option<Monomial>,
}

/// Check that `cert` certifies `p` as SOS: coefficients of the expanded Gram
/// form match `p` within `tol` and the Gram matrix is PSD up to `-tol`.
pub fn verify_certificate(p: &Polynomial, cert: &GramCertificate, tol: f64) -> Verdict {
    let expanded = cert.expand();
    let mut max_err = 0.0f64;
    let mut failing = None;
    let mut monomials: BTreeSet<Monomial> = p.terms().map(|(m, _)| m.clone()).collect();
    monomials.extend(expanded.terms().map(|(m, _)| m.clone()));
    for m in &monomials {
        let err = (p.coefficient(m) - expanded.coefficient(m)).abs();
        if err > max_err {
            max_err = err;
            failing = Some(m.clone());
        }
    }
    let min_eig = cert.min_eigenvalue();
    Verdict {
        ok: max_err <= tol && min_eig >= -tol,
        max_coeff_error: max_err,
        min_eigenvalue: min_eig,
        failing_monomial: if max_err > tol { failing } else { None },
    }
}

/// Layout of a compiled program: which SDP blocks hold what.
#[derive(Debug, Clone)]
pub struct CompiledSos {
    pub sdp: SdpProblem,
    /// Half-degree monomial basis per SOS constraint.
    pub bases: Vec<Vec<Monomial>>,
    /// SDP block index of each Gram block.
    pub gram_blocks: Vec<usize>,
    /// (positive, negative) scalar block indices per decision variable.
    pub var_blocks: Vec<(usize, usize)>,
    /// Set when coefficient matching produced a row with an empty left-hand
    /// side and nonzero right-hand side (the program cannot be feasible).
    pub trivially_infeasible: bool,
}

/// Compile an SOS program to a block SDP.
///
/// Layout (deterministic): one Gram block per SOS constraint in program
/// order, then `(u_k, v_k)` scalar block pairs per decision variable with
/// `theta_k = u_k - v_k`. Equality rows are emitted per constraint in graded
/// lex order of the matched monomial.
pub fn compile(program: &SosProgram) -> Result<CompiledSos, SosError> {
    let mut block_dims = Vec::new();
    let mut bases = Vec::new();
    let mut gram_blocks = Vec::new();

    for (ci, c) in program.sos_constraints.iter().enumerate() {
        if c.degree_bound % 2 != 0 {
            return Err(SosError::OddDegree(ci, c.degree_bound));
        }
        for (k, _) in &c.poly.linear_parts {
            if *k >= program.n_decision_vars {
                return Err(SosError::BadVarId(*k));
            }
        }
        let n_vars = c.poly.n_vars();
        let half = c.degree_bound / 2;
        // A zero constant term forces every square to vanish at the origin,
        // so the constant monomial is dropped from the basis.
        let lo = if c.poly.coeff_identically_zero(&Monomial::constant(n_vars)) { 1 } else { 0 };
        let mut basis = monomial_basis_range(n_vars, lo, half);
        // Structural basis trim (facial reduction): if the coefficient of
        // m·m is identically zero and no other basis pair multiplies to it,
        // the Gram diagonal at m is pinned to zero, which forces the whole
        // row to vanish in any PSD Gram — so m can be removed outright.
        // Iterate until stable; removals can expose further pinned entries.
        loop {
            let mut removable = Vec::new();
            for (idx, m) in basis.iter().enumerate() {
                let sq = m.mul(m);
                if !c.poly.coeff_identically_zero(&sq) {
                    continue;
                }
                let other_pair = basis.iter().enumerate().any(|(a, ma)| {
                    basis[a..].iter().enumerate().any(|(boff, mb)| {
                        !(a == idx && a + boff == idx) && ma.mul(mb) == sq
                    })
                });
                if !other_pair {
                    removable.push(idx);
                }
            }
            if removable.is_empty() {
                break;
            }
            for idx in removable.into_iter().rev() {
                basis.remove(idx);
            }
        }
        if basis.is_empty() {
            return Err(SosError::EmptyBasis(ci));
        }
        gram_blocks.push(block_dims.len());
        block_dims.push(basis.len());
        bases.push(basis);
    }

    let mut var_blocks = Vec::new();
    for _ in 0..program.n_decision_vars {
        let u = block_dims.len();
        block_dims.push(1);
        let v = block_dims.len();
        block_dims.push(1);
        var_blocks.push((u, v));
    }

    let mut equalities = Vec::new();
    let mut seen_rows: BTreeSet<Vec<u8>> = BTreeSet::new();
    let mut trivially_infeasible = false;

    for (ci, c) in program.sos_constraints.iter().enumerate() {
        let basis = &bases[ci];
        let block = gram_blocks[ci];

        // Monomials to match: all pairwise basis products plus everything
        // appearing in the constraint polynomial.
        let mut gammas: BTreeSet<Monomial> = BTreeSet::new();
        for (a, ma) in basis.iter().enumerate() {
            for mb in &basis[a..] {
                gammas.insert(ma.mul(mb));
            }
        }
        gammas.extend(c.poly.constant_part.terms().map(|(m, _)| m.clone()));
        for (_, p) in &c.poly.linear_parts {
            gammas.extend(p.terms().map(|(m, _)| m.clone()));
        }

        for gamma in &gammas {
            let mut entries = Vec::new();
            for (a, ma) in basis.iter().enumerate() {
                for (boff, mb) in basis[a..].iter().enumerate() {
                    if ma.mul(mb) == *gamma {
                        // coeff 1.0 at (a,b) contributes Q_ab (+ Q_ba when a != b),
                        // exactly the sum over ordered pairs.
                        entries.push(EqEntry { block, row: a, col: a + boff, coeff: 1.0 });
                    }
                }
            }
            for (k, p) in &c.poly.linear_parts {
                let coeff = p.coefficient(gamma);
                if coeff != 0.0 {
                    let (u, v) = var_blocks[*k];
                    entries.push(EqEntry { block: u, row: 0, col: 0, coeff: -coeff });
                    entries.push(EqEntry { block: v, row: 0, col: 0, coeff });
                }
            }
            let rhs = c.poly.constant_part.coefficient(gamma);
            if entries.is_empty() {
                if rhs != 0.0 {
                    trivially_infeasible = true;
                    if std::env::var_os("DRLYAP_SOS_TRACE").is_some() { eprintln!("unrepresentable gamma {:?} rhs {rhs:e}", gamma.exponents()); }
                }
                continue;
            }
            // Exact duplicate rows (e.g. duplicated samples) would make the
            // Schur complement singular; keep the first occurrence.
            if seen_rows.insert(row_key(&entries, rhs)) {
                equalities.push(Equality { entries, rhs });
            }
        }
    }

    for (terms, rhs) in &program.linear_constraints {
        let mut entries = Vec::new();
        for (k, coeff) in terms {
            if *k >= program.n_decision_vars {
                return Err(SosError::BadVarId(*k));
            }
            let (u, v) = var_blocks[*k];
            entries.push(EqEntry { block: u, row: 0, col: 0, coeff: *coeff });
            entries.push(EqEntry { block: v, row: 0, col: 0, coeff: -*coeff });
        }
        if entries.is_empty() {
            if *rhs != 0.0 {
                trivially_infeasible = true;
            }
            continue;
        }
        if seen_rows.insert(row_key(&entries, *rhs)) {
            equalities.push(Equality { entries, rhs: *rhs });
        }
    }

    let sdp = SdpProblem::feasibility(block_dims, equalities);
    Ok(CompiledSos { sdp, bases, gram_blocks, var_blocks, trivially_infeasible })
}

fn row_key(entries: &[EqEntry], rhs: f64) -> Vec<u8> {
    let mut key = Vec::with_capacity(entries.len() * 20 + 8);
    for e in entries {
        key.extend_from_slice(&(e.block as u32).to_le_bytes());
        key.extend_from_slice(&(e.row as u16).to_le_bytes());
        key.extend_from_slice(&(e.col as u16).to_le_bytes());
        key.extend_from_slice(&e.coeff.to_bits().to_le_bytes());
    }
    key.extend_from_slice(&rhs.to_bits().to_le_bytes());
    key
}

/// Solve the compiled program as a max-margin feasibility problem.
pub fn solve_feasibility(
    compiled: &CompiledSos,
    config: &SolverConfig,
) -> Result<sdp::MarginResult, SosError> {
    if compiled.trivially_infeasible {
        // Build a degenerate answer without invoking the solver.
        let sol = SdpSolution {
            blocks: compiled
                .sdp
                .block_dims
                .iter()
                .map(|&d| DMatrix::zeros(d, d))
                .collect(),
            dual: nalgebra::DVector::zeros(compiled.sdp.equalities.len()),
            status: SolveStatus::Infeasible,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            duality_gap: f64::INFINITY,
            objective: f64::NEG_INFINITY,
            iterations: 0,
        };
        return Ok(sdp::MarginResult { margin: f64::NEG_INFINITY, feasible: false, solution: sol });
    }
    Ok(sdp::feasibility_margin(&compiled.sdp, &compiled.gram_blocks, config)?)
}

/// Read decision values and per-constraint Gram certificates from a
/// feasibility result. Errors when the margin verdict is infeasible.
pub fn extract_certificates(
    compiled: &CompiledSos,
    result: &sdp::MarginResult,
) -> Result<(Vec<f64>, Vec<GramCertificate>), SosError> {
    if !result.feasible {
        return Err(SosError::NoCertificate(result.solution.status));
    }
    let solution: &SdpSolution = &result.solution;
    let theta: Vec<f64> = compiled
        .var_blocks
        .iter()
        .map(|&(u, v)| solution.blocks[u][(0, 0)] - solution.blocks[v][(0, 0)])
        .collect();
    let certs = compiled
        .gram_blocks
        .iter()
        .zip(&compiled.bases)
        .map(|(&b, basis)| GramCertificate {
            basis: basis.clone(),
            gram: solution.blocks[b].clone(),
        })
        .collect();
    Ok((theta, certs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::monomial_basis;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sq_x1() -> Polynomial {
        Polynomial::monomial(Monomial::new(vec![2]), 1.0)
    }

    #[test]
    fn compile_perfect_square() {
        let program = SosProgram {
            n_decision_vars: 0,
            sos_constraints: vec![SosConstraint {
                poly: ParamPolynomial::constant(sq_x1()),
                degree_bound: 2,
            }],
            linear_constraints: vec![],
        };
        let compiled = compile(&program).unwrap();
        // Zero constant term: basis is {x1} only.
        assert_eq!(compiled.bases[0], vec![Monomial::new(vec![1])]);
        let res = solve_feasibility(&compiled, &SolverConfig::default()).unwrap();
        assert!(res.feasible);
        let (_, certs) = extract_certificates(&compiled, &res).unwrap();
        assert!((certs[0].gram[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn negative_square_is_infeasible() {
        let program = SosProgram {
            n_decision_vars: 0,
            sos_constraints: vec![SosConstraint {
                poly: ParamPolynomial::constant(sq_x1().scale(-1.0)),
                degree_bound: 2,
            }],
            linear_constraints: vec![],
        };
        let compiled = compile(&program).unwrap();
        let res = solve_feasibility(&compiled, &SolverConfig::default()).unwrap();
        assert!(!res.feasible);
        assert!(extract_certificates(&compiled, &res).is_err());
    }

    #[test]
    fn two_var_quadratic_certificate() {
        // 2x1^2 + 2x1x2 + 2x2^2 over basis {x1, x2}.
        let p = Polynomial::from_terms(
            2,
            [
                (Monomial::new(vec![2, 0]), 2.0),
                (Monomial::new(vec![1, 1]), 2.0),
                (Monomial::new(vec![0, 2]), 2.0),
            ],
        );
        let program = SosProgram {
            n_decision_vars: 0,
            sos_constraints: vec![SosConstraint {
                poly: ParamPolynomial::constant(p.clone()),
                degree_bound: 2,
            }],
            linear_constraints: vec![],
        };
        let compiled = compile(&program).unwrap();
        assert_eq!(compiled.bases[0].len(), 2);
        let res = solve_feasibility(&compiled, &SolverConfig::default()).unwrap();
        assert!(res.feasible);
        let (_, certs) = extract_certificates(&compiled, &res).unwrap();
        let verdict = verify_certificate(&p, &certs[0], 1e-6);
        assert!(verdict.ok, "verdict {verdict:?}");
        // Diagonal is pinned to 2, off-diagonal to 1.
        assert!((certs[0].gram[(0, 1)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn verify_examples() {
        let cert = GramCertificate {
            basis: vec![Monomial::new(vec![1])],
            gram: DMatrix::from_element(1, 1, 1.0),
        };
        assert!(verify_certificate(&sq_x1(), &cert, 1e-8).ok);

        let bad = GramCertificate {
            basis: vec![Monomial::new(vec![1])],
            gram: DMatrix::from_element(1, 1, 1.5),
        };
        let verdict = verify_certificate(&sq_x1(), &bad, 1e-8);
        assert!(!verdict.ok);
        assert!((verdict.max_coeff_error - 0.5).abs() < 1e-12);

        let hand = GramCertificate {
            basis: vec![Monomial::new(vec![1, 0]), Monomial::new(vec![0, 1])],
            gram: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
        };
        let p = Polynomial::from_terms(
            2,
            [
                (Monomial::new(vec![2, 0]), 2.0),
                (Monomial::new(vec![1, 1]), 2.0),
                (Monomial::new(vec![0, 2]), 2.0),
            ],
        );
        assert!(verify_certificate(&p, &hand, 1e-8).ok);
    }

    #[test]
    fn odd_degree_rejected() {
        let program = SosProgram {
            n_decision_vars: 0,
            sos_constraints: vec![SosConstraint {
                poly: ParamPolynomial::constant(sq_x1()),
                degree_bound: 3,
            }],
            linear_constraints: vec![],
        };
        assert!(matches!(compile(&program), Err(SosError::OddDegree(0, 3))));
    }

    #[test]
    fn compilation_is_deterministic() {
        let p = Polynomial::from_terms(
            2,
            [
                (Monomial::new(vec![2, 0]), 1.0),
                (Monomial::new(vec![0, 2]), 2.0),
                (Monomial::new(vec![0, 0]), 0.5),
            ],
        );
        let program = SosProgram {
            n_decision_vars: 1,
            sos_constraints: vec![SosConstraint {
                poly: ParamPolynomial {
                    constant_part: p,
                    linear_parts: vec![(0, Polynomial::norm_sq(2))],
                },
                degree_bound: 2,
            }],
            linear_constraints: vec![],
        };
        let a = compile(&program).unwrap();
        let b = compile(&program).unwrap();
        assert_eq!(a.sdp.block_dims, b.sdp.block_dims);
        assert_eq!(a.sdp.equalities.len(), b.sdp.equalities.len());
        for (ea, eb) in a.sdp.equalities.iter().zip(&b.sdp.equalities) {
            assert_eq!(ea, eb);
        }
    }

    fn random_poly(rng: &mut StdRng, n_vars: usize, degree: u32) -> Polynomial {
        let basis = monomial_basis(n_vars, degree, true);
        let mut terms = Vec::new();
        for m in basis {
            terms.push((m, rng.gen_range(-1.0..1.0)));
        }
        Polynomial::from_terms(n_vars, terms)
    }

    #[test]
    fn random_sums_of_squares_are_feasible() {
        let mut rng = StdRng::seed_from_u64(2024);
        for trial in 0..50 {
            // p = sum of (dim+1) random squares: generically interior.
            let n_vars = 2;
            let half = 2;
            let dim = monomial_basis(n_vars, half, true).len();
            let mut p = Polynomial::zero(n_vars);
            for _ in 0..=dim {
                let s = random_poly(&mut rng, n_vars, half);
                p = p.add(&s.mul(&s).unwrap()).unwrap();
            }
            let program = SosProgram {
                n_decision_vars: 0,
                sos_constraints: vec![SosConstraint {
                    poly: ParamPolynomial::constant(p.clone()),
                    degree_bound: 2 * half,
                }],
                linear_constraints: vec![],
            };
            let compiled = compile(&program).unwrap();
            let res = solve_feasibility(&compiled, &SolverConfig::default()).unwrap();
            assert!(res.feasible, "trial {trial}: SOS polynomial reported infeasible");
            let (_, certs) = extract_certificates(&compiled, &res).unwrap();
            let verdict = verify_certificate(&p, &certs[0], 1e-5);
            assert!(verdict.ok, "trial {trial}: round-trip failed: {verdict:?}");
        }
    }

    #[test]
    fn random_negative_polynomials_are_infeasible() {
        let mut rng = StdRng::seed_from_u64(77);
        let mut tested = 0;
        while tested < 50 {
            let p = random_poly(&mut rng, 2, 4);
            // Make the polynomial negative at a random point.
            let pt = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let val = p.eval(&pt).unwrap();
            let q = p
                .sub(&Polynomial::constant(2, val + rng.gen_range(0.1..1.0)))
                .unwrap();
            let program = SosProgram {
                n_decision_vars: 0,
                sos_constraints: vec![SosConstraint {
                    poly: ParamPolynomial::constant(q),
                    degree_bound: 4,
                }],
                linear_constraints: vec![],
            };
            let compiled = compile(&program).unwrap();
            let res = solve_feasibility(&compiled, &SolverConfig::default()).unwrap();
            assert!(!res.feasible, "negative polynomial reported feasible");
            tested += 1;
        }
    }
}
