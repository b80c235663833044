//! Lyapunov candidate abstraction shared by the polynomial (SOS) and neural
//! network paths: a candidate supplies its value and state gradient, which is
//! all the uncertainty and validation machinery needs.

use crate::poly::{PolyError, PolyVector, Polynomial};

/// A differentiable Lyapunov candidate V : R^n -> R.
pub trait LyapunovCandidate: Send + Sync {
    /// State dimension n.
    fn n_vars(&self) -> usize;

    /// V(x).
    fn value(&self, x: &[f64]) -> f64;

    /// ∇V(x).
    fn grad(&self, x: &[f64]) -> Vec<f64>;
}

/// Polynomial candidate with a precomputed gradient.
#[derive(Debug, Clone)]
pub struct PolyCandidate {
    poly: Polynomial,
    grad: PolyVector,
}

impl PolyCandidate {
    pub fn new(poly: Polynomial) -> Result<Self, PolyError> {
        let grad = poly.grad();
        Ok(PolyCandidate { poly, grad })
    }

    pub fn polynomial(&self) -> &Polynomial {
        &self.poly
    }

    pub fn gradient(&self) -> &PolyVector {
        &self.grad
    }
}

impl LyapunovCandidate for PolyCandidate {
    fn n_vars(&self) -> usize {
        self.poly.n_vars()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.poly.eval(x).expect("arity checked at construction")
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.grad.eval(x).expect("arity checked at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::Monomial;

    #[test]
    fn poly_candidate_value_and_grad() {
        // V = x1^2 + 3 x1 x2
        let v = Polynomial::from_terms(
            2,
            vec![
                (Monomial::new(vec![2, 0]), 1.0),
                (Monomial::new(vec![1, 1]), 3.0),
            ],
        );
        let cand = PolyCandidate::new(v).unwrap();
        let x = [2.0, -1.0];
        assert_eq!(cand.value(&x), 4.0 - 6.0);
        assert_eq!(cand.grad(&x), vec![2.0 * 2.0 + 3.0 * -1.0, 3.0 * 2.0]);
        assert_eq!(cand.n_vars(), 2);
    }
}
