//! Benchmark uncertain systems and the disturbance/state sampling utilities:
//! the two-dimensional polynomial system (two disturbance-structure cases), an
//! inverted pendulum with both exact trigonometric and Taylor-truncated
//! polynomial dynamics, and seeded, substream-splittable samplers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{Monomial, PolyVector, Polynomial};
use crate::uncertainty::SampleSet;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid case id {0}: expected 1 or 2")]
    InvalidCase(u32),
    #[error("invalid disturbance spec: {0}")]
    InvalidSpec(String),
}

/// Physical constants of the pendulum benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub g: f64,
    pub m: f64,
    pub l: f64,
    pub b: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams { g: 9.81, m: 1.0, l: 0.5, b: 0.1 }
    }
}

/// A vector field: either an explicit sparse polynomial or a named closed-form
/// (trigonometric) field. Named variants keep systems `Clone + Debug` and
/// deterministic to serialize.
#[derive(Debug, Clone)]
pub enum Field {
    Poly(PolyVector),
    /// (θ, θ̇) ↦ (θ̇, (−mgl·sinθ − bθ̇)/(ml²))
    PendulumDrift(PendulumParams),
    /// First disturbance column: (0, −0.05·bθ̇/(ml²))
    PendulumD1(PendulumParams),
    /// Second disturbance column: (0, −0.05·mgl·sinθ/(ml²))
    PendulumD2(PendulumParams),
}

impl Field {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Field::Poly(pv) => pv.eval(x).expect("arity checked at construction"),
            Field::PendulumDrift(p) => {
                let ml2 = p.m * p.l * p.l;
                vec![x[1], (-p.m * p.g * p.l * x[0].sin() - p.b * x[1]) / ml2]
            }
            Field::PendulumD1(p) => {
                let ml2 = p.m * p.l * p.l;
                vec![0.0, -0.05 * p.b * x[1] / ml2]
            }
            Field::PendulumD2(p) => {
                let ml2 = p.m * p.l * p.l;
                vec![0.0, -0.05 * p.m * p.g * p.l * x[0].sin() / ml2]
            }
        }
    }

    pub fn as_poly(&self) -> Option<&PolyVector> {
        match self {
            Field::Poly(pv) => Some(pv),
            _ => None,
        }
    }
}

/// ẋ = f(x) + Σⱼ dⱼ(x)·ξⱼ with equilibrium at the origin.
#[derive(Debug, Clone)]
pub struct UncertainSystem {
    pub name: String,
    /// State dimension.
    pub n: usize,
    /// Disturbance dimension (number of columns of d).
    pub m: usize,
    pub f: Field,
    pub d_columns: Vec<Field>,
    /// Axis-aligned region of interest, one (lo, hi) pair per state.
    pub region: Vec<(f64, f64)>,
}

impl UncertainSystem {
    fn assert_equilibrium(&self) {
        let zero = vec![0.0; self.n];
        for v in self.f.eval(&zero) {
            assert!(v.abs() <= 1e-12, "{}: f(0) != 0", self.name);
        }
    }

    pub fn eval_f(&self, x: &[f64]) -> Vec<f64> {
        self.f.eval(x)
    }

    /// Columns dⱼ(x) stacked as rows of the returned Vec (one Vec per column).
    pub fn eval_d_columns(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.d_columns.iter().map(|c| c.eval(x)).collect()
    }

    /// f(x) + Σⱼ dⱼ(x)·ξⱼ.
    pub fn eval_rhs(&self, x: &[f64], xi: &[f64]) -> Vec<f64> {
        assert_eq!(xi.len(), self.m, "{}: xi length mismatch", self.name);
        let mut out = self.f.eval(x);
        for (j, col) in self.d_columns.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(col.eval(x)) {
                *o += v * xi[j];
            }
        }
        out
    }

    /// True when every field is an explicit polynomial (SOS-compatible).
    pub fn is_polynomial(&self) -> bool {
        self.f.as_poly().is_some() && self.d_columns.iter().all(|c| c.as_poly().is_some())
    }

    /// Ad-hoc polynomial system; f must vanish at the origin.
    pub fn from_poly(
        name: &str,
        f: PolyVector,
        d_columns: Vec<PolyVector>,
        region: Vec<(f64, f64)>,
    ) -> Result<Self, BenchError> {
        let n = region.len();
        if f.components().len() != n || d_columns.iter().any(|c| c.components().len() != n) {
            return Err(BenchError::InvalidSpec(format!(
                "{name}: field dimensions do not match region dimension {n}"
            )));
        }
        let sys = UncertainSystem {
            name: name.to_string(),
            n,
            m: d_columns.len(),
            f: Field::Poly(f),
            d_columns: d_columns.into_iter().map(Field::Poly).collect(),
            region,
        };
        sys.assert_equilibrium();
        Ok(sys)
    }
}

fn poly2(terms: Vec<(Vec<u32>, f64)>) -> Polynomial {
    Polynomial::from_terms(2, terms.into_iter().map(|(e, c)| (Monomial::new(e), c)))
}

/// The two-dimensional polynomial benchmark:
/// f = (−½x₁³ − (3/2)x₁² − x₂, 6x₁ − x₂), region [−2,2]².
///
/// Case 1: d₁ = −(x₁, x₂)ᵀ, d₂ = −(x₂, 0)ᵀ.
/// Case 2: d₁ = −(x₁³+x₂, x₂)ᵀ, d₂ = −(x₂, x₁)ᵀ.
pub fn make_poly_system(case: u32) -> Result<UncertainSystem, BenchError> {
    let f = PolyVector::new(vec![
        poly2(vec![(vec![3, 0], -0.5), (vec![2, 0], -1.5), (vec![0, 1], -1.0)]),
        poly2(vec![(vec![1, 0], 6.0), (vec![0, 1], -1.0)]),
    ]);
    let d_columns = match case {
        1 => vec![
            PolyVector::new(vec![
                poly2(vec![(vec![1, 0], -1.0)]),
                poly2(vec![(vec![0, 1], -1.0)]),
            ]),
            PolyVector::new(vec![poly2(vec![(vec![0, 1], -1.0)]), Polynomial::zero(2)]),
        ],
        2 => vec![
            PolyVector::new(vec![
                poly2(vec![(vec![3, 0], -1.0), (vec![0, 1], -1.0)]),
                poly2(vec![(vec![0, 1], -1.0)]),
            ]),
            PolyVector::new(vec![
                poly2(vec![(vec![0, 1], -1.0)]),
                poly2(vec![(vec![1, 0], -1.0)]),
            ]),
        ],
        other => return Err(BenchError::InvalidCase(other)),
    };
    let sys = UncertainSystem {
        name: format!("poly-case{case}"),
        n: 2,
        m: 2,
        f: Field::Poly(f),
        d_columns: d_columns.into_iter().map(Field::Poly).collect(),
        region: vec![(-2.0, 2.0), (-2.0, 2.0)],
    };
    sys.assert_equilibrium();
    Ok(sys)
}

/// Pendulum with exact trigonometric dynamics (used by the NN path):
/// state (θ, θ̇), region [−π, π] × [−4, 4].
pub fn make_pendulum() -> UncertainSystem {
    let p = PendulumParams::default();
    let sys = UncertainSystem {
        name: "pendulum".to_string(),
        n: 2,
        m: 2,
        f: Field::PendulumDrift(p),
        d_columns: vec![Field::PendulumD1(p), Field::PendulumD2(p)],
        region: vec![(-std::f64::consts::PI, std::f64::consts::PI), (-4.0, 4.0)],
    };
    sys.assert_equilibrium();
    sys
}

/// Odd Taylor truncation of sin θ up to `degree` (degree must be odd).
fn sin_taylor(degree: u32) -> Polynomial {
    assert!(degree % 2 == 1, "sin truncation degree must be odd");
    let mut p = Polynomial::zero(2);
    let mut coeff = 1.0;
    let mut k = 1u32;
    while k <= degree {
        p.add_term(Monomial::new(vec![k, 0]), coeff);
        coeff *= -1.0 / ((k + 1) as f64 * (k + 2) as f64);
        k += 2;
    }
    p
}

/// Pendulum with sin θ replaced by its odd Taylor truncation (used by the SOS
/// path, which needs polynomial dynamics).
pub fn make_pendulum_poly(sin_degree: u32) -> UncertainSystem {
    let p = PendulumParams::default();
    let ml2 = p.m * p.l * p.l;
    let sin_p = sin_taylor(sin_degree);
    let f = PolyVector::new(vec![
        poly2(vec![(vec![0, 1], 1.0)]),
        sin_p
            .scale(-p.m * p.g * p.l / ml2)
            .add(&poly2(vec![(vec![0, 1], -p.b / ml2)]))
            .unwrap(),
    ]);
    let d1 = PolyVector::new(vec![
        Polynomial::zero(2),
        poly2(vec![(vec![0, 1], -0.05 * p.b / ml2)]),
    ]);
    let d2 = PolyVector::new(vec![
        Polynomial::zero(2),
        sin_p.scale(-0.05 * p.m * p.g * p.l / ml2),
    ]);
    let sys = UncertainSystem {
        name: format!("pendulum-poly-sin{sin_degree}"),
        n: 2,
        m: 2,
        f: Field::Poly(f),
        d_columns: vec![Field::Poly(d1), Field::Poly(d2)],
        region: vec![(-std::f64::consts::PI, std::f64::consts::PI), (-4.0, 4.0)],
    };
    sys.assert_equilibrium();
    sys
}

/// Componentwise-independent disturbance distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DisturbanceSpec {
    /// Per-component (μ, σ) with σ > 0.
    Gaussian { params: Vec<(f64, f64)> },
    /// Per-component (a, b) with a < b.
    Uniform { params: Vec<(f64, f64)> },
}

impl DisturbanceSpec {
    pub fn dim(&self) -> usize {
        match self {
            DisturbanceSpec::Gaussian { params } | DisturbanceSpec::Uniform { params } => {
                params.len()
            }
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        match self {
            DisturbanceSpec::Gaussian { params } => {
                if params.is_empty() {
                    return Err(BenchError::InvalidSpec("empty parameter list".into()));
                }
                for &(_, sigma) in params {
                    if !(sigma > 0.0) {
                        return Err(BenchError::InvalidSpec(format!("sigma {sigma} not > 0")));
                    }
                }
            }
            DisturbanceSpec::Uniform { params } => {
                if params.is_empty() {
                    return Err(BenchError::InvalidSpec("empty parameter list".into()));
                }
                for &(a, b) in params {
                    if !(a < b) {
                        return Err(BenchError::InvalidSpec(format!("bounds [{a}, {b}] empty")));
                    }
                }
            }
        }
        Ok(())
    }

    /// One draw from the given stream.
    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            DisturbanceSpec::Gaussian { params } => params
                .iter()
                .map(|&(mu, sigma)| Normal::new(mu, sigma).unwrap().sample(rng))
                .collect(),
            DisturbanceSpec::Uniform { params } => params
                .iter()
                .map(|&(a, b)| Uniform::new(a, b).sample(rng))
                .collect(),
        }
    }
}

/// Seeded substream: same seed, distinct stream index. Streams are
/// statistically independent and safe to draw from concurrently.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Deterministic sample set of `count` draws from `spec`.
pub fn sample_disturbances(
    spec: &DisturbanceSpec,
    count: usize,
    seed: u64,
) -> Result<SampleSet, BenchError> {
    assert!(count >= 1, "count must be >= 1");
    spec.validate()?;
    let mut rng = substream(seed, 0);
    let samples: Vec<Vec<f64>> = (0..count).map(|_| spec.draw(&mut rng)).collect();
    Ok(SampleSet::new(samples).expect("draws share the distribution dimension"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridMode {
    UniformRandom,
    Lattice,
}

/// `count` states in the axis-aligned `region`, deterministic given `seed`.
/// Lattice mode builds the smallest near-square lattice with at least `count`
/// points (endpoints included) and truncates to `count`.
pub fn grid_states(
    region: &[(f64, f64)],
    count: usize,
    mode: GridMode,
    seed: u64,
) -> Vec<Vec<f64>> {
    assert!(count >= 1, "count must be >= 1");
    let n = region.len();
    match mode {
        GridMode::UniformRandom => {
            let mut rng = substream(seed, 0);
            (0..count)
                .map(|_| {
                    region
                        .iter()
                        .map(|&(lo, hi)| rng.gen_range(lo..hi))
                        .collect()
                })
                .collect()
        }
        GridMode::Lattice => {
            let mut k = 1usize;
            while k.pow(n as u32) < count {
                k += 1;
            }
            let coords: Vec<Vec<f64>> = region
                .iter()
                .map(|&(lo, hi)| {
                    (0..k)
                        .map(|i| {
                            if k == 1 {
                                0.5 * (lo + hi)
                            } else {
                                lo + (hi - lo) * i as f64 / (k - 1) as f64
                            }
                        })
                        .collect()
                })
                .collect();
            let mut out = Vec::with_capacity(count);
            let mut idx = vec![0usize; n];
            'outer: loop {
                out.push((0..n).map(|a| coords[a][idx[a]]).collect());
                if out.len() == count {
                    break;
                }
                for a in (0..n).rev() {
                    idx[a] += 1;
                    if idx[a] < k {
                        continue 'outer;
                    }
                    idx[a] = 0;
                }
                break;
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_system_case1_values() {
        let sys = make_poly_system(1).unwrap();
        assert_eq!(sys.eval_f(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(sys.eval_f(&[1.0, 1.0]), vec![-3.0, 5.0]);
        let d = sys.eval_d_columns(&[1.0, 2.0]);
        assert_eq!(d[0], vec![-1.0, -2.0]);
        assert_eq!(d[1], vec![-2.0, 0.0]);
    }

    #[test]
    fn poly_system_case2_values() {
        let sys = make_poly_system(2).unwrap();
        let d = sys.eval_d_columns(&[1.0, 1.0]);
        assert_eq!(d[0], vec![-2.0, -1.0]);
        assert_eq!(d[1], vec![-1.0, -1.0]);
        assert!(matches!(make_poly_system(3), Err(BenchError::InvalidCase(3))));
    }

    #[test]
    fn rhs_combines_columns() {
        let sys = make_poly_system(1).unwrap();
        let x = [1.0, 1.0];
        let xi = [2.0, -1.0];
        // f + 2*d1 - d2 = (-3,5) + 2*(-1,-1) - (-1,0) = (-4, 3)
        assert_eq!(sys.eval_rhs(&x, &xi), vec![-4.0, 3.0]);
    }

    #[test]
    fn pendulum_values() {
        let sys = make_pendulum();
        assert_eq!(sys.eval_f(&[0.0, 0.0]), vec![0.0, 0.0]);
        let f = sys.eval_f(&[std::f64::consts::FRAC_PI_2, 0.0]);
        assert!((f[1] - -19.62).abs() < 1e-12);
        // sin 0 = 0 makes the second disturbance column vanish at θ = 0.
        let d = sys.eval_d_columns(&[0.0, 3.0]);
        assert_eq!(d[1], vec![0.0, 0.0]);
        assert!(!sys.is_polynomial());
    }

    #[test]
    fn pendulum_poly_tracks_trig_near_origin() {
        let exact = make_pendulum();
        let approx = make_pendulum_poly(3);
        assert!(approx.is_polynomial());
        let x = [0.1, 0.5];
        let fe = exact.eval_f(&x);
        let fa = approx.eval_f(&x);
        // θ − θ³/6 truncation error at θ=0.1 is ≈ θ⁵/120 ≈ 8e-8 before scaling.
        assert!((fe[1] - fa[1]).abs() < 1e-4);
        assert_eq!(approx.eval_f(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn sin_taylor_matches_series() {
        let p = sin_taylor(5);
        let x = [0.7, 0.0];
        let expect = 0.7 - 0.7f64.powi(3) / 6.0 + 0.7f64.powi(5) / 120.0;
        assert!((p.eval(&x).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn poly_fields_roundtrip_serialization() {
        for case in [1, 2] {
            let sys = make_poly_system(case).unwrap();
            for field in std::iter::once(&sys.f).chain(&sys.d_columns) {
                let pv = field.as_poly().unwrap();
                for comp in pv.components() {
                    let text = comp.serialize();
                    let back = Polynomial::deserialize(&text).unwrap();
                    assert_eq!(&back, comp);
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = DisturbanceSpec::Gaussian { params: vec![(5.0, 1.0), (3.0, 1.0)] };
        let a = sample_disturbances(&spec, 9, 42).unwrap();
        let b = sample_disturbances(&spec, 9, 42).unwrap();
        assert_eq!(a.samples(), b.samples());
        let c = sample_disturbances(&spec, 9, 43).unwrap();
        assert_ne!(a.samples(), c.samples());
    }

    #[test]
    fn degenerate_uniform_rejected() {
        let spec = DisturbanceSpec::Uniform { params: vec![(1.0, 1.0)] };
        assert!(sample_disturbances(&spec, 1, 0).is_err());
    }

    #[test]
    fn gaussian_mean_law_of_large_numbers() {
        let spec = DisturbanceSpec::Gaussian { params: vec![(5.0, 1.0)] };
        let samples = sample_disturbances(&spec, 100_000, 7).unwrap();
        let mean: f64 =
            samples.samples().iter().map(|s| s[0]).sum::<f64>() / samples.count() as f64;
        assert!((mean - 5.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn lattice_corners() {
        let pts = grid_states(&[(0.0, 1.0), (0.0, 1.0)], 4, GridMode::Lattice, 0);
        assert_eq!(
            pts,
            vec![
                vec![0.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![1.0, 1.0]
            ]
        );
    }

    #[test]
    fn uniform_random_containment_and_mean() {
        let region = [(-2.0, 2.0), (0.0, 4.0)];
        let pts = grid_states(&region, 10_000, GridMode::UniformRandom, 11);
        assert_eq!(pts.len(), 10_000);
        for p in &pts {
            for (v, &(lo, hi)) in p.iter().zip(region.iter()) {
                assert!(*v >= lo && *v < hi);
            }
        }
        let mean1: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
        let mean2: f64 = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64;
        // within 2% of the side length (= 0.08) of the center
        assert!(mean1.abs() < 0.08);
        assert!((mean2 - 2.0).abs() < 0.08);
    }

    #[test]
    fn substreams_differ() {
        let mut a = substream(1, 0);
        let mut b = substream(1, 1);
        let xa: f64 = a.gen();
        let xb: f64 = b.gen();
        assert_ne!(xa, xb);
    }
}
