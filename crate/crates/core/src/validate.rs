//! Monte Carlo certification harness: sample online disturbances from a
//! (possibly shifted) distribution, evaluate V̇ over fresh state grids, and
//! report violation rate and violation area.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{substream, BenchError, DisturbanceSpec, UncertainSystem};
use crate::candidate::LyapunovCandidate;
use rand::Rng;

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("realizations and points per realization must be >= 1")]
    EmptyRun,
    #[error("region dimension {got} does not match system dimension {expected}")]
    RegionDim { expected: usize, got: usize },
    #[error("disturbance dimension {got} does not match system input dimension {expected}")]
    DisturbanceDim { expected: usize, got: usize },
    #[error(transparent)]
    Bench(#[from] BenchError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub online: DisturbanceSpec,
    /// Realizations R of the online disturbance.
    pub realizations: usize,
    /// Fresh uniform-random state points P drawn per realization.
    pub points_per_realization: usize,
    pub region: Vec<(f64, f64)>,
    pub seed: u64,
    /// Points with ‖x‖ below this radius are skipped (reported if nonzero).
    #[serde(default)]
    pub exclusion_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationRecord {
    pub xi: Vec<f64>,
    pub positive_count: usize,
    pub max_vdot: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violation_rate: f64,
    pub violation_area: f64,
    pub records: Vec<RealizationRecord>,
    pub config: ValidationConfig,
}

/// V̇(x, ξ) for an arbitrary candidate under a fixed realization ξ.
fn vdot(candidate: &dyn LyapunovCandidate, system: &UncertainSystem, x: &[f64], xi: &[f64]) -> f64 {
    let grad = candidate.grad(x);
    let rhs = system.eval_rhs(x, xi);
    grad.iter().zip(&rhs).map(|(g, r)| g * r).sum()
}

/// Count of strict positive-V̇ points and the max V̇ over `states`.
pub fn evaluate_realization(
    candidate: &dyn LyapunovCandidate,
    system: &UncertainSystem,
    xi: &[f64],
    states: &[Vec<f64>],
    exclusion_radius: f64,
) -> Result<(usize, f64), ValidateError> {
    if xi.len() != system.m {
        return Err(ValidateError::DisturbanceDim { expected: system.m, got: xi.len() });
    }
    let mut positive = 0;
    let mut max_vdot = f64::NEG_INFINITY;
    for x in states {
        if x.len() != system.n {
            return Err(ValidateError::RegionDim { expected: system.n, got: x.len() });
        }
        if exclusion_radius > 0.0 {
            let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < exclusion_radius {
                continue;
            }
        }
        let v = vdot(candidate, system, x, xi);
        if v > 0.0 {
            positive += 1;
        }
        if v > max_vdot {
            max_vdot = v;
        }
    }
    Ok((positive, max_vdot))
}

fn run_realization(
    candidate: &dyn LyapunovCandidate,
    system: &UncertainSystem,
    cfg: &ValidationConfig,
    index: usize,
) -> Result<RealizationRecord, ValidateError> {
    // Substream 2i draws the disturbance, 2i+1 the state points; the two are
    // independent so P can change without perturbing the ξ* sequence.
    let mut xi_rng = substream(cfg.seed, 2 * index as u64);
    let xi = cfg.online.draw(&mut xi_rng);
    let mut state_rng = substream(cfg.seed, 2 * index as u64 + 1);
    let states: Vec<Vec<f64>> = (0..cfg.points_per_realization)
        .map(|_| cfg.region.iter().map(|&(lo, hi)| state_rng.gen_range(lo..hi)).collect())
        .collect();
    let (positive_count, max_vdot) =
        evaluate_realization(candidate, system, &xi, &states, cfg.exclusion_radius)?;
    Ok(RealizationRecord { xi, positive_count, max_vdot })
}

/// Benchmark-table protocol: per-realization rate and mean per-point area, each
/// realization independently seeded so parallel and sequential runs agree.
pub fn monte_carlo(
    candidate: &dyn LyapunovCandidate,
    system: &UncertainSystem,
    cfg: &ValidationConfig,
) -> Result<ValidationReport, ValidateError> {
    if cfg.realizations == 0 || cfg.points_per_realization == 0 {
        return Err(ValidateError::EmptyRun);
    }
    if cfg.region.len() != system.n {
        return Err(ValidateError::RegionDim { expected: system.n, got: cfg.region.len() });
    }
    cfg.online.validate().map_err(ValidateError::Bench)?;
    if cfg.online.dim() != system.m {
        return Err(ValidateError::DisturbanceDim {
            expected: system.m,
            got: cfg.online.dim(),
        });
    }
    let records: Vec<RealizationRecord> = (0..cfg.realizations)
        .into_par_iter()
        .map(|i| run_realization(candidate, system, cfg, i))
        .collect::<Result<_, _>>()?;
    let violated = records.iter().filter(|r| r.positive_count > 0).count();
    let violation_rate = violated as f64 / cfg.realizations as f64;
    let violation_area = records
        .iter()
        .map(|r| r.positive_count as f64 / cfg.points_per_realization as f64)
        .sum::<f64>()
        / cfg.realizations as f64;
    Ok(ValidationReport { violation_rate, violation_area, records, config: cfg.clone() })
}

/// Sequential reference implementation; exists to pin down the parallel
/// determinism property.
pub fn monte_carlo_sequential(
    candidate: &dyn LyapunovCandidate,
    system: &UncertainSystem,
    cfg: &ValidationConfig,
) -> Result<ValidationReport, ValidateError> {
    if cfg.realizations == 0 || cfg.points_per_realization == 0 {
        return Err(ValidateError::EmptyRun);
    }
    if cfg.region.len() != system.n {
        return Err(ValidateError::RegionDim { expected: system.n, got: cfg.region.len() });
    }
    cfg.online.validate().map_err(ValidateError::Bench)?;
    if cfg.online.dim() != system.m {
        return Err(ValidateError::DisturbanceDim {
            expected: system.m,
            got: cfg.online.dim(),
        });
    }
    let records: Vec<RealizationRecord> = (0..cfg.realizations)
        .map(|i| run_realization(candidate, system, cfg, i))
        .collect::<Result<_, _>>()?;
    let violated = records.iter().filter(|r| r.positive_count > 0).count();
    let violation_rate = violated as f64 / cfg.realizations as f64;
    let violation_area = records
        .iter()
        .map(|r| r.positive_count as f64 / cfg.points_per_realization as f64)
        .sum::<f64>()
        / cfg.realizations as f64;
    Ok(ValidationReport { violation_rate, violation_area, records, config: cfg.clone() })
}

/// Per-realization CSV: one row per realization with ξ* components, positive
/// count, and max V̇.
pub fn report_csv(report: &ValidationReport) -> String {
    let m = report.records.first().map_or(0, |r| r.xi.len());
    let mut out = String::from("realization");
    for j in 0..m {
        out.push_str(&format!(",xi_{}", j + 1));
    }
    out.push_str(",positive_count,max_vdot\n");
    for (i, r) in report.records.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in &r.xi {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(",{},{:?}\n", r.positive_count, r.max_vdot));
    }
    out
}

/// JSON summary: headline statistics plus the full resolved config echo.
/// Timestamps, if any, belong to the caller's metadata block — none here.
pub fn report_summary_json(report: &ValidationReport) -> String {
    let summary = serde_json::json!({
        "violation_rate": report.violation_rate,
        "violation_area": report.violation_area,
        "realizations": report.records.len(),
        "config": report.config,
    });
    serde_json::to_string_pretty(&summary).expect("report serialization")
}

/// Row-major (x₁, x₂, V̇) CSV over a `resolution × resolution` lattice with
/// endpoints included, for external heatmap plotting.
pub fn emit_heatgrid(
    candidate: &dyn LyapunovCandidate,
    system: &UncertainSystem,
    xi: &[f64],
    region: &[(f64, f64)],
    resolution: usize,
) -> Result<String, ValidateError> {
    assert!(resolution >= 2, "resolution must be >= 2 per axis");
    if region.len() != 2 || system.n != 2 {
        return Err(ValidateError::RegionDim { expected: 2, got: region.len() });
    }
    if xi.len() != system.m {
        return Err(ValidateError::DisturbanceDim { expected: system.m, got: xi.len() });
    }
    let coord = |axis: usize, k: usize| -> f64 {
        let (lo, hi) = region[axis];
        lo + (hi - lo) * k as f64 / (resolution - 1) as f64
    };
    let mut out = String::from("x1,x2,vdot\n");
    for i in 0..resolution {
        for j in 0..resolution {
            let x = [coord(0, i), coord(1, j)];
            let v = vdot(candidate, system, &x, xi);
            out.push_str(&format!("{:?},{:?},{v:?}\n", x[0], x[1]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::make_poly_system;
    use crate::candidate::PolyCandidate;
    use crate::poly::Polynomial;

    fn norm_sq_candidate() -> PolyCandidate {
        // V = x₁² + x₂²
        let v = Polynomial::from_terms(
            2,
            [
                (crate::poly::Monomial::new(vec![2, 0]), 1.0),
                (crate::poly::Monomial::new(vec![0, 2]), 1.0),
            ],
        );
        PolyCandidate::new(v).unwrap()
    }

    fn stable_linear() -> UncertainSystem {
        // ẋ = −x, no disturbance columns beyond a zero column.
        let f = crate::poly::PolyVector::new(vec![
            Polynomial::from_terms(2, [(crate::poly::Monomial::new(vec![1, 0]), -1.0)]),
            Polynomial::from_terms(2, [(crate::poly::Monomial::new(vec![0, 1]), -1.0)]),
        ]);
        let zero = crate::poly::PolyVector::zero(2, 2);
        UncertainSystem::from_poly("stable-linear", f, vec![zero], vec![(-2.0, 2.0); 2]).unwrap()
    }

    fn anti_stable() -> UncertainSystem {
        let f = crate::poly::PolyVector::new(vec![
            Polynomial::from_terms(2, [(crate::poly::Monomial::new(vec![1, 0]), 1.0)]),
            Polynomial::from_terms(2, [(crate::poly::Monomial::new(vec![0, 1]), 1.0)]),
        ]);
        let zero = crate::poly::PolyVector::zero(2, 2);
        UncertainSystem::from_poly("anti-stable", f, vec![zero], vec![(-2.0, 2.0); 2]).unwrap()
    }

    fn uniform_zero() -> DisturbanceSpec {
        DisturbanceSpec::Uniform { params: vec![(0.0, 1e-12)] }
    }

    #[test]
    fn stable_candidate_has_no_violations() {
        let cfg = ValidationConfig {
            online: uniform_zero(),
            realizations: 3,
            points_per_realization: 200,
            region: vec![(-2.0, 2.0), (-2.0, 2.0)],
            seed: 1,
            exclusion_radius: 0.0,
        };
        let report = monte_carlo(&norm_sq_candidate(), &stable_linear(), &cfg).unwrap();
        assert_eq!(report.violation_rate, 0.0);
        assert_eq!(report.violation_area, 0.0);
        assert!(report.records.iter().all(|r| r.max_vdot <= 0.0));
    }

    #[test]
    fn anti_stable_flags_every_point() {
        let cfg = ValidationConfig {
            online: uniform_zero(),
            realizations: 2,
            points_per_realization: 500,
            region: vec![(-2.0, 2.0), (-2.0, 2.0)],
            seed: 2,
            exclusion_radius: 0.0,
        };
        let report = monte_carlo(&norm_sq_candidate(), &anti_stable(), &cfg).unwrap();
        assert_eq!(report.violation_rate, 1.0);
        // V̇ = 2‖x‖² > 0 a.s. under the continuous point distribution.
        assert_eq!(report.violation_area, 1.0);
    }

    #[test]
    fn rate_and_area_invariants() {
        let sys = make_poly_system(2).unwrap();
        let cfg = ValidationConfig {
            online: DisturbanceSpec::Uniform { params: vec![(5.0, 7.0), (-1.0, 1.0)] },
            realizations: 20,
            points_per_realization: 100,
            region: sys.region.clone(),
            seed: 3,
            exclusion_radius: 0.0,
        };
        let report = monte_carlo(&norm_sq_candidate(), &sys, &cfg).unwrap();
        let violated = report.records.iter().filter(|r| r.positive_count > 0).count();
        assert_eq!(report.violation_rate, violated as f64 / 20.0);
        let area: f64 =
            report.records.iter().map(|r| r.positive_count as f64 / 100.0).sum::<f64>() / 20.0;
        assert!((report.violation_area - area).abs() < 1e-15);
        assert_eq!(report.violation_rate == 0.0, report.violation_area == 0.0);
        // A realization contributes to area only if it contributes to rate.
        for r in &report.records {
            if r.positive_count > 0 {
                assert!(r.max_vdot > 0.0);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let sys = make_poly_system(1).unwrap();
        let cfg = ValidationConfig {
            online: DisturbanceSpec::Gaussian { params: vec![(5.0, 1.0), (3.0, 1.0)] },
            realizations: 16,
            points_per_realization: 64,
            region: sys.region.clone(),
            seed: 7,
            exclusion_radius: 0.0,
        };
        let cand = norm_sq_candidate();
        let par = monte_carlo(&cand, &sys, &cfg).unwrap();
        let seq = monte_carlo_sequential(&cand, &sys, &cfg).unwrap();
        assert_eq!(par.records, seq.records);
        assert_eq!(par.violation_rate, seq.violation_rate);
        assert_eq!(par.violation_area, seq.violation_area);
    }

    #[test]
    fn determinism_across_runs_and_csv_roundtrip() {
        let sys = make_poly_system(2).unwrap();
        let cfg = ValidationConfig {
            online: DisturbanceSpec::Uniform { params: vec![(5.0, 7.0), (-1.0, 1.0)] },
            realizations: 8,
            points_per_realization: 50,
            region: sys.region.clone(),
            seed: 11,
            exclusion_radius: 0.0,
        };
        let cand = norm_sq_candidate();
        let a = monte_carlo(&cand, &sys, &cfg).unwrap();
        let b = monte_carlo(&cand, &sys, &cfg).unwrap();
        assert_eq!(report_csv(&a), report_csv(&b));
        assert_eq!(report_summary_json(&a), report_summary_json(&b));
        assert!(report_csv(&a).lines().count() == 9); // header + 8 rows
    }

    #[test]
    fn exclusion_radius_skips_origin_neighborhood() {
        // Anti-stable system violates everywhere; excluding a huge radius
        // removes every point, so nothing is flagged.
        let cfg = ValidationConfig {
            online: uniform_zero(),
            realizations: 2,
            points_per_realization: 100,
            region: vec![(-1.0, 1.0), (-1.0, 1.0)],
            seed: 5,
            exclusion_radius: 10.0,
        };
        let report = monte_carlo(&norm_sq_candidate(), &anti_stable(), &cfg).unwrap();
        assert_eq!(report.violation_rate, 0.0);
    }

    #[test]
    fn heatgrid_shape_and_constant_field() {
        // f = 0, d = 0 → V̇ ≡ 0.
        let f = crate::poly::PolyVector::zero(2, 2);
        let zero = crate::poly::PolyVector::zero(2, 2);
        let sys =
            UncertainSystem::from_poly("null", f, vec![zero], vec![(-1.0, 1.0); 2]).unwrap();
        let grid = emit_heatgrid(
            &norm_sq_candidate(),
            &sys,
            &[0.0],
            &[(0.0, 1.0), (0.0, 1.0)],
            2,
        )
        .unwrap();
        let rows: Vec<&str> = grid.lines().collect();
        assert_eq!(rows.len(), 5); // header + 4 rows
        for row in &rows[1..] {
            let vdot: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
            assert_eq!(vdot, 0.0, "expected zero vdot in {row}");
        }
    }

    #[test]
    fn dimension_errors() {
        let sys = make_poly_system(1).unwrap();
        let cand = norm_sq_candidate();
        let bad = ValidationConfig {
            online: DisturbanceSpec::Uniform { params: vec![(0.0, 1.0)] },
            realizations: 1,
            points_per_realization: 1,
            region: sys.region.clone(),
            seed: 0,
            exclusion_radius: 0.0,
        };
        assert!(matches!(
            monte_carlo(&cand, &sys, &bad),
            Err(ValidateError::DisturbanceDim { .. })
        ));
        let empty = ValidationConfig {
            online: uniform_zero(),
            realizations: 0,
            points_per_realization: 1,
            region: sys.region.clone(),
            seed: 0,
            exclusion_radius: 0.0,
        };
        assert!(matches!(monte_carlo(&cand, &sys, &empty), Err(ValidateError::EmptyRun)));
    }
}
