//! Dense primal-dual interior-point solver for small block-diagonal SDPs.
//!
//! Standard form:
//!   minimize    <C, X>
//!   subject to  <A_i, X> = b_i,  i = 1..p
//!               X >= 0 (PSD, block diagonal)
//!
//! The solver follows the HKM symmetrized Newton direction with a Mehrotra
//! predictor-corrector step and a fraction-to-boundary line search. All
//! linear algebra is dense; problem sizes here are a few hundred equalities
//! over blocks of dimension <= ~20, where dense is both simplest and fast.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("dimension inconsistency: {0}")]
    Dimension(String),
    #[error("equality row {0} is all-zero")]
    ZeroRow(usize),
}

/// One entry of a symmetric constraint matrix: `A[row,col] = A[col,row] = coeff`.
/// Entries are stored with `row <= col`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqEntry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub coeff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equality {
    pub entries: Vec<EqEntry>,
    pub rhs: f64,
}

/// Block-diagonal SDP in standard (minimization) form.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub block_dims: Vec<usize>,
    /// Objective matrices `C_b`, one per block, symmetric.
    pub objective: Vec<DMatrix<f64>>,
    pub equalities: Vec<Equality>,
}

impl SdpProblem {
    /// Feasibility problem (zero objective) over the given blocks.
    pub fn feasibility(block_dims: Vec<usize>, equalities: Vec<Equality>) -> Self {
        let objective = block_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        SdpProblem { block_dims, objective, equalities }
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        if self.objective.len() != self.block_dims.len() {
            return Err(SdpError::Dimension("objective/block count mismatch".into()));
        }
        for (b, c) in self.objective.iter().enumerate() {
            let d = self.block_dims[b];
            if c.nrows() != d || c.ncols() != d {
                return Err(SdpError::Dimension(format!("objective block {b} has wrong shape")));
            }
        }
        for (i, eq) in self.equalities.iter().enumerate() {
            if eq.entries.is_empty() {
                return Err(SdpError::ZeroRow(i));
            }
            for e in &eq.entries {
                if e.block >= self.block_dims.len()
                    || e.row > e.col
                    || e.col >= self.block_dims[e.block]
                {
                    return Err(SdpError::Dimension(format!("equality {i} entry out of range")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub blocks: Vec<DMatrix<f64>>,
    pub dual: DVector<f64>,
    pub status: SolveStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub duality_gap: f64,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub feasibility_tol: f64,
    pub gap_tol: f64,
    pub initial_point_scaling: f64,
    /// Dual objective magnitude treated as divergence (infeasibility heuristic).
    pub divergence_threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 200,
            feasibility_tol: 1e-8,
            gap_tol: 1e-8,
            initial_point_scaling: 1.0,
            divergence_threshold: 1e8,
        }
    }
}

const STEP_FRACTION: f64 = 0.98;

/// Internal partition of blocks: dense blocks (dim >= 2) and scalar blocks.
struct Layout {
    /// For each external block: Ok(index into `big_dims`) or Err(index into diag).
    slot: Vec<Slot>,
    big_dims: Vec<usize>,
    n_diag: usize,
    total_dim: usize,
}

#[derive(Clone, Copy)]
enum Slot {
    Big(usize),
    Diag(usize),
}

#[derive(Clone)]
struct Point {
    big: Vec<DMatrix<f64>>,
    diag: DVector<f64>,
}

impl Point {
    fn scaled_identity(layout: &Layout, tau: f64) -> Self {
        Point {
            big: layout.big_dims.iter().map(|&d| DMatrix::identity(d, d) * tau).collect(),
            diag: DVector::from_element(layout.n_diag, tau),
        }
    }

    fn zeros_like(layout: &Layout) -> Self {
        Point {
            big: layout.big_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect(),
            diag: DVector::zeros(layout.n_diag),
        }
    }

    fn inner(&self, other: &Point) -> f64 {
        let mut acc = self.diag.dot(&other.diag);
        for (a, b) in self.big.iter().zip(&other.big) {
            acc += a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
        }
        acc
    }

    fn axpy(&mut self, alpha: f64, other: &Point) {
        for (a, b) in self.big.iter_mut().zip(&other.big) {
            *a += b * alpha;
        }
        self.diag.axpy(alpha, &other.diag, 1.0);
    }

    fn max_abs(&self) -> f64 {
        let mut m = self.diag.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        for blk in &self.big {
            m = blk.iter().fold(m, |acc, v| acc.max(v.abs()));
        }
        m
    }
}

/// Preprocessed constraint data.
struct Prepared {
    layout: Layout,
    /// Dense constraint matrices per (constraint, big-block) pair.
    big_parts: Vec<Vec<(usize, DMatrix<f64>)>>,
    /// Constraints touching each big block.
    touch_big: Vec<Vec<usize>>,
    /// p x n_diag coefficient matrix for scalar blocks.
    g: DMatrix<f64>,
    b: DVector<f64>,
    c: Point,
}

fn prepare(problem: &SdpProblem) -> Prepared {
    let mut slot = Vec::with_capacity(problem.block_dims.len());
    let mut big_dims = Vec::new();
    let mut n_diag = 0usize;
    let mut total_dim = 0usize;
    for &d in &problem.block_dims {
        total_dim += d;
        if d == 1 {
            slot.push(Slot::Diag(n_diag));
            n_diag += 1;
        } else {
            slot.push(Slot::Big(big_dims.len()));
            big_dims.push(d);
        }
    }
    let layout = Layout { slot, big_dims, n_diag, total_dim };

    let p = problem.equalities.len();
    let mut big_parts: Vec<Vec<(usize, DMatrix<f64>)>> = vec![Vec::new(); p];
    let mut touch_big: Vec<Vec<usize>> = vec![Vec::new(); layout.big_dims.len()];
    let mut g = DMatrix::zeros(p, layout.n_diag);
    let mut b = DVector::zeros(p);

    for (i, eq) in problem.equalities.iter().enumerate() {
        b[i] = eq.rhs;
        for e in &eq.entries {
            match layout.slot[e.block] {
                Slot::Diag(q) => g[(i, q)] += e.coeff,
                Slot::Big(k) => {
                    let dim = layout.big_dims[k];
                    let part = match big_parts[i].iter_mut().find(|(kk, _)| *kk == k) {
                        Some((_, m)) => m,
                        None => {
                            touch_big[k].push(i);
                            big_parts[i].push((k, DMatrix::zeros(dim, dim)));
                            &mut big_parts[i].last_mut().unwrap().1
                        }
                    };
                    part[(e.row, e.col)] += e.coeff;
                    if e.row != e.col {
                        part[(e.col, e.row)] += e.coeff;
                    }
                }
            }
        }
    }

    let mut c = Point::zeros_like(&layout);
    for (ext, cm) in problem.objective.iter().enumerate() {
        match layout.slot[ext] {
            Slot::Diag(q) => c.diag[q] = cm[(0, 0)],
            Slot::Big(k) => c.big[k] = cm.clone(),
        }
    }

    Prepared { layout, big_parts, touch_big, g, b, c }
}

fn frob_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// A(X): apply all constraint functionals to a block point.
fn apply_a(prep: &Prepared, x: &Point) -> DVector<f64> {
    let mut out = &prep.g * &x.diag;
    for (i, parts) in prep.big_parts.iter().enumerate() {
        for (k, a) in parts {
            out[i] += frob_inner(a, &x.big[*k]);
        }
    }
    out
}

/// A*(y): adjoint, a block point.
fn apply_at(prep: &Prepared, y: &DVector<f64>) -> Point {
    let mut out = Point::zeros_like(&prep.layout);
    out.diag = prep.g.transpose() * y;
    for (i, parts) in prep.big_parts.iter().enumerate() {
        for (k, a) in parts {
            out.big[*k] += a * y[i];
        }
    }
    out
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest step alpha in [0, cap] with X + alpha*dX staying PSD.
fn max_step(x: &Point, dx: &Point, cap: f64) -> f64 {
    let mut alpha = cap;
    for (xq, dq) in x.diag.iter().zip(dx.diag.iter()) {
        if *dq < 0.0 {
            alpha = alpha.min(-xq / dq);
        }
    }
    for (xb, db) in x.big.iter().zip(&dx.big) {
        if let Some(chol) = xb.clone().cholesky() {
            // alpha limited by lambda_min of L^-1 dX L^-T where X = L L^T
            let l = chol.l();
            let linv_dx = l
                .solve_lower_triangular(db)
                .expect("triangular solve");
            let mut t = l
                .solve_lower_triangular(&linv_dx.transpose())
                .expect("triangular solve")
                .transpose();
            symmetrize(&mut t);
            let eig = t.symmetric_eigenvalues();
            let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            if lmin < 0.0 {
                alpha = alpha.min(-1.0 / lmin);
            }
        } else {
            return 0.0;
        }
    }
    alpha
}

struct Directions {
    dx: Point,
    dy: DVector<f64>,
    ds: Point,
}

pub fn solve(problem: &SdpProblem, config: &SolverConfig) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    let prep = prepare(problem);
    let p = prep.b.len();
    let nu = prep.layout.total_dim as f64;

    let data_scale = prep
        .b
        .iter()
        .fold(1.0f64, |a, v| a.max(v.abs()))
        .max(prep.c.max_abs());
    let tau = 10.0 * config.initial_point_scaling * data_scale.max(1.0);
    let mut x = Point::scaled_identity(&prep.layout, tau);
    let mut s = Point::scaled_identity(&prep.layout, tau);
    let mut y = DVector::zeros(p);

    let b_norm = prep.b.amax().max(1.0);
    let c_norm = prep.c.max_abs().max(1.0);

    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    // Best iterate seen so far, by worst-case relative KKT error. Near the
    // optimum the Schur system conditions like 1/mu^2 and the residuals can
    // stall just above tolerance; in that case we fall back to the best
    // iterate if it meets a relaxed tolerance.
    let mut best_score = f64::INFINITY;
    let mut best: Option<(Point, DVector<f64>, Point)> = None;

    for iter in 0..config.max_iterations {
        iterations = iter + 1;

        // Residuals.
        let ax = apply_a(&prep, &x);
        let rp = &prep.b - &ax; // b - A(X)
        let mut rd = Point::zeros_like(&prep.layout); // C - S - A*(y)
        {
            let aty = apply_at(&prep, &y);
            for k in 0..rd.big.len() {
                rd.big[k] = &prep.c.big[k] - &s.big[k] - &aty.big[k];
            }
            rd.diag = &prep.c.diag - &s.diag - &aty.diag;
        }
        let mu = x.inner(&s) / nu;
        let pobj = prep.c.inner(&x);
        let dobj = prep.b.dot(&y);
        let rel_rp = rp.amax() / b_norm;
        let rel_rd = rd.max_abs() / c_norm;
        let rel_gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());

        if std::env::var_os("DRLYAP_SDP_TRACE").is_some() {
            eprintln!(
                "iter {iter}: mu={mu:.3e} rp={rel_rp:.3e} rd={rel_rd:.3e} gap={rel_gap:.3e} pobj={pobj:.6e} dobj={dobj:.6e}"
            );
        }

        let score = rel_rp.max(rel_rd).max(rel_gap.min(mu));
        if score < best_score {
            best_score = score;
            best = Some((x.clone(), y.clone(), s.clone()));
        }

        if rel_rp <= config.feasibility_tol
            && rel_rd <= config.feasibility_tol
            && (rel_gap <= config.gap_tol || mu <= config.gap_tol)
        {
            status = SolveStatus::Optimal;
            break;
        }

        // Divergence heuristics.
        if dobj.abs() > config.divergence_threshold || y.amax() > config.divergence_threshold {
            status = if dobj > 0.0 { SolveStatus::Infeasible } else { SolveStatus::Unbounded };
            break;
        }

        // Inverses of S blocks.
        let mut sinv_big = Vec::with_capacity(s.big.len());
        let mut failed = false;
        for sb in &s.big {
            match sb.clone().cholesky() {
                Some(ch) => {
                    let dim = sb.nrows();
                    sinv_big.push(ch.solve(&DMatrix::identity(dim, dim)));
                }
                None => {
                    failed = true;
                    break;
                }
            }
        }
        if failed || s.diag.iter().any(|v| *v <= 0.0) {
            status = SolveStatus::NumericalFailure;
            break;
        }

        // Schur complement M = A(Hsym(X A_j S^-1)) assembled per column.
        let mut m = DMatrix::zeros(p, p);
        // Scalar-block contribution: G diag(x/s) G^T.
        {
            let d: DVector<f64> = x
                .diag
                .iter()
                .zip(s.diag.iter())
                .map(|(xq, sq)| xq / sq)
                .collect::<Vec<f64>>()
                .into();
            let mut gd = prep.g.clone();
            for (q, col) in gd.column_iter_mut().enumerate() {
                let mut col = col;
                col *= d[q];
            }
            m += &gd * prep.g.transpose();
        }
        for j in 0..p {
            for (k, aj) in &prep.big_parts[j] {
                let u = &x.big[*k] * aj * &sinv_big[*k];
                let mut h = u.clone();
                h += u.transpose();
                h *= 0.5;
                for &i in &prep.touch_big[*k] {
                    if let Some((_, ai)) = prep.big_parts[i].iter().find(|(kk, _)| kk == k) {
                        m[(i, j)] += frob_inner(ai, &h);
                    }
                }
            }
        }
        symmetrize(&mut m);

        let chol_m = match cholesky_with_jitter(&m) {
            Some(c) => c,
            None => {
                status = SolveStatus::NumericalFailure;
                break;
            }
        };

        // Helper closures for direction assembly.
        let hsym_xs = |u: &Point| -> Point {
            // Hsym(X * U * S^-1) blockwise.
            let mut out = Point::zeros_like(&prep.layout);
            for k in 0..u.big.len() {
                let t = &x.big[k] * &u.big[k] * &sinv_big[k];
                let mut h = t.clone();
                h += t.transpose();
                h *= 0.5;
                out.big[k] = h;
            }
            for q in 0..prep.layout.n_diag {
                out.diag[q] = x.diag[q] * u.diag[q] / s.diag[q];
            }
            out
        };

        let sinv_point = {
            let mut out = Point::zeros_like(&prep.layout);
            for (k, si) in sinv_big.iter().enumerate() {
                out.big[k] = si.clone();
            }
            for q in 0..prep.layout.n_diag {
                out.diag[q] = 1.0 / s.diag[q];
            }
            out
        };

        // One Newton solve for given sigma and corrector term.
        let solve_dir = |sigma_mu: f64, corr: Option<&Point>| -> Directions {
            // M dy = A(Hsym(X Rd S^-1)) + A(corr) - sigma*mu*A(S^-1) + b
            let h_rd = hsym_xs(&rd);
            let mut rhs = apply_a(&prep, &h_rd);
            rhs += &prep.b;
            let a_sinv = apply_a(&prep, &sinv_point);
            rhs.axpy(-sigma_mu, &a_sinv, 1.0);
            if let Some(t) = corr {
                let at = apply_a(&prep, t);
                rhs += at;
            }
            let mut dy = chol_m.solve(&rhs);
            // Iterative refinement: the Schur system conditions like 1/mu^2,
            // and direction accuracy is what lets the primal residual keep
            // contracting near the optimum.
            for _ in 0..2 {
                let resid = &rhs - &m * &dy;
                dy += chol_m.solve(&resid);
            }
            // dS = Rd - A*(dy)
            let atdy = apply_at(&prep, &dy);
            let mut ds = Point::zeros_like(&prep.layout);
            for k in 0..ds.big.len() {
                ds.big[k] = &rd.big[k] - &atdy.big[k];
            }
            ds.diag = &rd.diag - &atdy.diag;
            // dX = sigma*mu*S^-1 - X - Hsym(X dS S^-1) - corr
            let h_ds = hsym_xs(&ds);
            let mut dx = Point::zeros_like(&prep.layout);
            for k in 0..dx.big.len() {
                dx.big[k] = &sinv_point.big[k] * sigma_mu - &x.big[k] - &h_ds.big[k];
                if let Some(t) = corr {
                    dx.big[k] -= &t.big[k];
                }
                symmetrize(&mut dx.big[k]);
            }
            for q in 0..prep.layout.n_diag {
                dx.diag[q] = sigma_mu / s.diag[q] - x.diag[q] - h_ds.diag[q]
                    - corr.map_or(0.0, |t| t.diag[q]);
            }
            Directions { dx, dy, ds }
        };

        // Predictor (affine scaling).
        let aff = solve_dir(0.0, None);
        let ap_aff = max_step(&x, &aff.dx, 1.0);
        let ad_aff = max_step(&s, &aff.ds, 1.0);
        let mut x_aff = Point {
            big: x.big.clone(),
            diag: x.diag.clone(),
        };
        x_aff.axpy(ap_aff, &aff.dx);
        let mut s_aff = Point {
            big: s.big.clone(),
            diag: s.diag.clone(),
        };
        s_aff.axpy(ad_aff, &aff.ds);
        let mu_aff = x_aff.inner(&s_aff) / nu;
        let sigma = ((mu_aff / mu).powi(3)).clamp(0.0, 1.0);
        let sigma_mu = sigma * mu;

        // Corrector with second-order term Hsym(dX_aff dS_aff S^-1).
        let mut corr = Point::zeros_like(&prep.layout);
        for k in 0..corr.big.len() {
            let t = &aff.dx.big[k] * &aff.ds.big[k] * &sinv_big[k];
            let mut h = t.clone();
            h += t.transpose();
            h *= 0.5;
            corr.big[k] = h;
        }
        for q in 0..prep.layout.n_diag {
            corr.diag[q] = aff.dx.diag[q] * aff.ds.diag[q] / s.diag[q];
        }
        let dir = solve_dir(sigma_mu, Some(&corr));

        let ap = STEP_FRACTION * max_step(&x, &dir.dx, 1.0 / STEP_FRACTION);
        let ad = STEP_FRACTION * max_step(&s, &dir.ds, 1.0 / STEP_FRACTION);
        let ap = ap.min(1.0);
        let ad = ad.min(1.0);

        if ap < 1e-10 && ad < 1e-10 {
            status = SolveStatus::NumericalFailure;
            break;
        }

        x.axpy(ap, &dir.dx);
        s.axpy(ad, &dir.ds);
        y.axpy(ad, &dir.dy, 1.0);
    }

    // Accept the best iterate under a relaxed tolerance when the iteration
    // stalled just short of the target accuracy.
    if !matches!(status, SolveStatus::Optimal | SolveStatus::Infeasible | SolveStatus::Unbounded) {
        if let Some((bx, by, bs)) = best {
            if best_score <= 100.0 * config.feasibility_tol.max(config.gap_tol) {
                x = bx;
                y = by;
                s = bs;
                status = SolveStatus::Optimal;
            }
        }
    }

    // Final diagnostics.
    let ax = apply_a(&prep, &x);
    let rp_norm = (&prep.b - &ax).amax();
    let aty = apply_at(&prep, &y);
    let mut rd_norm = 0.0f64;
    for k in 0..x.big.len() {
        let r = &prep.c.big[k] - &s.big[k] - &aty.big[k];
        rd_norm = rd_norm.max(r.amax());
    }
    for q in 0..prep.layout.n_diag {
        rd_norm = rd_norm.max((prep.c.diag[q] - s.diag[q] - aty.diag[q]).abs());
    }
    let pobj = prep.c.inner(&x);
    let dobj = prep.b.dot(&y);

    // Reassemble external blocks.
    let mut blocks = Vec::with_capacity(problem.block_dims.len());
    for (ext, &d) in problem.block_dims.iter().enumerate() {
        match prep.layout.slot[ext] {
            Slot::Diag(q) => blocks.push(DMatrix::from_element(1, 1, x.diag[q])),
            Slot::Big(k) => {
                let _ = d;
                blocks.push(x.big[k].clone())
            }
        }
    }

    Ok(SdpSolution {
        blocks,
        dual: y,
        status,
        primal_residual: rp_norm,
        dual_residual: rd_norm,
        duality_gap: (pobj - dobj).abs(),
        objective: pobj,
        iterations,
    })
}

fn cholesky_with_jitter(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = m.diagonal().amax().max(1.0);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut mj = m.clone();
        if jitter > 0.0 {
            for i in 0..mj.nrows() {
                mj[(i, i)] += jitter;
            }
        }
        if let Some(c) = mj.cholesky() {
            return Some(c);
        }
        jitter = if jitter == 0.0 { 1e-14 * scale } else { jitter * 100.0 };
    }
    None
}

/// Result of a feasibility-margin solve.
#[derive(Debug, Clone)]
pub struct MarginResult {
    pub margin: f64,
    pub feasible: bool,
    pub solution: SdpSolution,
}

/// Default threshold above which the margin declares feasibility.
pub const MARGIN_THRESHOLD: f64 = 1e-7;

/// Cap on the margin variable; problems whose feasible set is a cone would
/// otherwise have unbounded margin.
pub const MARGIN_CAP: f64 = 1.0;

/// Solve `max t  s.t.  X_b - t I >= 0` for the blocks listed in
/// `margin_blocks`, subject to the problem's equalities, with `t <= cap`.
///
/// Returns the original-problem block values (with the margin folded back in)
/// and the feasibility verdict `t* > threshold`.
pub fn feasibility_margin(
    problem: &SdpProblem,
    margin_blocks: &[usize],
    config: &SolverConfig,
) -> Result<MarginResult, SdpError> {
    problem.validate()?;
    let n_orig = problem.block_dims.len();
    let mut block_dims = problem.block_dims.clone();
    // t = t_plus - t_minus, plus a slack for the cap t <= MARGIN_CAP.
    let t_plus = block_dims.len();
    block_dims.push(1);
    let t_minus = block_dims.len();
    block_dims.push(1);
    let t_slack = block_dims.len();
    block_dims.push(1);

    let margined = |b: usize| margin_blocks.contains(&b);

    let mut equalities = Vec::with_capacity(problem.equalities.len() + 1);
    for eq in &problem.equalities {
        let mut entries = eq.entries.clone();
        // <A_i, X_b> with X_b = Y_b + t I adds t * tr(A_i,b) over margined blocks.
        let mut tr = 0.0;
        for e in &eq.entries {
            if e.row == e.col && margined(e.block) {
                tr += e.coeff;
            }
        }
        if tr != 0.0 {
            entries.push(EqEntry { block: t_plus, row: 0, col: 0, coeff: tr });
            entries.push(EqEntry { block: t_minus, row: 0, col: 0, coeff: -tr });
        }
        equalities.push(Equality { entries, rhs: eq.rhs });
    }
    equalities.push(Equality {
        entries: vec![
            EqEntry { block: t_plus, row: 0, col: 0, coeff: 1.0 },
            EqEntry { block: t_minus, row: 0, col: 0, coeff: -1.0 },
            EqEntry { block: t_slack, row: 0, col: 0, coeff: 1.0 },
        ],
        rhs: MARGIN_CAP,
    });

    let mut objective: Vec<DMatrix<f64>> = block_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
    objective[t_plus][(0, 0)] = -1.0;
    objective[t_minus][(0, 0)] = 1.0;

    let aug = SdpProblem { block_dims, objective, equalities };
    let mut sol = solve(&aug, config)?;
    let t = sol.blocks[t_plus][(0, 0)] - sol.blocks[t_minus][(0, 0)];

    // Fold the margin back into the original blocks.
    for b in 0..n_orig {
        if margined(b) {
            let d = sol.blocks[b].nrows();
            for i in 0..d {
                sol.blocks[b][(i, i)] += t;
            }
        }
    }
    sol.blocks.truncate(n_orig);
    sol.objective = t;

    let feasible = matches!(sol.status, SolveStatus::Optimal) && t > MARGIN_THRESHOLD;
    Ok(MarginResult { margin: t, feasible, solution: sol })
}

/// Build the SDP `max t s.t. A - t I >= 0` for a symmetric matrix `A`.
/// Used by tests and as a minimum-eigenvalue oracle target.
pub fn lambda_min_problem(a: &DMatrix<f64>) -> SdpProblem {
    let n = a.nrows();
    // Variable block Y = A - t I (PSD), t free via two scalar blocks.
    // Equalities: Y_ij + t*delta_ij = A_ij.
    let mut equalities = Vec::new();
    for i in 0..n {
        for j in i..n {
            // Off-diagonal symmetric entries contribute twice to <A, X>.
            let w = if i == j { 1.0 } else { 0.5 };
            let mut entries = vec![EqEntry { block: 0, row: i, col: j, coeff: w }];
            if i == j {
                entries.push(EqEntry { block: 1, row: 0, col: 0, coeff: 1.0 });
                entries.push(EqEntry { block: 2, row: 0, col: 0, coeff: -1.0 });
            }
            equalities.push(Equality { entries, rhs: a[(i, j)] });
        }
    }
    let mut objective = vec![
        DMatrix::zeros(n, n),
        DMatrix::zeros(1, 1),
        DMatrix::zeros(1, 1),
    ];
    objective[1][(0, 0)] = -1.0; // minimize -t
    objective[2][(0, 0)] = 1.0;
    SdpProblem { block_dims: vec![n, 1, 1], objective, equalities }
}

/// Extract `t = t_plus - t_minus` from a `lambda_min_problem` solution.
pub fn lambda_min_value(sol: &SdpSolution) -> f64 {
    sol.blocks[1][(0, 0)] - sol.blocks[2][(0, 0)]
}

/// Sparse text dump (block sizes, then entry triples) for cross-checking
/// against external solvers.
pub fn dump_problem(problem: &SdpProblem) -> String {
    let mut s = String::new();
    s.push_str(&format!("blocks {}\n", problem.block_dims.len()));
    for d in &problem.block_dims {
        s.push_str(&format!("{d} "));
    }
    s.push('\n');
    s.push_str(&format!("equalities {}\n", problem.equalities.len()));
    for (i, eq) in problem.equalities.iter().enumerate() {
        s.push_str(&format!("eq {} rhs {:?} entries {}\n", i, eq.rhs, eq.entries.len()));
        for e in &eq.entries {
            s.push_str(&format!("{} {} {} {:?}\n", e.block, e.row, e.col, e.coeff));
        }
    }
    s.push_str("objective\n");
    for (b, c) in problem.objective.iter().enumerate() {
        for i in 0..c.nrows() {
            for j in i..c.ncols() {
                if c[(i, j)] != 0.0 {
                    s.push_str(&format!("{} {} {} {:?}\n", b, i, j, c[(i, j)]));
                }
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_symmetric(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-3.0..3.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    #[test]
    fn lambda_min_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 5.0]));
        let prob = lambda_min_problem(&a);
        let sol = solve(&prob, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((lambda_min_value(&sol) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn min_trace_with_offdiag_constraint() {
        // minimize trace(X) s.t. X_12 = 1, X PSD 2x2: optimum 2 at [[1,1],[1,1]].
        let problem = SdpProblem {
            block_dims: vec![2],
            objective: vec![DMatrix::identity(2, 2)],
            equalities: vec![Equality {
                entries: vec![EqEntry { block: 0, row: 0, col: 1, coeff: 0.5 }],
                rhs: 1.0,
            }],
        };
        let sol = solve(&problem, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective - 2.0).abs() < 1e-6, "objective {}", sol.objective);
    }

    #[test]
    fn negative_diagonal_is_infeasible() {
        // X_11 = -1 with X PSD.
        let problem = SdpProblem::feasibility(
            vec![2],
            vec![Equality {
                entries: vec![EqEntry { block: 0, row: 0, col: 0, coeff: 1.0 }],
                rhs: -1.0,
            }],
        );
        let res = feasibility_margin(&problem, &[0], &SolverConfig::default()).unwrap();
        assert!(!res.feasible);
        assert!(res.margin < 0.0, "margin {}", res.margin);
    }

    #[test]
    fn margin_scalar_block() {
        // Q_11 = 1 in a 1x1 block: t* = 1.
        let problem = SdpProblem::feasibility(
            vec![1],
            vec![Equality {
                entries: vec![EqEntry { block: 0, row: 0, col: 0, coeff: 1.0 }],
                rhs: 1.0,
            }],
        );
        let res = feasibility_margin(&problem, &[0], &SolverConfig::default()).unwrap();
        assert!(res.feasible);
        assert!((res.margin - 1.0).abs() < 1e-6, "margin {}", res.margin);
    }

    #[test]
    fn margin_negative_scalar() {
        let problem = SdpProblem::feasibility(
            vec![1],
            vec![Equality {
                entries: vec![EqEntry { block: 0, row: 0, col: 0, coeff: 1.0 }],
                rhs: -1.0,
            }],
        );
        let res = feasibility_margin(&problem, &[0], &SolverConfig::default()).unwrap();
        assert!(!res.feasible);
        assert!((res.margin + 1.0).abs() < 1e-6, "margin {}", res.margin);
    }

    #[test]
    fn lambda_min_random_matches_eigensolver() {
        let mut rng = StdRng::seed_from_u64(100);
        for _ in 0..20 {
            let n = rng.gen_range(2..=6);
            let a = random_symmetric(&mut rng, n);
            let oracle = a
                .clone()
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let sol = solve(&lambda_min_problem(&a), &SolverConfig::default()).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);
            let got = lambda_min_value(&sol);
            assert!(
                (got - oracle).abs() < 1e-6,
                "lambda_min mismatch: got {got}, oracle {oracle}"
            );
        }
    }

    #[test]
    fn optimal_solutions_satisfy_kkt() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_symmetric(&mut rng, 4);
            let prob = lambda_min_problem(&a);
            let sol = solve(&prob, &SolverConfig::default()).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);
            assert!(sol.primal_residual <= 1e-7);
            let eig = sol.blocks[0].clone().symmetric_eigenvalues();
            assert!(eig.iter().all(|&l| l >= -1e-7));
        }
    }

    #[test]
    fn deterministic() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.3, -1.0, 1.5, 0.2, 0.3, 0.2, 0.9]);
        let prob = lambda_min_problem(&a);
        let s1 = solve(&prob, &SolverConfig::default()).unwrap();
        let s2 = solve(&prob, &SolverConfig::default()).unwrap();
        assert_eq!(s1.objective.to_bits(), s2.objective.to_bits());
        assert_eq!(s1.iterations, s2.iterations);
    }

    #[test]
    fn rejects_zero_row() {
        let problem = SdpProblem::feasibility(
            vec![2],
            vec![Equality { entries: vec![], rhs: 1.0 }],
        );
        assert!(problem.validate().is_err());
    }
}
