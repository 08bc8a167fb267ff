//! Dense convex quadratic programming.
//!
//! Problems take the form
//!
//! ```text
//!     minimize     1/2 z' H z + q' z + c
//!     subject to   C z = b
//!                  lb <= G z <= ub
//!                  z_j = v_j        for each pinned (j, v_j)
//! ```
//!
//! and are solved with a primal-dual interior-point method using Mehrotra's
//! predictor-corrector heuristic. Bounds may be infinite. An optional
//! active-set polishing pass refines the interior-point iterate into an exact
//! vertex solution, which matters when the multipliers feed sensitivity
//! computations.
//!
//! Multiplier sign convention: the Lagrangian is
//!
//! ```text
//!     L = f(z) + chi' (C z - b) - upsilon' (G z - lb) - eta' (ub - G z)
//! ```
//!
//! with `upsilon, eta >= 0`, so stationarity reads
//! `H z + q + C' chi - G' (upsilon - eta) = 0`. Pinned-variable multipliers are
//! appended to `chi` in the order the pins were given.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Regularization added to the reduced Hessian when a factorization fails.
const FALLBACK_REG: f64 = 1e-9;
/// Relative singular-value threshold for the active-constraint rank check.
const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("lower bound exceeds upper bound in row {0}")]
    InvertedBounds(usize),
    #[error("pinned index {index} out of range for {n} variables")]
    PinOutOfRange { index: usize, n: usize },
}

fn check_finite(what: &'static str, values: &[f64]) -> Result<(), QpError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(QpError::NonFinite(what))
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), QpError> {
    if expected == found {
        Ok(())
    } else {
        Err(QpError::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}

/// A dense convex QP instance.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    h: DMatrix<f64>,
    q: DVector<f64>,
    offset: f64,
    eq: DMatrix<f64>,
    eq_rhs: DVector<f64>,
    ineq: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    fixed: Vec<(usize, f64)>,
}

impl QpProblem {
    /// Unconstrained problem `min 1/2 z'Hz + q'z`. `H` is symmetrized.
    pub fn new(h: DMatrix<f64>, q: DVector<f64>) -> Result<Self, QpError> {
        let n = q.len();
        check_len("H rows", n, h.nrows())?;
        check_len("H columns", n, h.ncols())?;
        check_finite("H", h.as_slice())?;
        check_finite("q", q.as_slice())?;
        let h = symmetrize(&h);
        Ok(Self {
            h,
            q,
            offset: 0.0,
            eq: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq: DMatrix::zeros(0, n),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
            fixed: Vec::new(),
        })
    }

    pub fn with_offset(mut self, offset: f64) -> Result<Self, QpError> {
        check_finite("offset", &[offset])?;
        self.offset = offset;
        Ok(self)
    }

    /// Equality constraints `C z = b`.
    pub fn with_equalities(mut self, c: DMatrix<f64>, b: DVector<f64>) -> Result<Self, QpError> {
        check_len("C columns", self.dim(), c.ncols())?;
        check_len("b", c.nrows(), b.len())?;
        check_finite("C", c.as_slice())?;
        check_finite("b", b.as_slice())?;
        self.eq = c;
        self.eq_rhs = b;
        Ok(self)
    }

    /// Two-sided inequalities `lb <= G z <= ub`; bounds may be infinite but not NaN.
    pub fn with_inequalities(
        mut self,
        g: DMatrix<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self, QpError> {
        check_len("G columns", self.dim(), g.ncols())?;
        check_len("lb", g.nrows(), lb.len())?;
        check_len("ub", g.nrows(), ub.len())?;
        check_finite("G", g.as_slice())?;
        for i in 0..lb.len() {
            if lb[i].is_nan() || ub[i].is_nan() || lb[i] == f64::INFINITY || ub[i] == f64::NEG_INFINITY {
                return Err(QpError::NonFinite("bounds"));
            }
            if lb[i] > ub[i] {
                return Err(QpError::InvertedBounds(i));
            }
        }
        self.ineq = g;
        self.lower = lb;
        self.upper = ub;
        Ok(self)
    }

    /// Pins `z[index] = value` through extra equality rows.
    pub fn with_fixed(mut self, fixed: Vec<(usize, f64)>) -> Result<Self, QpError> {
        for &(index, value) in &fixed {
            if index >= self.dim() {
                return Err(QpError::PinOutOfRange {
                    index,
                    n: self.dim(),
                });
            }
            check_finite("pinned value", &[value])?;
        }
        self.fixed = fixed;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn eq_matrix(&self) -> &DMatrix<f64> {
        &self.eq
    }

    pub fn eq_rhs(&self) -> &DVector<f64> {
        &self.eq_rhs
    }

    pub fn ineq_matrix(&self) -> &DMatrix<f64> {
        &self.ineq
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn fixed(&self) -> &[(usize, f64)] {
        &self.fixed
    }

    /// Number of equality multipliers: rows of `C` plus pinned variables.
    pub fn n_equalities(&self) -> usize {
        self.eq.nrows() + self.fixed.len()
    }

    pub fn n_inequalities(&self) -> usize {
        self.ineq.nrows()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.q.dot(z) + self.offset
    }

    /// Stacked equality system `[C; E_pin] z = [b; v]`.
    fn equality_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.dim();
        let m = self.eq.nrows();
        let total = m + self.fixed.len();
        let mut e = DMatrix::zeros(total, n);
        let mut rhs = DVector::zeros(total);
        e.rows_mut(0, m).copy_from(&self.eq);
        rhs.rows_mut(0, m).copy_from(&self.eq_rhs);
        for (k, &(index, value)) in self.fixed.iter().enumerate() {
            e[(m + k, index)] = 1.0;
            rhs[m + k] = value;
        }
        (e, rhs)
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Primal-dual solution with KKT diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    /// Multipliers of `C z = b` followed by those of the pinned variables.
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers_lower: DVector<f64>,
    pub ineq_multipliers_upper: DVector<f64>,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Set when the active-constraint Jacobian is rank deficient or some
    /// constraint is weakly active, i.e. the multipliers may not be unique.
    pub degenerate: bool,
    pub polished: bool,
}

impl PrimalDualSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Multipliers of the pinned-variable rows.
    pub fn pin_multipliers(&self, problem: &QpProblem) -> DVector<f64> {
        let m = problem.eq_matrix().nrows();
        self.eq_multipliers.rows(m, problem.fixed().len()).into_owned()
    }

    /// Wolfe dual objective at the returned multipliers.
    pub fn dual_objective(&self, problem: &QpProblem) -> f64 {
        let (_, rhs) = problem.equality_system();
        let mut d = -0.5 * self.z.dot(&(problem.h() * &self.z)) + problem.offset()
            - rhs.dot(&self.eq_multipliers);
        for i in 0..problem.n_inequalities() {
            if problem.lower[i].is_finite() {
                d += problem.lower[i] * self.ineq_multipliers_lower[i];
            }
            if problem.upper[i].is_finite() {
                d -= problem.upper[i] * self.ineq_multipliers_upper[i];
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Refine the interior-point iterate on its identified active set.
    pub polish: bool,
    /// Run the SVD rank test on the active-constraint Jacobian.
    pub check_degeneracy: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            polish: true,
            check_degeneracy: true,
        }
    }
}

/// Maximum of stationarity, primal feasibility, dual feasibility and
/// complementarity residuals, each in the infinity norm.
pub fn kkt_residual(problem: &QpProblem, candidate: &PrimalDualSolution) -> f64 {
    let n = problem.dim();
    let (e, rhs) = problem.equality_system();
    assert_eq!(candidate.z.len(), n, "primal dimension");
    assert_eq!(candidate.eq_multipliers.len(), e.nrows(), "equality multipliers");
    let l = problem.n_inequalities();
    assert_eq!(candidate.ineq_multipliers_lower.len(), l, "lower multipliers");
    assert_eq!(candidate.ineq_multipliers_upper.len(), l, "upper multipliers");

    let z = &candidate.z;
    let net = &candidate.ineq_multipliers_lower - &candidate.ineq_multipliers_upper;
    let stationarity = problem.h() * z + problem.q() + e.transpose() * &candidate.eq_multipliers
        - problem.ineq_matrix().transpose() * &net;
    let mut worst = stationarity.amax();
    if e.nrows() > 0 {
        worst = worst.max((&e * z - rhs).amax());
    }
    let gz = problem.ineq_matrix() * z;
    for i in 0..l {
        let (lo, up) = (problem.lower[i], problem.upper[i]);
        let (ml, mu) = (
            candidate.ineq_multipliers_lower[i],
            candidate.ineq_multipliers_upper[i],
        );
        worst = worst.max((-ml).max(0.0)).max((-mu).max(0.0));
        if lo.is_finite() {
            worst = worst.max((lo - gz[i]).max(0.0)).max((ml * (gz[i] - lo)).abs());
        } else {
            worst = worst.max(ml.abs());
        }
        if up.is_finite() {
            worst = worst.max((gz[i] - up).max(0.0)).max((mu * (up - gz[i])).abs());
        } else {
            worst = worst.max(mu.abs());
        }
    }
    worst
}

/// Solve with the given tolerance and iteration cap, other settings default.
pub fn solve_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> PrimalDualSolution {
    solve_qp_with(
        problem,
        &QpSettings {
            tol,
            max_iter,
            ..QpSettings::default()
        },
    )
}

/// One-sided inequality `sign * g_row . z >= rhs`.
#[derive(Debug, Clone, Copy)]
struct Side {
    row: usize,
    sign: f64,
    rhs: f64,
}

struct Workspace<'a> {
    problem: &'a QpProblem,
    e: DMatrix<f64>,
    e_rhs: DVector<f64>,
    /// Nonzeros of each inequality row.
    rows: Vec<Vec<(usize, f64)>>,
    sides: Vec<Side>,
    /// Indices into `sides` of the lower/upper side of each row.
    lower_side: Vec<Option<usize>>,
    upper_side: Vec<Option<usize>>,
    split: Split,
}

/// Partition of the variables into a dense block and a set whose block of the
/// reduced Hessian stays diagonal for every barrier weighting: no Hessian
/// coupling, no equality rows, and at most one such variable per inequality row.
struct Split {
    free: Vec<usize>,
    diag: Vec<usize>,
    h_free: DMatrix<f64>,
    e_free: DMatrix<f64>,
    /// Per inequality row: nonzeros on free variables as (free position, value).
    row_free: Vec<Vec<(usize, f64)>>,
    /// Per diagonal variable: (row, coefficient) of every row containing it.
    diag_rows: Vec<Vec<(usize, f64)>>,
    null: Option<NullBasis>,
}

/// Orthonormal factorization `E' = [Q1 Q2] [R; 0]` of full-rank equality rows.
/// The columns of `Q2` span the null space of `E`.
struct NullBasis {
    q1: DMatrix<f64>,
    r: DMatrix<f64>,
    z: DMatrix<f64>,
    z_t: DMatrix<f64>,
}

impl NullBasis {
    fn new(e: &DMatrix<f64>) -> Option<Self> {
        let (me, n) = e.shape();
        if me == 0 || me > n {
            return None;
        }
        let qr = e.transpose().qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        if !(scale > 0.0) || r.diagonal().iter().any(|v| v.abs() <= 1e-10 * scale) {
            return None;
        }
        let mut q_t = DMatrix::identity(n, n);
        qr.q_tr_mul(&mut q_t);
        let q = q_t.transpose();
        Some(Self {
            q1: q.columns(0, me).into_owned(),
            r,
            z: q.columns(me, n - me).into_owned(),
            z_t: q_t.rows(me, n - me).into_owned(),
        })
    }
}

impl Split {
    fn new(problem: &QpProblem, e: &DMatrix<f64>, rows: &[Vec<(usize, f64)>]) -> Self {
        let n = problem.dim();
        let h = problem.h();
        let mut rows_of: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (r, nz) in rows.iter().enumerate() {
            for &(j, g) in nz {
                rows_of[j].push((r, g));
            }
        }
        let mut row_taken = vec![false; rows.len()];
        let mut is_diag = vec![false; n];
        for j in 0..n {
            let uncoupled = (0..n).all(|i| i == j || h[(i, j)] == 0.0);
            let no_eq = (0..e.nrows()).all(|r| e[(r, j)] == 0.0);
            let touched = !rows_of[j].is_empty();
            if uncoupled && no_eq && touched && rows_of[j].iter().all(|&(r, _)| !row_taken[r]) {
                is_diag[j] = true;
                for &(r, _) in &rows_of[j] {
                    row_taken[r] = true;
                }
            }
        }
        let free: Vec<usize> = (0..n).filter(|&j| !is_diag[j]).collect();
        let diag: Vec<usize> = (0..n).filter(|&j| is_diag[j]).collect();
        let mut pos = vec![usize::MAX; n];
        for (p, &j) in free.iter().enumerate() {
            pos[j] = p;
        }
        let h_free = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
        let e_free = DMatrix::from_fn(e.nrows(), free.len(), |r, b| e[(r, free[b])]);
        let row_free = rows
            .iter()
            .map(|nz| {
                nz.iter()
                    .filter(|(j, _)| !is_diag[*j])
                    .map(|&(j, g)| (pos[j], g))
                    .collect()
            })
            .collect();
        let diag_rows = diag.iter().map(|&j| rows_of[j].clone()).collect();
        let null = NullBasis::new(&e_free);
        Self {
            free,
            diag,
            h_free,
            e_free,
            row_free,
            diag_rows,
            null,
        }
    }
}

impl<'a> Workspace<'a> {
    fn new(problem: &'a QpProblem) -> Self {
        let (e, e_rhs) = problem.equality_system();
        let g = problem.ineq_matrix();
        let rows: Vec<Vec<(usize, f64)>> = (0..g.nrows())
            .map(|i| {
                (0..g.ncols())
                    .filter_map(|j| {
                        let v = g[(i, j)];
                        (v != 0.0).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        let mut sides = Vec::new();
        let mut lower_side = vec![None; g.nrows()];
        let mut upper_side = vec![None; g.nrows()];
        for i in 0..g.nrows() {
            if problem.lower[i].is_finite() {
                lower_side[i] = Some(sides.len());
                sides.push(Side {
                    row: i,
                    sign: 1.0,
                    rhs: problem.lower[i],
                });
            }
            if problem.upper[i].is_finite() {
                upper_side[i] = Some(sides.len());
                sides.push(Side {
                    row: i,
                    sign: -1.0,
                    rhs: -problem.upper[i],
                });
            }
        }
        let split = Split::new(problem, &e, &rows);
        Self {
            problem,
            e,
            e_rhs,
            rows,
            sides,
            lower_side,
            upper_side,
            split,
        }
    }

    fn n(&self) -> usize {
        self.problem.dim()
    }

    fn row_dot(&self, row: usize, z: &DVector<f64>) -> f64 {
        self.rows[row].iter().map(|&(j, v)| v * z[j]).sum()
    }

    /// `A z` over all sides.
    fn a_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        let gz: Vec<f64> = (0..self.rows.len()).map(|r| self.row_dot(r, z)).collect();
        DVector::from_iterator(
            self.sides.len(),
            self.sides.iter().map(|s| s.sign * gz[s.row]),
        )
    }

    /// `A' v` over all sides.
    fn at_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        for (k, side) in self.sides.iter().enumerate() {
            let w = side.sign * v[k];
            if w != 0.0 {
                for &(j, g) in &self.rows[side.row] {
                    out[j] += w * g;
                }
            }
        }
        out
    }

    fn row_weights(&self, d: &DVector<f64>) -> Vec<f64> {
        let mut weight = vec![0.0; self.rows.len()];
        for (k, side) in self.sides.iter().enumerate() {
            weight[side.row] += d[k];
        }
        weight
    }

    /// Factor `[[H + A' diag(d) A, E'], [E, 0]]`, eliminating the diagonal block first.
    fn factor(&self, d: &DVector<f64>) -> Option<NewtonFactor> {
        let split = &self.split;
        let weight = self.row_weights(d);
        let nf = split.free.len();
        let mut m = split.h_free.clone();
        for (r, nz) in split.row_free.iter().enumerate() {
            let w = weight[r];
            if w == 0.0 {
                continue;
            }
            for &(i, gi) in nz {
                let wi = w * gi;
                for &(j, gj) in nz {
                    m[(i, j)] += wi * gj;
                }
            }
        }
        let mut pivots = Vec::with_capacity(split.diag.len());
        let mut couplings = Vec::with_capacity(split.diag.len());
        let mut dense = vec![0.0; nf];
        for (k, &j) in split.diag.iter().enumerate() {
            let mut pivot = self.problem.h()[(j, j)];
            let mut touched: Vec<usize> = Vec::new();
            for &(r, g) in &split.diag_rows[k] {
                let w = weight[r];
                pivot += w * g * g;
                for &(i, gi) in &split.row_free[r] {
                    if dense[i] == 0.0 {
                        touched.push(i);
                    }
                    dense[i] += w * g * gi;
                }
            }
            if !pivot.is_finite() {
                return None;
            }
            let pivot = pivot.max(FALLBACK_REG);
            let coupling: Vec<(usize, f64)> = touched.iter().map(|&i| (i, dense[i])).collect();
            for &i in &touched {
                dense[i] = 0.0;
            }
            for &(a, va) in &coupling {
                let s = va / pivot;
                for &(b, vb) in &coupling {
                    m[(a, b)] -= s * vb;
                }
            }
            pivots.push(pivot);
            couplings.push(coupling);
        }
        let inner = match &split.null {
            Some(null) => {
                let reduced = &null.z_t * (&m * &null.z);
                match nalgebra::Cholesky::new(reduced) {
                    Some(chol) => Inner::Null { chol, m },
                    None => Inner::Kkt(KktFactor::new(m, &split.e_free)?),
                }
            }
            None => Inner::Kkt(KktFactor::new(m, &split.e_free)?),
        };
        Some(NewtonFactor {
            inner,
            pivots,
            couplings,
        })
    }

    /// Solve the Newton system, falling back to the unreduced matrix when the
    /// diagonal block cannot be eliminated.
    fn solve_newton(
        &self,
        factor: &NewtonFactor,
        r1: &DVector<f64>,
        r2: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let split = &self.split;
        let mut r1f = DVector::from_iterator(split.free.len(), split.free.iter().map(|&j| r1[j]));
        for (k, &j) in split.diag.iter().enumerate() {
            let scale = r1[j] / factor.pivots[k];
            for &(i, v) in &factor.couplings[k] {
                r1f[i] -= v * scale;
            }
        }
        let (dzf, dy) = match (&factor.inner, &split.null) {
            (Inner::Kkt(k), _) => k.solve(&r1f, r2)?,
            (Inner::Null { chol, m }, Some(null)) => {
                let dp = &null.q1 * null.r.tr_solve_upper_triangular(r2)?;
                let w = chol.solve(&(&null.z_t * (&r1f - m * &dp)));
                let dz = dp + &null.z * w;
                let dy = null.r.solve_upper_triangular(&null.q1.tr_mul(&(&r1f - m * &dz)))?;
                (dz, dy)
            }
            (Inner::Null { .. }, None) => return None,
        };
        let mut dz = DVector::zeros(self.n());
        for (p, &j) in split.free.iter().enumerate() {
            dz[j] = dzf[p];
        }
        for (k, &j) in split.diag.iter().enumerate() {
            let dot: f64 = factor.couplings[k].iter().map(|&(i, v)| v * dzf[i]).sum();
            dz[j] = (r1[j] - dot) / factor.pivots[k];
        }
        Some((dz, dy))
    }
}

enum Inner {
    Kkt(KktFactor),
    /// Cholesky of `Z' M Z` on the null space of the equality rows.
    Null {
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        m: DMatrix<f64>,
    },
}

struct NewtonFactor {
    inner: Inner,
    pivots: Vec<f64>,
    couplings: Vec<Vec<(usize, f64)>>,
}

/// Factorization of the reduced KKT system `[[M, E'], [E, 0]]`.
enum KktFactor {
    Schur {
        chol_m: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        m_inv_et: DMatrix<f64>,
        chol_s: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
        e: DMatrix<f64>,
    },
    Full {
        lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        n: usize,
    },
}

impl KktFactor {
    fn new(m: DMatrix<f64>, e: &DMatrix<f64>) -> Option<Self> {
        let n = m.nrows();
        let me = e.nrows();
        let mut reg = 0.0;
        for _ in 0..2 {
            let mut mm = m.clone();
            if reg > 0.0 {
                for i in 0..n {
                    mm[(i, i)] += reg;
                }
            }
            if let Some(chol_m) = nalgebra::Cholesky::new(mm) {
                if me == 0 {
                    return Some(KktFactor::Schur {
                        chol_m,
                        m_inv_et: DMatrix::zeros(n, 0),
                        chol_s: None,
                        e: e.clone(),
                    });
                }
                let m_inv_et = chol_m.solve(&e.transpose());
                let s = e * &m_inv_et;
                if let Some(chol_s) = nalgebra::Cholesky::new(s.clone()) {
                    return Some(KktFactor::Schur {
                        chol_m,
                        m_inv_et,
                        chol_s: Some(chol_s),
                        e: e.clone(),
                    });
                }
                break;
            }
            reg = FALLBACK_REG * (1.0 + m.amax());
        }
        // Rank-deficient equalities or indefinite curvature: regularized LU.
        let dim = n + me;
        let scale = 1.0 + m.amax();
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (n, n)).copy_from(&m);
        for i in 0..n {
            k[(i, i)] += FALLBACK_REG * scale;
        }
        k.view_mut((n, 0), (me, n)).copy_from(e);
        k.view_mut((0, n), (n, me)).copy_from(&e.transpose());
        for i in 0..me {
            k[(n + i, n + i)] = -FALLBACK_REG * scale;
        }
        let lu = k.lu();
        if lu.is_invertible() {
            Some(KktFactor::Full { lu, n })
        } else {
            None
        }
    }

    /// Solve `M dz + E' dy = r1`, `E dz = r2`.
    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        match self {
            KktFactor::Schur {
                chol_m,
                m_inv_et,
                chol_s,
                e,
            } => {
                let w = chol_m.solve(r1);
                match chol_s {
                    None => Some((w, DVector::zeros(0))),
                    Some(chol_s) => {
                        let dy = chol_s.solve(&(e * &w - r2));
                        let dz = w - m_inv_et * &dy;
                        Some((dz, dy))
                    }
                }
            }
            KktFactor::Full { lu, n } => {
                let mut rhs = DVector::zeros(n + r2.len());
                rhs.rows_mut(0, *n).copy_from(r1);
                rhs.rows_mut(*n, r2.len()).copy_from(r2);
                let sol = lu.solve(&rhs)?;
                Some((sol.rows(0, *n).into_owned(), sol.rows(*n, r2.len()).into_owned()))
            }
        }
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = f64::INFINITY;
    for (x, dx) in v.iter().zip(dv.iter()) {
        if *dx < 0.0 {
            alpha = alpha.min(-x / dx);
        }
    }
    alpha
}

/// Interior-point solve of `problem`.
pub fn solve_qp_with(problem: &QpProblem, settings: &QpSettings) -> PrimalDualSolution {
    let ws = Workspace::new(problem);
    let n = ws.n();
    let me = ws.e.nrows();
    let p = ws.sides.len();
    let b_in = DVector::from_iterator(p, ws.sides.iter().map(|s| s.rhs));
    let et = ws.e.transpose();
    let inner_tol = 0.1 * settings.tol;

    // Starting point: least-squares fit of the inequality targets.
    let (mut z, mut y) = {
        let r1 = -problem.q() + ws.at_mul(&b_in);
        ws.factor(&DVector::from_element(p, 1.0))
            .and_then(|f| ws.solve_newton(&f, &r1, &ws.e_rhs))
            .unwrap_or_else(|| (DVector::zeros(n), DVector::zeros(me)))
    };
    let mut s = (ws.a_mul(&z) - &b_in).map(|v| v.max(1.0));
    let mut lam = DVector::from_element(p, 1.0);

    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut infeas_history: Vec<f64> = Vec::new();
    let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> = None;

    for iter in 0..settings.max_iter {
        iterations = iter;
        let hz = problem.h() * &z;
        let rd = &hz + problem.q() + &et * &y - ws.at_mul(&lam);
        let re = &ws.e * &z - &ws.e_rhs;
        let ri = ws.a_mul(&z) - &s - &b_in;
        let mu = if p > 0 { s.dot(&lam) / p as f64 } else { 0.0 };
        let comp = s.component_mul(&lam).amax();

        let primal_inf = re.amax().max(ri.amax());
        if rd.amax() <= inner_tol && primal_inf <= inner_tol && comp <= inner_tol {
            status = SolveStatus::Optimal;
            break;
        }
        let merit = rd.amax().max(primal_inf).max(comp);
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, z.clone(), y.clone(), s.clone(), lam.clone()));
        }
        infeas_history.push(primal_inf);
        let diverged = z.amax() > 1e12 || y.amax() > 1e12 || lam.amax() > 1e12;
        let stalled = iter >= 15 && mu <= inner_tol && primal_inf > settings.tol && {
            let past = infeas_history[iter - 5];
            primal_inf >= 0.9 * past
        };
        if diverged || stalled || !z.iter().all(|v| v.is_finite()) {
            status = SolveStatus::Infeasible;
            break;
        }

        let d = lam.component_div(&s);
        let factor = match ws.factor(&d) {
            Some(f) => f,
            None => {
                status = SolveStatus::Infeasible;
                break;
            }
        };

        let direction = |rc: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // rc is the complementarity right-hand side.
            let t = (rc - lam.component_mul(&ri)).component_div(&s);
            let r1 = -&rd + ws.at_mul(&t);
            let r2 = -&re;
            let (dz, dy) = ws.solve_newton(&factor, &r1, &r2)?;
            let ds = ws.a_mul(&dz) + &ri;
            let dlam = (rc - lam.component_mul(&ds)).component_div(&s);
            Some((dz, dy, ds, dlam))
        };

        let rc_aff = -s.component_mul(&lam);
        let Some((_, _, ds_aff, dlam_aff)) = direction(&rc_aff) else {
            status = SolveStatus::Infeasible;
            break;
        };
        let alpha_aff = max_step(&s, &ds_aff).min(max_step(&lam, &dlam_aff)).min(1.0);
        let sigma = if p > 0 && mu > 0.0 {
            let mu_aff = (&s + &ds_aff * alpha_aff).dot(&(&lam + &dlam_aff * alpha_aff)) / p as f64;
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let rc = &rc_aff - ds_aff.component_mul(&dlam_aff) + DVector::from_element(p, sigma * mu);
        let Some(mut step) = direction(&rc) else {
            status = SolveStatus::Infeasible;
            break;
        };
        let tau = (1.0 - mu).clamp(0.99, 0.9999);
        let step_length = |ds: &DVector<f64>, dlam: &DVector<f64>| (tau * max_step(&s, ds).min(max_step(&lam, dlam))).min(1.0);
        let mut alpha = step_length(&step.2, &step.3);
        let mu_after = |a: f64, ds: &DVector<f64>, dlam: &DVector<f64>| (&s + ds * a).dot(&(&lam + dlam * a)) / p as f64;
        if p > 0 && primal_inf <= inner_tol && mu > inner_tol && mu_after(alpha, &step.2, &step.3) > mu {
            // The corrector can cycle without reducing mu; take a plain centering step instead.
            let centered = &rc_aff + DVector::from_element(p, 0.5 * mu);
            if let Some(fallback) = direction(&centered) {
                alpha = step_length(&fallback.2, &fallback.3);
                let full = alpha;
                while alpha > 1e-4 * full && mu_after(alpha, &fallback.2, &fallback.3) > (1.0 - 0.01 * alpha) * mu {
                    alpha *= 0.5;
                }
                step = fallback;
            }
        }
        let (dz, dy, ds, dlam) = step;
        z += &dz * alpha;
        y += &dy * alpha;
        s += &ds * alpha;
        lam += &dlam * alpha;
        // Guard against underflow to exact zero.
        s.apply(|v| *v = v.max(1e-300));
        lam.apply(|v| *v = v.max(1e-300));
        iterations = iter + 1;
    }

    // Late iterations can lose accuracy once mu underflows the attainable precision.
    if status != SolveStatus::Optimal {
        if let Some((_, bz, by, bs, blam)) = best {
            (z, y, s, lam) = (bz, by, bs, blam);
        }
    }

    let l = problem.n_inequalities();
    let mut lower = DVector::zeros(l);
    let mut upper = DVector::zeros(l);
    for r in 0..l {
        if let Some(k) = ws.lower_side[r] {
            lower[r] = lam[k];
        }
        if let Some(k) = ws.upper_side[r] {
            upper[r] = lam[k];
        }
    }
    let mut sol = PrimalDualSolution {
        objective: problem.objective(&z),
        z,
        eq_multipliers: y,
        ineq_multipliers_lower: lower,
        ineq_multipliers_upper: upper,
        status,
        kkt_residual: 0.0,
        iterations,
        degenerate: false,
        polished: false,
    };
    sol.kkt_residual = kkt_residual(problem, &sol);

    if status == SolveStatus::Infeasible && settings.polish && sol.z.iter().all(|v| v.is_finite()) {
        // A stalled iterate may still sit on the optimal active set.
        let active = active_sides(&ws, &s, &lam);
        if let Some(polished) = polish(&ws, &active, &sol) {
            if polished.kkt_residual <= settings.tol {
                sol = polished;
                sol.status = SolveStatus::Optimal;
                sol.degenerate = is_degenerate(&ws, &sol, &active, settings);
            }
        }
    } else if status != SolveStatus::Infeasible {
        let active = active_sides(&ws, &s, &lam);
        if settings.polish {
            if let Some(polished) = polish(&ws, &active, &sol) {
                if polished.kkt_residual <= sol.kkt_residual.max(settings.tol) {
                    sol = polished;
                }
            }
        }
        if sol.kkt_residual <= settings.tol {
            sol.status = SolveStatus::Optimal;
        } else if sol.status == SolveStatus::Optimal {
            sol.status = SolveStatus::MaxIter;
        }
        sol.degenerate = is_degenerate(&ws, &sol, &active, settings);
    }
    sol
}

/// Sides whose slack is smaller than their multiplier.
fn active_sides(ws: &Workspace, s: &DVector<f64>, lam: &DVector<f64>) -> Vec<usize> {
    (0..ws.sides.len()).filter(|&k| s[k] < lam[k]).collect()
}

/// Solve the equality-constrained QP on the identified active set and refine.
fn polish(ws: &Workspace, active: &[usize], start: &PrimalDualSolution) -> Option<PrimalDualSolution> {
    let problem = ws.problem;
    let n = ws.n();
    let me = ws.e.nrows();
    let na = active.len();
    let dim = n + me + na;
    let mut k = DMatrix::zeros(dim, dim);
    k.view_mut((0, 0), (n, n)).copy_from(problem.h());
    k.view_mut((n, 0), (me, n)).copy_from(&ws.e);
    k.view_mut((0, n), (n, me)).copy_from(&ws.e.transpose());
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-problem.q()));
    rhs.rows_mut(n, me).copy_from(&ws.e_rhs);
    for (a, &side_idx) in active.iter().enumerate() {
        let side = ws.sides[side_idx];
        for &(j, g) in &ws.rows[side.row] {
            // Stationarity carries -A' lambda; the constraint row is +A.
            k[(j, n + me + a)] = -side.sign * g;
            k[(n + me + a, j)] = side.sign * g;
        }
        rhs[n + me + a] = side.rhs;
    }
    let lu = k.clone().lu();
    let mut x = lu.solve(&rhs)?;
    for _ in 0..2 {
        let r = &rhs - &k * &x;
        let dx = lu.solve(&r)?;
        x += dx;
    }
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let l = problem.n_inequalities();
    let mut lower = DVector::zeros(l);
    let mut upper = DVector::zeros(l);
    for (a, &side_idx) in active.iter().enumerate() {
        let side = ws.sides[side_idx];
        let v = x[n + me + a];
        if side.sign > 0.0 {
            lower[side.row] = v;
        } else {
            upper[side.row] = v;
        }
    }
    let z = x.rows(0, n).into_owned();
    let mut sol = PrimalDualSolution {
        objective: problem.objective(&z),
        z,
        eq_multipliers: x.rows(n, me).into_owned(),
        ineq_multipliers_lower: lower,
        ineq_multipliers_upper: upper,
        status: start.status,
        kkt_residual: 0.0,
        iterations: start.iterations,
        degenerate: false,
        polished: true,
    };
    sol.kkt_residual = kkt_residual(problem, &sol);
    Some(sol)
}

fn is_degenerate(
    ws: &Workspace,
    sol: &PrimalDualSolution,
    active: &[usize],
    settings: &QpSettings,
) -> bool {
    let problem = ws.problem;
    let weak_tol = settings.tol.sqrt() * 1e-2;
    let gz = problem.ineq_matrix() * &sol.z;
    // Weak activity: constraint at its bound with a vanishing multiplier.
    for (r, g) in gz.iter().enumerate() {
        let lo = problem.lower()[r];
        let up = problem.upper()[r];
        if lo.is_finite() && (g - lo).abs() <= weak_tol && sol.ineq_multipliers_lower[r].abs() <= weak_tol {
            return true;
        }
        if up.is_finite() && (up - g).abs() <= weak_tol && sol.ineq_multipliers_upper[r].abs() <= weak_tol {
            return true;
        }
    }
    if !settings.check_degeneracy {
        return false;
    }
    let n = ws.n();
    let rows = ws.e.nrows() + active.len();
    if rows == 0 {
        return false;
    }
    if rows > n {
        return true;
    }
    let mut jac = DMatrix::zeros(rows, n);
    jac.rows_mut(0, ws.e.nrows()).copy_from(&ws.e);
    for (a, &side_idx) in active.iter().enumerate() {
        let side = ws.sides[side_idx];
        for &(j, g) in &ws.rows[side.row] {
            jac[(ws.e.nrows() + a, j)] = side.sign * g;
        }
    }
    let sv = jac.singular_values();
    let max = sv.max();
    let min = sv.min();
    max == 0.0 || min <= RANK_TOL * max
}

/// Nearest symmetric matrix (Frobenius) whose eigenvalues are all `>= floor`.
pub fn project_psd(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>, QpError> {
    check_len("matrix columns", m.nrows(), m.ncols())?;
    check_finite("matrix", m.as_slice())?;
    check_finite("floor", &[floor])?;
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= floor {
        return Ok(sym);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    Ok(symmetrize(&out))
}
