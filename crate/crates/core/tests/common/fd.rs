//! Finite-difference oracle for the action-value gradient.
//!
//! Perturbed optimal values are computed by re-solving the KKT system of the
//! base solution's active set, with rank-two updates for single entries of
//! the equality matrix. Every perturbed solution is checked for primal
//! feasibility and multiplier signs; when the active set would change, the
//! perturbed problem is re-solved from scratch instead.

use nalgebra::{DMatrix, DVector};
use qprl::approximator::{ParamSlot, ThetaParams, assemble_action_value_qp};
use qprl::qp::{PrimalDualSolution, QpProblem, QpSettings, solve_qp_with};

const ACTIVE_TOL: f64 = 1e-8;

#[derive(Clone, Copy)]
enum Side {
    Lower,
    Upper,
}

pub struct ActiveSetModel {
    n: usize,
    n_eq: usize,
    active: Vec<(usize, Side)>,
    kinv: DMatrix<f64>,
    x: DVector<f64>,
    problem: QpProblem,
}

fn equality_rows(p: &QpProblem) -> (DMatrix<f64>, DVector<f64>) {
    let n = p.dim();
    let m = p.eq_matrix().nrows();
    let pins = p.fixed();
    let mut e = DMatrix::zeros(m + pins.len(), n);
    let mut b = DVector::zeros(m + pins.len());
    e.view_mut((0, 0), (m, n)).copy_from(p.eq_matrix());
    b.rows_mut(0, m).copy_from(p.eq_rhs());
    for (k, &(j, v)) in pins.iter().enumerate() {
        e[(m + k, j)] = 1.0;
        b[m + k] = v;
    }
    (e, b)
}

fn kkt_system(p: &QpProblem, active: &[(usize, Side)]) -> (DMatrix<f64>, DVector<f64>, usize) {
    let n = p.dim();
    let (e, b) = equality_rows(p);
    let k = e.nrows() + active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    let mut rhs = DVector::zeros(n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(p.h());
    rhs.rows_mut(0, n).copy_from(&(-p.q()));
    let mut put = |r: usize, row: DVector<f64>, v: f64| {
        for t in 0..n {
            kkt[(n + r, t)] = row[t];
            kkt[(t, n + r)] = row[t];
        }
        rhs[n + r] = v;
    };
    for r in 0..e.nrows() {
        put(r, e.row(r).transpose(), b[r]);
    }
    for (a, &(r, side)) in active.iter().enumerate() {
        let v = match side {
            Side::Lower => p.lower()[r],
            Side::Upper => p.upper()[r],
        };
        put(e.nrows() + a, p.ineq_matrix().row(r).transpose(), v);
    }
    (kkt, rhs, e.nrows())
}

impl ActiveSetModel {
    /// Active set read off the primal solution.
    pub fn new(p: &QpProblem, sol: &PrimalDualSolution) -> Option<Self> {
        let gz = p.ineq_matrix() * &sol.z;
        let mut active = Vec::new();
        for r in 0..p.n_inequalities() {
            if p.lower()[r].is_finite() && gz[r] - p.lower()[r] <= ACTIVE_TOL {
                active.push((r, Side::Lower));
            } else if p.upper()[r].is_finite() && p.upper()[r] - gz[r] <= ACTIVE_TOL {
                active.push((r, Side::Upper));
            }
        }
        let (kkt, rhs, n_eq) = kkt_system(p, &active);
        let kinv = kkt.try_inverse()?;
        let x = &kinv * rhs;
        let model = Self {
            n: p.dim(),
            n_eq,
            active,
            kinv,
            x,
            problem: p.clone(),
        };
        model.check(p, &model.x)?;
        Some(model)
    }

    /// Optimal value of `p` if the active set is unchanged.
    fn check(&self, p: &QpProblem, x: &DVector<f64>) -> Option<f64> {
        let z = x.rows(0, self.n).into_owned();
        let gz = p.ineq_matrix() * &z;
        for r in 0..p.n_inequalities() {
            if gz[r] < p.lower()[r] - ACTIVE_TOL || gz[r] > p.upper()[r] + ACTIVE_TOL {
                return None;
            }
        }
        for (a, &(_, side)) in self.active.iter().enumerate() {
            let lambda = x[self.n + self.n_eq + a];
            let ok = match side {
                Side::Lower => lambda <= 1e-12,
                Side::Upper => lambda >= -1e-12,
            };
            if !ok {
                return None;
            }
        }
        Some(p.objective(&z))
    }

    pub fn value(&self) -> f64 {
        self.problem.objective(&self.x.rows(0, self.n).into_owned())
    }

    /// Correction to the base KKT solution when equality-matrix entry `(i, j)` is shifted by `h`.
    fn eq_entry_correction(&self, i: usize, j: usize, h: f64) -> Option<DVector<f64>> {
        let r = self.n + i;
        let ku = DMatrix::from_columns(&[self.kinv.column(r).into_owned(), self.kinv.column(j).into_owned()]);
        let vtx = DVector::from_row_slice(&[h * self.x[j], h * self.x[r]]);
        let small = DMatrix::from_row_slice(2, 2, &[
            1.0 + h * self.kinv[(j, r)],
            h * self.kinv[(j, j)],
            h * self.kinv[(r, r)],
            1.0 + h * self.kinv[(r, j)],
        ]);
        let y = small.lu().solve(&vtx)?;
        let correction = ku * y;
        let mut eq = self.problem.eq_matrix().clone();
        eq[(i, j)] += h;
        let p = self.problem.clone().with_equalities(eq, self.problem.eq_rhs().clone()).ok()?;
        self.check(&p, &(&self.x - &correction))?;
        Some(correction)
    }

    /// `Q(C + h e_ij) - Q(C - h e_ij)` computed from the two corrections
    /// without subtracting the perturbed values.
    pub fn eq_entry_difference(&self, i: usize, j: usize, h: f64) -> Option<f64> {
        let plus = self.eq_entry_correction(i, j, h)?;
        let minus = self.eq_entry_correction(i, j, -h)?;
        let dz = (&minus - &plus).rows(0, self.n).into_owned();
        let mid = (&self.x - (&plus + &minus) * 0.5).rows(0, self.n).into_owned();
        Some(dz.dot(&(self.problem.h() * mid + self.problem.q())))
    }

    /// Value of another problem with the same structure and active set.
    pub fn resolve(&self, p: &QpProblem) -> Option<f64> {
        let (kkt, rhs, _) = kkt_system(p, &self.active);
        let x = kkt.lu().solve(&rhs)?;
        self.check(p, &x)
    }
}

pub struct FdReport {
    pub checked: usize,
    pub worst_relative: f64,
    pub fallbacks: usize,
}

fn perturbed(theta: &ThetaParams, slot: &ParamSlot, h: f64) -> ThetaParams {
    let mut t = theta.clone();
    t.set(slot, theta.get(slot) + h);
    t
}

/// Central differences of `Q(s, a)` over every trainable slot against `g`.
pub fn check_gradient(
    theta: &ThetaParams,
    s: &DVector<f64>,
    a: &DVector<f64>,
    g: &DVector<f64>,
    h: f64,
) -> FdReport {
    let settings = QpSettings {
        tol: 1e-10,
        ..QpSettings::default()
    };
    let p = assemble_action_value_qp(theta, s, a).unwrap();
    let sol = solve_qp_with(&p, &settings);
    let model = ActiveSetModel::new(&p, &sol);
    if let Some(m) = &model {
        assert!((m.value() - sol.objective).abs() <= 1e-9 * (1.0 + sol.objective.abs()));
    }
    let full = |t: &ThetaParams| solve_qp_with(&assemble_action_value_qp(t, s, a).unwrap(), &settings).objective;
    let mut report = FdReport {
        checked: 0,
        worst_relative: 0.0,
        fallbacks: 0,
    };
    for (k, slot) in theta.trainable.iter().enumerate() {
        let difference = model.as_ref().and_then(|model| match *slot {
            ParamSlot::EqMatrix { row, col } => model.eq_entry_difference(row, col, h),
            _ => {
                let at = |sign: f64| model.resolve(&assemble_action_value_qp(&perturbed(theta, slot, sign * h), s, a).unwrap());
                at(1.0).zip(at(-1.0)).map(|(plus, minus)| plus - minus)
            }
        });
        let fd = match difference {
            Some(d) => d / (2.0 * h),
            None => {
                report.fallbacks += 1;
                (full(&perturbed(theta, slot, h)) - full(&perturbed(theta, slot, -h))) / (2.0 * h)
            }
        };
        if g[k].abs() > 1e-8 {
            report.checked += 1;
            report.worst_relative = report.worst_relative.max((fd - g[k]).abs() / g[k].abs());
        }
    }
    report
}
