#![allow(dead_code)]

pub mod fd;
pub mod pointmass;
pub mod update;

use nalgebra::{DMatrix, DVector};
use qprl::qp::QpProblem;
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;

pub fn normal_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn normal_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Strictly convex QP with a known feasible point: `m` equalities and `l`
/// two-sided rows, some bounds one-sided or infinite.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize, m: usize, l: usize) -> QpProblem {
    let f = normal_matrix(rng, n, n);
    let h = &f * f.transpose() + DMatrix::identity(n, n) * 0.1;
    let q = normal_vector(rng, n) * 3.0;
    let z0 = normal_vector(rng, n);
    let mut p = QpProblem::new(h, q).unwrap();
    if m > 0 {
        let c = normal_matrix(rng, m, n);
        let b = &c * &z0;
        p = p.with_equalities(c, b).unwrap();
    }
    if l > 0 {
        let g = normal_matrix(rng, l, n);
        let gz = &g * &z0;
        let mut lb = DVector::zeros(l);
        let mut ub = DVector::zeros(l);
        for i in 0..l {
            let kind = rng.random_range(0..4);
            lb[i] = if kind == 1 { f64::NEG_INFINITY } else { gz[i] - rng.random_range(0.0..1.0) };
            ub[i] = if kind == 2 { f64::INFINITY } else { gz[i] + rng.random_range(0.0..1.0) };
        }
        p = p.with_inequalities(g, lb, ub).unwrap();
    }
    p
}

/// Minimum over every choice of active set (each row inactive, at its lower
/// bound or at its upper bound) of the equality-constrained minimizer,
/// keeping only primal-feasible candidates.
pub fn enumeration_oracle(p: &QpProblem) -> f64 {
    let n = p.dim();
    let l = p.n_inequalities();
    let mut best = f64::INFINITY;
    for code in 0..3usize.pow(l as u32) {
        let mut rows: Vec<(DVector<f64>, f64)> = (0..p.eq_matrix().nrows())
            .map(|i| (p.eq_matrix().row(i).transpose(), p.eq_rhs()[i]))
            .collect();
        let mut c = code;
        let mut valid = true;
        for i in 0..l {
            let choice = c % 3;
            c /= 3;
            let bound = match choice {
                0 => continue,
                1 => p.lower()[i],
                _ => p.upper()[i],
            };
            if !bound.is_finite() {
                valid = false;
                break;
            }
            rows.push((p.ineq_matrix().row(i).transpose(), bound));
        }
        if !valid || rows.len() > n {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(p.h());
        rhs.rows_mut(0, n).copy_from(&(-p.q()));
        for (j, (a, b)) in rows.iter().enumerate() {
            for t in 0..n {
                kkt[(n + j, t)] = a[t];
                kkt[(t, n + j)] = a[t];
            }
            rhs[n + j] = *b;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let z = sol.rows(0, n).into_owned();
        let eq_ok = (p.eq_matrix() * &z - p.eq_rhs()).amax() <= 1e-9;
        let gz = p.ineq_matrix() * &z;
        let ineq_ok = (0..l).all(|i| gz[i] >= p.lower()[i] - 1e-9 && gz[i] <= p.upper()[i] + 1e-9);
        if eq_ok && ineq_ok {
            best = best.min(p.objective(&z));
        }
    }
    best
}
