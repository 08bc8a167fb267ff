use nalgebra::{DMatrix, DVector};
use qprl::approximator::{ParamSlot, ThetaParams, all_eq_slots};
use qprl::learner::UpdateConfig;
use qprl::qp::{QpProblem, QpSettings, solve_qp_with};
use qprl::structure::{BandedReference, Trajectory, build_banded_c, build_c_mask};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(x)
}

pub fn rates(cfg: &UpdateConfig, theta: &ThetaParams) -> DVector<f64> {
    DVector::from_iterator(
        theta.n_trainable(),
        theta
            .trainable
            .iter()
            .map(|s| if s.is_constraint() { cfg.alpha_constraint } else { cfg.alpha_cost }),
    )
}

/// Scalar system with `N = 2`, a trainable diagonal stage cost and all of `C`.
pub fn small_instance(rng: &mut ChaCha8Rng) -> (ThetaParams, BandedReference, Vec<Trajectory>) {
    let band = build_banded_c(&DMatrix::from_element(1, 1, 0.95), &DMatrix::from_element(1, 1, 0.4), 2).unwrap();
    let mut theta = ThetaParams::zeros(band.layout(), 0.9);
    theta.eq_matrix = &band.c0 + DMatrix::from_fn(2, 5, |_, _| rng.random_range(-0.2..0.2));
    let slot = ParamSlot::StageCost { stage: None, row: 0, col: 0 };
    theta.set(&slot, rng.random_range(0.05..0.5));
    theta.set(&ParamSlot::StageCost { stage: None, row: 1, col: 1 }, 0.3);
    theta.trainable = vec![slot, ParamSlot::Offset];
    theta.trainable.extend(all_eq_slots(2, 5));
    let sequences = (0..3)
        .map(|_| Trajectory {
            states: (0..3).map(|_| v(&[rng.random_range(-1.0..1.0)])).collect(),
            actions: (0..2).map(|_| v(&[rng.random_range(-1.0..1.0)])).collect(),
        })
        .collect();
    (theta, band, sequences)
}

/// The whole update program over `[d; t]`, assembled directly: `t_e >= |C_e
/// + d_e - C0_e|` for masked entries and `theta_i + d_i >= floor` on the
/// trainable diagonal cost entry.
pub fn program_oracle(
    theta: &ThetaParams,
    g: &DVector<f64>,
    sequences: &[Trajectory],
    cfg: &UpdateConfig,
    band: &BandedReference,
) -> f64 {
    let k = theta.n_trainable();
    let mask = build_c_mask(&cfg.mask, band);
    let entries: Vec<(usize, usize, usize)> = theta
        .trainable
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match *s {
            ParamSlot::EqMatrix { row, col } => Some((i, row, col)),
            _ => None,
        })
        .collect();
    let masked: Vec<&(usize, usize, usize)> = entries.iter().filter(|e| mask[(e.1, e.2)] > 0.0).collect();
    let n = k + masked.len();
    let alpha = rates(cfg, theta);
    let mut h = DMatrix::identity(n, n) * 2.0;
    for j in k..n {
        h[(j, j)] = 0.0;
    }
    let mut q = DVector::zeros(n);
    for i in 0..k {
        q[i] = -alpha[i] * g[i];
    }
    let mut offset = 0.0;
    for tr in sequences {
        let tau = tr.decision_vector();
        let residual = &theta.eq_matrix * &tau;
        offset += cfg.beta * residual.norm_squared();
        for &(a, ra, ca) in &entries {
            q[a] += 2.0 * cfg.beta * residual[ra] * tau[ca];
            for &(b, rb, cb) in &entries {
                if ra == rb {
                    h[(a, b)] += 2.0 * cfg.beta * tau[ca] * tau[cb];
                }
            }
        }
    }
    let rows = 2 * masked.len() + 1;
    let mut gm = DMatrix::zeros(rows, n);
    let mut lower = DVector::zeros(rows);
    for (m, &&(i, r, c)) in masked.iter().enumerate() {
        let e = theta.eq_matrix[(r, c)] - band.c0[(r, c)];
        q[k + m] = mask[(r, c)];
        gm[(2 * m, i)] = 1.0;
        gm[(2 * m, k + m)] = 1.0;
        lower[2 * m] = -e;
        gm[(2 * m + 1, i)] = -1.0;
        gm[(2 * m + 1, k + m)] = 1.0;
        lower[2 * m + 1] = e;
    }
    gm[(rows - 1, 0)] = 1.0;
    lower[rows - 1] = cfg.psd_floor - theta.flatten()[0];
    let upper = DVector::from_element(rows, f64::INFINITY);
    let p = QpProblem::new(h, q)
        .unwrap()
        .with_offset(offset)
        .unwrap()
        .with_inequalities(gm, lower, upper)
        .unwrap();
    let sol = solve_qp_with(&p, &QpSettings { tol: 1e-12, ..QpSettings::default() });
    assert!(sol.is_optimal());
    sol.objective
}

