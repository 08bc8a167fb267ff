//! QP-based value and action-value approximators.
//!
//! `V(s)` and `Q(s, a)` are optimal values of the parameterized QP
//!
//! ```text
//!     min_{z, sigma}  1/2 z' H z + q' z + c + w' sigma
//!     s.t.            C z = 0
//!                     lb - sigma <= G z <= ub + sigma,   sigma >= 0
//!                     x0 = s            (and u0 = a for Q)
//! ```
//!
//! where `H` and `q` are block-diagonal stacks of the discounted stage blocks.
//! The solver sees the variable vector `[z; sigma]`.

pub(crate) mod format;
mod theta;

pub use format::{read_theta, theta_from_text, theta_to_text, write_theta};
pub use theta::{DecisionLayout, ParamSlot, ThetaParams, all_eq_slots};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, check_dim};
use crate::qp::{PrimalDualSolution, QpProblem, QpSettings, solve_qp_with};
use crate::structure::BandedReference;

/// Added to the primal Hessian block for solving only, never stored in theta.
pub const SOLVE_REGULARIZATION: f64 = 1e-9;

/// Optimal value of `V` or `Q` together with the full primal-dual solution.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub solution: PrimalDualSolution,
}

impl Evaluation {
    pub fn is_optimal(&self) -> bool {
        self.solution.is_optimal()
    }
}

/// Multipliers of an approximator solution split by constraint family.
#[derive(Debug, Clone)]
pub struct MultiplierView {
    /// `C z = 0`
    pub chi: DVector<f64>,
    /// `x0 = s`
    pub xi: DVector<f64>,
    /// `u0 = a`; empty for `V`.
    pub zeta: DVector<f64>,
    /// `G z + sigma >= lb`
    pub upsilon: DVector<f64>,
    /// `G z - sigma <= ub`
    pub eta: DVector<f64>,
    /// `sigma >= 0`
    pub mu: DVector<f64>,
}

impl MultiplierView {
    pub fn new(theta: &ThetaParams, solution: &PrimalDualSolution) -> Self {
        let m = theta.eq_matrix.nrows();
        let nx = theta.layout.n_x;
        let pins = solution.eq_multipliers.len() - m - nx;
        let l = theta.n_ineq();
        Self {
            chi: solution.eq_multipliers.rows(0, m).into_owned(),
            xi: solution.eq_multipliers.rows(m, nx).into_owned(),
            zeta: solution.eq_multipliers.rows(m + nx, pins).into_owned(),
            upsilon: solution.ineq_multipliers_lower.rows(0, l).into_owned(),
            eta: solution.ineq_multipliers_upper.rows(l, l).into_owned(),
            mu: solution.ineq_multipliers_lower.rows(2 * l, l).into_owned(),
        }
    }
}

/// Primal part `z` of a solution (the slack block is dropped).
pub fn decision(theta: &ThetaParams, solution: &PrimalDualSolution) -> DVector<f64> {
    solution.z.rows(0, theta.layout.len()).into_owned()
}

/// Slack part `sigma` of a solution.
pub fn slacks(theta: &ThetaParams, solution: &PrimalDualSolution) -> DVector<f64> {
    solution.z.rows(theta.layout.len(), theta.n_ineq()).into_owned()
}

fn assemble(theta: &ThetaParams, s: &DVector<f64>, a: Option<&DVector<f64>>) -> Result<QpProblem> {
    theta.validate()?;
    let layout = theta.layout;
    check_dim("state", layout.n_x, s.len())?;
    if let Some(a) = a {
        check_dim("action", layout.n_u, a.len())?;
    }
    let nz = layout.len();
    let l = theta.n_ineq();
    let n = nz + l;
    let gamma = theta.discount;

    let mut h = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    for k in 0..layout.horizon {
        let w = gamma.powi(k as i32);
        let r = layout.stage_slice(k);
        h.view_mut((r.start, r.start), (r.len(), r.len()))
            .copy_from(&(&theta.stage_cost[k] * w));
        q.rows_mut(r.start, r.len()).copy_from(&(&theta.stage_linear[k] * w));
    }
    let wf = gamma.powi(layout.horizon as i32);
    let r = layout.state_slice(layout.horizon);
    h.view_mut((r.start, r.start), (r.len(), r.len()))
        .copy_from(&(&theta.terminal_cost * wf));
    q.rows_mut(r.start, r.len()).copy_from(&(&theta.terminal_linear * wf));
    for i in 0..nz {
        h[(i, i)] += SOLVE_REGULARIZATION;
    }
    for row in 0..l {
        q[nz + row] = theta.row_discount(row) * theta.slack_weights[row];
    }

    let mut eq = DMatrix::zeros(theta.eq_matrix.nrows(), n);
    eq.view_mut((0, 0), (theta.eq_matrix.nrows(), nz)).copy_from(&theta.eq_matrix);
    let eq_rhs = DVector::zeros(theta.eq_matrix.nrows());

    let mut g = DMatrix::zeros(3 * l, n);
    let mut lb = DVector::zeros(3 * l);
    let mut ub = DVector::zeros(3 * l);
    for row in 0..l {
        g.view_mut((row, 0), (1, nz)).copy_from(&theta.ineq_matrix.row(row));
        g[(row, nz + row)] = 1.0;
        lb[row] = theta.lower[row];
        ub[row] = f64::INFINITY;

        g.view_mut((l + row, 0), (1, nz)).copy_from(&theta.ineq_matrix.row(row));
        g[(l + row, nz + row)] = -1.0;
        lb[l + row] = f64::NEG_INFINITY;
        ub[l + row] = theta.upper[row];

        g[(2 * l + row, nz + row)] = 1.0;
        lb[2 * l + row] = 0.0;
        ub[2 * l + row] = f64::INFINITY;
    }

    let mut fixed: Vec<(usize, f64)> = layout.state_slice(0).zip(s.iter().copied()).collect();
    if let Some(a) = a {
        fixed.extend(layout.action_slice(0).zip(a.iter().copied()));
    }

    Ok(QpProblem::new(h, q)?
        .with_offset(theta.offset)?
        .with_equalities(eq, eq_rhs)?
        .with_inequalities(g, lb, ub)?
        .with_fixed(fixed)?)
}

/// QP whose optimal value is `V(s)`.
pub fn assemble_value_qp(theta: &ThetaParams, s: &DVector<f64>) -> Result<QpProblem> {
    assemble(theta, s, None)
}

/// QP whose optimal value is `Q(s, a)`.
pub fn assemble_action_value_qp(
    theta: &ThetaParams,
    s: &DVector<f64>,
    a: &DVector<f64>,
) -> Result<QpProblem> {
    assemble(theta, s, Some(a))
}

pub fn evaluate_v(theta: &ThetaParams, s: &DVector<f64>, settings: &QpSettings) -> Result<Evaluation> {
    let problem = assemble_value_qp(theta, s)?;
    let solution = solve_qp_with(&problem, settings);
    Ok(Evaluation {
        value: solution.objective,
        solution,
    })
}

pub fn evaluate_q(
    theta: &ThetaParams,
    s: &DVector<f64>,
    a: &DVector<f64>,
    settings: &QpSettings,
) -> Result<Evaluation> {
    let problem = assemble_action_value_qp(theta, s, a)?;
    let solution = solve_qp_with(&problem, settings);
    Ok(Evaluation {
        value: solution.objective,
        solution,
    })
}

/// Greedy action: the `u0` block of the value QP's minimizer.
pub fn policy(theta: &ThetaParams, s: &DVector<f64>, settings: &QpSettings) -> Result<DVector<f64>> {
    let eval = evaluate_v(theta, s, settings)?;
    if !eval.is_optimal() {
        return Err(Error::NonOptimal(eval.solution.status));
    }
    let r = theta.layout.action_slice(0);
    Ok(eval.solution.z.rows(r.start, r.len()).into_owned())
}

/// Gradient of `Q` over the trainable slots.
#[derive(Debug, Clone)]
pub struct ThetaGradient {
    pub values: DVector<f64>,
    /// False when the solution's multipliers may not be unique.
    pub reliable: bool,
}

/// `d Q(s, a) / d theta`, evaluated as the parameter gradient of the
/// Lagrangian at the primal-dual solution of the action-value QP.
pub fn grad_q_theta(
    theta: &ThetaParams,
    s: &DVector<f64>,
    a: &DVector<f64>,
    solution: &PrimalDualSolution,
) -> Result<ThetaGradient> {
    let layout = theta.layout;
    check_dim("state", layout.n_x, s.len())?;
    check_dim("action", layout.n_u, a.len())?;
    check_dim(
        "solution",
        layout.len() + theta.n_ineq(),
        solution.z.len(),
    )?;
    let z = decision(theta, solution);
    let mult = MultiplierView::new(theta, solution);
    let gamma = theta.discount;
    let horizon = layout.horizon;

    let quad = |v: &DVector<f64>, row: usize, col: usize| {
        if row == col {
            0.5 * v[row] * v[row]
        } else {
            v[row] * v[col]
        }
    };
    let stages = |stage: Option<usize>| match stage {
        Some(k) => k..k + 1,
        None => 0..horizon,
    };

    let mut g = DVector::zeros(theta.n_trainable());
    for (i, slot) in theta.trainable.iter().enumerate() {
        g[i] = match *slot {
            ParamSlot::StageCost { stage, row, col } => stages(stage)
                .map(|k| {
                    let v = z.rows(layout.stage_slice(k).start, layout.stage_len()).into_owned();
                    gamma.powi(k as i32) * quad(&v, row, col)
                })
                .sum(),
            ParamSlot::TerminalCost { row, col } => {
                let v = z.rows(layout.state_slice(horizon).start, layout.n_x).into_owned();
                gamma.powi(horizon as i32) * quad(&v, row, col)
            }
            ParamSlot::StageLinear { stage, index } => stages(stage)
                .map(|k| gamma.powi(k as i32) * z[layout.stage_slice(k).start + index])
                .sum(),
            ParamSlot::TerminalLinear { index } => {
                gamma.powi(horizon as i32) * z[layout.state_slice(horizon).start + index]
            }
            ParamSlot::Offset => 1.0,
            ParamSlot::EqMatrix { row, col } => mult.chi[row] * z[col],
            ParamSlot::IneqMatrix { row, col } => (mult.eta[row] - mult.upsilon[row]) * z[col],
        };
    }
    Ok(ThetaGradient {
        values: g,
        reliable: !solution.degenerate,
    })
}

/// Box bounds and cost used to build the default point-mass parameterization.
#[derive(Debug, Clone)]
pub struct PointMassTheta {
    pub horizon: usize,
    pub discount: f64,
    /// Diagonal of the state part of the (shared) stage cost block.
    pub state_cost: Vec<f64>,
    pub offset: f64,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub action_lower: Vec<f64>,
    pub action_upper: Vec<f64>,
    pub slack_weight: f64,
    /// Whether the entries of the equality matrix are learnable.
    pub learn_constraints: bool,
}

impl PointMassTheta {
    /// Stage blocks `diag(theta_1..theta_nx, 0..0)` shared across stages,
    /// identity terminal cost, zero linear terms, offset `theta_{nx+1}`,
    /// identity inequality rows over the state/action boxes, and the equality
    /// matrix initialized to the banded reference.
    pub fn build(&self, band: &BandedReference) -> Result<ThetaParams> {
        let n_x = band.a.nrows();
        let n_u = band.b.ncols();
        check_dim("state cost diagonal", n_x, self.state_cost.len())?;
        check_dim("state lower bound", n_x, self.state_lower.len())?;
        check_dim("state upper bound", n_x, self.state_upper.len())?;
        check_dim("action lower bound", n_u, self.action_lower.len())?;
        check_dim("action upper bound", n_u, self.action_upper.len())?;
        check_dim("band horizon", self.horizon, band.horizon)?;
        let layout = DecisionLayout::new(n_x, n_u, self.horizon);
        let mut theta = ThetaParams::zeros(layout, self.discount);
        let mut trainable = Vec::new();
        for (i, &v) in self.state_cost.iter().enumerate() {
            let slot = ParamSlot::StageCost {
                stage: None,
                row: i,
                col: i,
            };
            theta.set(&slot, v);
            trainable.push(slot);
        }
        theta.offset = self.offset;
        trainable.push(ParamSlot::Offset);
        theta.eq_matrix = band.c0.clone();
        if self.learn_constraints {
            trainable.extend(all_eq_slots(band.c0.nrows(), band.c0.ncols()));
        }
        for k in 0..=self.horizon {
            for (j, i) in layout.state_slice(k).enumerate() {
                theta.lower[i] = self.state_lower[j];
                theta.upper[i] = self.state_upper[j];
            }
            if k < self.horizon {
                for (j, i) in layout.action_slice(k).enumerate() {
                    theta.lower[i] = self.action_lower[j];
                    theta.upper[i] = self.action_upper[j];
                }
            }
        }
        theta.slack_weights.fill(self.slack_weight);
        theta.trainable = trainable;
        theta.validate()?;
        Ok(theta)
    }
}
