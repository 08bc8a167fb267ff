use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, check_dim};

/// Index maps for the decision vector `z = [x0; u0; x1; u1; ...; x_{N-1}; u_{N-1}; x_N]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionLayout {
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
}

impl DecisionLayout {
    pub fn new(n_x: usize, n_u: usize, horizon: usize) -> Self {
        Self { n_x, n_u, horizon }
    }

    pub fn stage_len(&self) -> usize {
        self.n_x + self.n_u
    }

    pub fn len(&self) -> usize {
        self.stage_len() * self.horizon + self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of the dynamics-style equality matrix.
    pub fn n_dynamics_rows(&self) -> usize {
        self.n_x * self.horizon
    }

    /// `x_k` for `k` in `0..=N`.
    pub fn state_slice(&self, k: usize) -> Range<usize> {
        assert!(k <= self.horizon, "state index {k} beyond horizon");
        let start = k * self.stage_len();
        start..start + self.n_x
    }

    /// `u_k` for `k` in `0..N`.
    pub fn action_slice(&self, k: usize) -> Range<usize> {
        assert!(k < self.horizon, "action index {k} beyond horizon");
        let start = k * self.stage_len() + self.n_x;
        start..start + self.n_u
    }

    /// `[x_k; u_k]` for `k` in `0..N`.
    pub fn stage_slice(&self, k: usize) -> Range<usize> {
        assert!(k < self.horizon, "stage index {k} beyond horizon");
        let start = k * self.stage_len();
        start..start + self.stage_len()
    }

    /// Stage that owns entry `index` of `z`; the terminal state belongs to stage `N`.
    pub fn stage_of(&self, index: usize) -> usize {
        assert!(index < self.len(), "index {index} outside decision vector");
        (index / self.stage_len()).min(self.horizon)
    }
}

/// One learnable scalar and the matrix entries it controls.
///
/// Off-diagonal cost entries are symmetric pairs: the slot writes both
/// `(row, col)` and `(col, row)`. A `stage` of `None` ties the entry across
/// all stage blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSlot {
    StageCost {
        stage: Option<usize>,
        row: usize,
        col: usize,
    },
    TerminalCost {
        row: usize,
        col: usize,
    },
    StageLinear {
        stage: Option<usize>,
        index: usize,
    },
    TerminalLinear {
        index: usize,
    },
    Offset,
    EqMatrix {
        row: usize,
        col: usize,
    },
    IneqMatrix {
        row: usize,
        col: usize,
    },
}

impl ParamSlot {
    /// Slots of the constraint matrices use the constraint learning rate.
    pub fn is_constraint(&self) -> bool {
        matches!(self, ParamSlot::EqMatrix { .. } | ParamSlot::IneqMatrix { .. })
    }

    pub fn is_cost(&self) -> bool {
        !self.is_constraint()
    }
}

/// Full parameter set of the QP approximator.
///
/// Cost blocks are stored without discount; `gamma^k` weights are applied at
/// assembly time.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    pub layout: DecisionLayout,
    pub discount: f64,
    pub stage_cost: Vec<DMatrix<f64>>,
    pub terminal_cost: DMatrix<f64>,
    pub stage_linear: Vec<DVector<f64>>,
    pub terminal_linear: DVector<f64>,
    pub offset: f64,
    pub eq_matrix: DMatrix<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub slack_weights: DVector<f64>,
    pub trainable: Vec<ParamSlot>,
}

impl ThetaParams {
    /// Zero stage costs, identity terminal cost, zero constraint matrix,
    /// identity inequality rows with infinite bounds, nothing trainable.
    pub fn zeros(layout: DecisionLayout, discount: f64) -> Self {
        let n = layout.len();
        let stage = layout.stage_len();
        Self {
            layout,
            discount,
            stage_cost: vec![DMatrix::zeros(stage, stage); layout.horizon],
            terminal_cost: DMatrix::identity(layout.n_x, layout.n_x),
            stage_linear: vec![DVector::zeros(stage); layout.horizon],
            terminal_linear: DVector::zeros(layout.n_x),
            offset: 0.0,
            eq_matrix: DMatrix::zeros(layout.n_dynamics_rows(), n),
            ineq_matrix: DMatrix::identity(n, n),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            slack_weights: DVector::zeros(n),
            trainable: Vec::new(),
        }
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_matrix.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layout;
        if l.horizon == 0 || l.n_x == 0 {
            return Err(Error::InvalidParams("horizon and state dimension must be positive".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::InvalidParams(format!("discount {} outside (0, 1)", self.discount)));
        }
        let stage = l.stage_len();
        check_dim("stage cost blocks", l.horizon, self.stage_cost.len())?;
        check_dim("stage linear blocks", l.horizon, self.stage_linear.len())?;
        for (h, q) in self.stage_cost.iter().zip(&self.stage_linear) {
            check_dim("stage cost rows", stage, h.nrows())?;
            check_dim("stage cost columns", stage, h.ncols())?;
            check_dim("stage linear", stage, q.len())?;
        }
        check_dim("terminal cost rows", l.n_x, self.terminal_cost.nrows())?;
        check_dim("terminal cost columns", l.n_x, self.terminal_cost.ncols())?;
        check_dim("terminal linear", l.n_x, self.terminal_linear.len())?;
        check_dim("equality matrix columns", l.len(), self.eq_matrix.ncols())?;
        check_dim("inequality matrix columns", l.len(), self.ineq_matrix.ncols())?;
        let rows = self.n_ineq();
        check_dim("lower bounds", rows, self.lower.len())?;
        check_dim("upper bounds", rows, self.upper.len())?;
        check_dim("slack weights", rows, self.slack_weights.len())?;
        if self.slack_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParams("slack weights must be finite and nonnegative".into()));
        }
        for r in 0..rows {
            if !(self.lower[r] <= self.upper[r]) {
                return Err(Error::InvalidParams(format!("inverted bounds in row {r}")));
            }
        }
        for slot in &self.trainable {
            self.check_slot(slot)?;
        }
        Ok(())
    }

    fn check_slot(&self, slot: &ParamSlot) -> Result<()> {
        let l = self.layout;
        let ok = match *slot {
            ParamSlot::StageCost { stage, row, col } => {
                stage.is_none_or(|k| k < l.horizon) && row < l.stage_len() && col < l.stage_len()
            }
            ParamSlot::TerminalCost { row, col } => row < l.n_x && col < l.n_x,
            ParamSlot::StageLinear { stage, index } => {
                stage.is_none_or(|k| k < l.horizon) && index < l.stage_len()
            }
            ParamSlot::TerminalLinear { index } => index < l.n_x,
            ParamSlot::Offset => true,
            ParamSlot::EqMatrix { row, col } => row < self.eq_matrix.nrows() && col < l.len(),
            ParamSlot::IneqMatrix { row, col } => row < self.n_ineq() && col < l.len(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("trainable slot {slot:?} out of range")))
        }
    }

    /// Current value of one slot; tied stage entries read stage 0.
    pub fn get(&self, slot: &ParamSlot) -> f64 {
        match *slot {
            ParamSlot::StageCost { stage, row, col } => self.stage_cost[stage.unwrap_or(0)][(row, col)],
            ParamSlot::TerminalCost { row, col } => self.terminal_cost[(row, col)],
            ParamSlot::StageLinear { stage, index } => self.stage_linear[stage.unwrap_or(0)][index],
            ParamSlot::TerminalLinear { index } => self.terminal_linear[index],
            ParamSlot::Offset => self.offset,
            ParamSlot::EqMatrix { row, col } => self.eq_matrix[(row, col)],
            ParamSlot::IneqMatrix { row, col } => self.ineq_matrix[(row, col)],
        }
    }

    pub fn set(&mut self, slot: &ParamSlot, value: f64) {
        let stages = |stage: Option<usize>, horizon: usize| match stage {
            Some(k) => k..k + 1,
            None => 0..horizon,
        };
        match *slot {
            ParamSlot::StageCost { stage, row, col } => {
                for k in stages(stage, self.layout.horizon) {
                    self.stage_cost[k][(row, col)] = value;
                    self.stage_cost[k][(col, row)] = value;
                }
            }
            ParamSlot::TerminalCost { row, col } => {
                self.terminal_cost[(row, col)] = value;
                self.terminal_cost[(col, row)] = value;
            }
            ParamSlot::StageLinear { stage, index } => {
                for k in stages(stage, self.layout.horizon) {
                    self.stage_linear[k][index] = value;
                }
            }
            ParamSlot::TerminalLinear { index } => self.terminal_linear[index] = value,
            ParamSlot::Offset => self.offset = value,
            ParamSlot::EqMatrix { row, col } => self.eq_matrix[(row, col)] = value,
            ParamSlot::IneqMatrix { row, col } => self.ineq_matrix[(row, col)] = value,
        }
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable.len()
    }

    /// Flat vector of trainable entries in slot order.
    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_iterator(self.trainable.len(), self.trainable.iter().map(|s| self.get(s)))
    }

    /// Copy of `self` with the trainable entries replaced by `flat`.
    pub fn with_flat(&self, flat: &DVector<f64>) -> Result<Self> {
        check_dim("flat parameter vector", self.trainable.len(), flat.len())?;
        let mut out = self.clone();
        for (slot, &v) in self.trainable.iter().zip(flat.iter()) {
            out.set(slot, v);
        }
        Ok(out)
    }

    /// Index of each trainable slot belonging to the constraint matrices.
    pub fn constraint_mask(&self) -> Vec<bool> {
        self.trainable.iter().map(ParamSlot::is_constraint).collect()
    }

    /// Discount weight of inequality row `r`: `gamma^k` for the stage owning
    /// the row's first nonzero column.
    pub fn row_discount(&self, r: usize) -> f64 {
        let row = self.ineq_matrix.row(r);
        let col = row.iter().position(|v| *v != 0.0).unwrap_or(0);
        self.discount.powi(self.layout.stage_of(col) as i32)
    }
}

/// Slots of every entry of the equality matrix, row-major.
pub fn all_eq_slots(rows: usize, cols: usize) -> Vec<ParamSlot> {
    (0..rows)
        .flat_map(|row| (0..cols).map(move |col| ParamSlot::EqMatrix { row, col }))
        .collect()
}
