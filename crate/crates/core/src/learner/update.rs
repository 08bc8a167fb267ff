use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::approximator::{ParamSlot, ThetaParams};
use crate::error::{Error, Result, check_dim};
use crate::qp::{QpProblem, QpSettings, project_psd, solve_qp_with};
use crate::structure::{
    BandedReference, MaskSpec, Trajectory, build_c_mask, deviation_penalty_value, si_penalty_value,
};

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateConfig {
    pub alpha_cost: f64,
    pub alpha_constraint: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub mask: MaskSpec,
    pub beta: f64,
    /// Number of sequences `M` in the identification penalty.
    pub si_samples: usize,
    pub psd_floor: f64,
    /// Largest Euclidean norm of the cost part of the gradient; larger
    /// gradients are rescaled. Zero disables the limit.
    pub max_grad_cost: f64,
    /// Same limit for the constraint-matrix part of the gradient.
    pub max_grad_constraint: f64,
    pub settings: QpSettings,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            alpha_cost: 1e-3,
            alpha_constraint: 1e-4,
            gamma: 0.9,
            batch_size: 32,
            mask: MaskSpec::ZERO,
            beta: 0.0,
            si_samples: 8,
            psd_floor: 0.0,
            max_grad_cost: 0.0,
            max_grad_constraint: 100.0,
            settings: QpSettings::default(),
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = [self.alpha_cost, self.alpha_constraint]
            .iter()
            .all(|a| a.is_finite() && *a >= 0.0);
        if !rates_ok {
            return Err(Error::InvalidParams("learning rates must be finite and nonnegative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParams(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch size must be positive".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidParams("beta must be finite and nonnegative".into()));
        }
        if ![self.max_grad_cost, self.max_grad_constraint].iter().all(|m| m.is_finite() && *m >= 0.0) {
            return Err(Error::InvalidParams("gradient limits must be finite and nonnegative".into()));
        }
        if !self.psd_floor.is_finite() {
            return Err(Error::InvalidParams("psd floor must be finite".into()));
        }
        self.mask.validate()
    }

    /// `g` with each parameter group rescaled to respect its norm limit.
    pub fn clip_gradient(&self, theta: &ThetaParams, g: &DVector<f64>) -> DVector<f64> {
        let mut out = g.clone();
        for (constraint, limit) in [(false, self.max_grad_cost), (true, self.max_grad_constraint)] {
            if limit <= 0.0 {
                continue;
            }
            let idx: Vec<usize> = (0..g.len())
                .filter(|&i| theta.trainable[i].is_constraint() == constraint)
                .collect();
            let norm = idx.iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt();
            if norm > limit {
                for &i in &idx {
                    out[i] *= limit / norm;
                }
            }
        }
        out
    }

    fn rate(&self, slot: &ParamSlot) -> f64 {
        if slot.is_constraint() {
            self.alpha_constraint
        } else {
            self.alpha_cost
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDiagnostics {
    pub accepted: bool,
    pub skip_reason: Option<String>,
    pub step_norm: f64,
    /// Program objective at the returned step.
    pub objective: f64,
    pub deviation_penalty: f64,
    pub si_penalty: f64,
    /// Diagonal entries held at the PSD floor.
    pub psd_corrections: usize,
    /// Frobenius distance moved by eigenvalue projection of non-diagonal blocks.
    pub projection_distance: f64,
}

impl UpdateDiagnostics {
    fn skipped(reason: String, deviation_penalty: f64, si_penalty: f64) -> Self {
        Self {
            accepted: false,
            skip_reason: Some(reason),
            step_norm: 0.0,
            objective: 0.0,
            deviation_penalty,
            si_penalty,
            psd_corrections: 0,
            projection_distance: 0.0,
        }
    }
}

/// `|d|^2 - <alpha g, d> + sum mask |C - C0| + beta sum_i |C tau_i|^2` at
/// `new = theta + d`.
pub fn update_objective(
    theta: &ThetaParams,
    new: &ThetaParams,
    g: &DVector<f64>,
    sequences: &[Trajectory],
    cfg: &UpdateConfig,
    band: &BandedReference,
) -> Result<f64> {
    check_dim("gradient", theta.n_trainable(), g.len())?;
    let d = new.flatten() - theta.flatten();
    let linear: f64 = theta
        .trainable
        .iter()
        .enumerate()
        .map(|(i, slot)| cfg.rate(slot) * g[i] * d[i])
        .sum();
    let mask = build_c_mask(&cfg.mask, band);
    let deviation = deviation_penalty_value(&new.eq_matrix, band, &mask)?;
    let si = si_penalty_value(&new.eq_matrix, sequences, cfg.beta)?;
    Ok(d.norm_squared() - linear + deviation + si)
}

/// One penalized step from the frozen gradient `g`.
///
/// Cost and inequality entries take the closed-form step `alpha g / 2`, with
/// diagonal cost entries held at `psd_floor` when every cost block is
/// diagonal and non-diagonal blocks projected onto the PSD cone otherwise.
/// Equality-matrix entries solve the penalized program row by row: by soft
/// thresholding when no identification penalty is active, and through the
/// QP solver on the absolute-value epigraph form when it is.
pub fn update_step(
    theta: &ThetaParams,
    g: &DVector<f64>,
    sequences: &[Trajectory],
    cfg: &UpdateConfig,
    band: &BandedReference,
) -> Result<(ThetaParams, UpdateDiagnostics)> {
    cfg.validate()?;
    check_dim("gradient", theta.n_trainable(), g.len())?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("gradient has non-finite entries".into()));
    }
    check_dim("reference rows", theta.eq_matrix.nrows(), band.c0.nrows())?;
    check_dim("reference columns", theta.eq_matrix.ncols(), band.c0.ncols())?;
    let mask = build_c_mask(&cfg.mask, band);
    let si_active = cfg.beta > 0.0 && !sequences.is_empty();
    let si_sequences: &[Trajectory] = if si_active { sequences } else { &[] };
    let old_dev = deviation_penalty_value(&theta.eq_matrix, band, &mask)?;
    let old_si = si_penalty_value(&theta.eq_matrix, si_sequences, cfg.beta)?;

    let diagonal_mode = cost_blocks_diagonal(theta);
    if diagonal_mode {
        if let Some(reason) = fixed_diagonal_violation(theta, cfg.psd_floor) {
            return Ok((theta.clone(), UpdateDiagnostics::skipped(reason, old_dev, old_si)));
        }
    }

    let current = theta.flatten();
    let mut d = DVector::zeros(theta.n_trainable());
    let mut psd_corrections = 0;
    let mut rows: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, slot) in theta.trainable.iter().enumerate() {
        let alpha = cfg.rate(slot);
        match *slot {
            ParamSlot::EqMatrix { row, col } => rows.entry(row).or_default().push((i, col)),
            ParamSlot::StageCost { row, col, .. } | ParamSlot::TerminalCost { row, col }
                if diagonal_mode && row == col =>
            {
                let step = 0.5 * alpha * g[i];
                let min_step = cfg.psd_floor - current[i];
                if step < min_step {
                    psd_corrections += 1;
                    d[i] = min_step;
                } else {
                    d[i] = step;
                }
            }
            _ => d[i] = 0.5 * alpha * g[i],
        }
    }

    let taus: Vec<DVector<f64>> = si_sequences.iter().map(Trajectory::decision_vector).collect();
    for tau in &taus {
        check_dim("trajectory vector", theta.eq_matrix.ncols(), tau.len())?;
    }
    for (&row, entries) in &rows {
        let problem = RowProgram {
            theta,
            band,
            mask: &mask,
            row,
            entries,
            g,
            alpha: cfg.alpha_constraint,
            beta: cfg.beta,
            taus: &taus,
        };
        let step = if taus.is_empty() {
            problem.soft_threshold()
        } else {
            match problem.solve(&cfg.settings) {
                Ok(step) => step,
                Err(e) => {
                    let reason = format!("row {row} program failed: {e}");
                    return Ok((theta.clone(), UpdateDiagnostics::skipped(reason, old_dev, old_si)));
                }
            }
        };
        for (&(i, _), v) in entries.iter().zip(step.iter()) {
            d[i] = *v;
        }
    }

    let mut new = theta.with_flat(&(&current + &d))?;
    let mut projection_distance = 0.0;
    if !diagonal_mode {
        for block in new.stage_cost.iter_mut().chain(std::iter::once(&mut new.terminal_cost)) {
            let projected = project_psd(block, cfg.psd_floor)?;
            projection_distance += (&projected - &*block).norm();
            *block = projected;
        }
    }
    let objective = update_objective(theta, &new, g, si_sequences, cfg, band)?;
    let diagnostics = UpdateDiagnostics {
        accepted: true,
        skip_reason: None,
        step_norm: (new.flatten() - current).norm(),
        objective,
        deviation_penalty: deviation_penalty_value(&new.eq_matrix, band, &mask)?,
        si_penalty: si_penalty_value(&new.eq_matrix, si_sequences, cfg.beta)?,
        psd_corrections,
        projection_distance,
    };
    Ok((new, diagnostics))
}

/// True when no cost block has an off-diagonal entry and none can acquire one.
fn cost_blocks_diagonal(theta: &ThetaParams) -> bool {
    let off_diagonal_zero = |m: &DMatrix<f64>| {
        (0..m.nrows()).all(|r| (0..m.ncols()).all(|c| r == c || m[(r, c)] == 0.0))
    };
    let trainable_off_diagonal = theta.trainable.iter().any(|slot| {
        matches!(*slot, ParamSlot::StageCost { row, col, .. } | ParamSlot::TerminalCost { row, col } if row != col)
    });
    !trainable_off_diagonal
        && theta.stage_cost.iter().all(off_diagonal_zero)
        && off_diagonal_zero(&theta.terminal_cost)
}

/// A fixed diagonal entry below the floor makes the PSD constraint infeasible.
fn fixed_diagonal_violation(theta: &ThetaParams, floor: f64) -> Option<String> {
    let trained = |stage: Option<usize>, i: usize| {
        theta.trainable.iter().any(|slot| match *slot {
            ParamSlot::StageCost { stage: s, row, col } => {
                row == i && col == i && stage.is_some() && (s.is_none() || s == stage)
            }
            ParamSlot::TerminalCost { row, col } => stage.is_none() && row == i && col == i,
            _ => false,
        })
    };
    for (k, block) in theta.stage_cost.iter().enumerate() {
        for i in 0..block.nrows() {
            if !trained(Some(k), i) && block[(i, i)] < floor - 1e-10 {
                return Some(format!("fixed stage {k} cost entry {i} is below the PSD floor"));
            }
        }
    }
    for i in 0..theta.terminal_cost.nrows() {
        if !trained(None, i) && theta.terminal_cost[(i, i)] < floor - 1e-10 {
            return Some(format!("fixed terminal cost entry {i} is below the PSD floor"));
        }
    }
    None
}

/// The update program restricted to the trainable entries of one row of `C`.
struct RowProgram<'a> {
    theta: &'a ThetaParams,
    band: &'a BandedReference,
    mask: &'a DMatrix<f64>,
    row: usize,
    /// (flat index, column) of each trainable entry in the row.
    entries: &'a [(usize, usize)],
    g: &'a DVector<f64>,
    alpha: f64,
    beta: f64,
    taus: &'a [DVector<f64>],
}

impl RowProgram<'_> {
    fn offset(&self, col: usize) -> f64 {
        self.theta.eq_matrix[(self.row, col)] - self.band.c0[(self.row, col)]
    }

    /// Exact minimizer of `d^2 - alpha g d + m |e + d|` per entry.
    fn soft_threshold(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|&(i, col)| {
                let half_step = 0.5 * self.alpha * self.g[i];
                let m = self.mask[(self.row, col)];
                if m == 0.0 {
                    return half_step;
                }
                let e = self.offset(col);
                let target = e + half_step;
                let shrunk = target.signum() * (target.abs() - 0.5 * m).max(0.0);
                shrunk - e
            })
            .collect()
    }

    /// Epigraph QP over `[d; t]` with `t_j >= |e_j + d_j|` on masked entries.
    fn solve(&self, settings: &QpSettings) -> Result<Vec<f64>> {
        let k = self.entries.len();
        let masked: Vec<usize> = (0..k)
            .filter(|&j| self.mask[(self.row, self.entries[j].1)] > 0.0)
            .collect();
        let n = k + masked.len();
        let c_row = self.theta.eq_matrix.row(self.row).transpose();
        let mut h = DMatrix::zeros(n, n);
        let mut q = DVector::zeros(n);
        let mut offset = 0.0;
        for j in 0..k {
            h[(j, j)] = 2.0;
            q[j] = -self.alpha * self.g[self.entries[j].0];
        }
        for tau in self.taus {
            let p = c_row.dot(tau);
            offset += self.beta * p * p;
            let t: Vec<f64> = self.entries.iter().map(|&(_, col)| tau[col]).collect();
            for a in 0..k {
                q[a] += 2.0 * self.beta * p * t[a];
                for b in 0..k {
                    h[(a, b)] += 2.0 * self.beta * t[a] * t[b];
                }
            }
        }
        let mut g = DMatrix::zeros(2 * masked.len(), n);
        let mut lower = DVector::zeros(2 * masked.len());
        for (m, &j) in masked.iter().enumerate() {
            let col = self.entries[j].1;
            let e = self.offset(col);
            q[k + m] = self.mask[(self.row, col)];
            g[(2 * m, j)] = 1.0;
            g[(2 * m, k + m)] = 1.0;
            lower[2 * m] = -e;
            g[(2 * m + 1, j)] = -1.0;
            g[(2 * m + 1, k + m)] = 1.0;
            lower[2 * m + 1] = e;
        }
        let upper = DVector::from_element(lower.len(), f64::INFINITY);
        let problem = QpProblem::new(h, q)?
            .with_offset(offset)?
            .with_inequalities(g, lower, upper)?;
        let sol = solve_qp_with(&problem, settings);
        if !sol.is_optimal() {
            return Err(Error::NonOptimal(sol.status));
        }
        Ok(sol.z.rows(0, k).iter().copied().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::all_eq_slots;
    use crate::structure::build_banded_c;

    fn small() -> (ThetaParams, BandedReference) {
        let band = build_banded_c(
            &DMatrix::from_element(1, 1, 0.9),
            &DMatrix::from_element(1, 1, 0.5),
            2,
        )
        .unwrap();
        let layout = band.layout();
        let mut theta = ThetaParams::zeros(layout, 0.9);
        theta.eq_matrix = band.c0.clone();
        theta.trainable = vec![
            ParamSlot::StageCost {
                stage: None,
                row: 0,
                col: 0,
            },
            ParamSlot::Offset,
        ];
        theta.trainable.extend(all_eq_slots(2, layout.len()));
        theta.set(&theta.trainable[0].clone(), 1.0);
        (theta, band)
    }

    #[test]
    fn zero_gradient_without_penalties_is_identity() {
        let (theta, band) = small();
        let g = DVector::zeros(theta.n_trainable());
        let (new, diag) = update_step(&theta, &g, &[], &UpdateConfig::default(), &band).unwrap();
        assert!(diag.accepted);
        assert_eq!(new, theta);
    }

    #[test]
    fn psd_floor_holds_diagonal_entries() {
        let (theta, band) = small();
        let mut g = DVector::zeros(theta.n_trainable());
        g[0] = -1e5;
        let (new, diag) = update_step(&theta, &g, &[], &UpdateConfig::default(), &band).unwrap();
        assert_eq!(new.stage_cost[1][(0, 0)], 0.0);
        assert_eq!(diag.psd_corrections, 1);
    }

    #[test]
    fn soft_threshold_zeroes_small_off_band_steps() {
        let (theta, band) = small();
        let mut g = DVector::from_element(theta.n_trainable(), 1.0);
        g[0] = 0.0;
        let cfg = UpdateConfig {
            mask: MaskSpec::default(),
            alpha_constraint: 1.0,
            ..UpdateConfig::default()
        };
        let (new, _) = update_step(&theta, &g, &[], &cfg, &band).unwrap();
        // Column 4 lies right of the band in row 0: step 0.5 is below the threshold 0.5.
        assert_eq!(new.eq_matrix[(0, 4)], 0.0);
        // On-band entries move by 0.5 - 0.5e-4.
        assert!((new.eq_matrix[(0, 0)] - 0.9 - (0.5 - 0.5e-4)).abs() < 1e-15);
    }
}
