//! Banded dynamics structure for the equality matrix and the penalties that
//! promote it.

use nalgebra::{DMatrix, DVector};

use crate::approximator::DecisionLayout;
use crate::error::{Error, Result, check_dim};

/// Reference matrix whose row block `k` reads `[A B -I]` on the columns of
/// `[x_k; u_k; x_{k+1}]`, so that `C0 z = 0` encodes `x_{k+1} = A x_k + B u_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedReference {
    pub c0: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub horizon: usize,
}

impl BandedReference {
    pub fn layout(&self) -> DecisionLayout {
        DecisionLayout::new(self.a.nrows(), self.b.ncols(), self.horizon)
    }

    /// Column range of the `[A B -I]` block in row block `k`.
    pub fn band_columns(&self, k: usize) -> std::ops::Range<usize> {
        let layout = self.layout();
        let start = layout.stage_slice(k).start;
        start..start + 2 * layout.n_x + layout.n_u
    }

    /// Position of `(row, col)` relative to the band.
    pub fn placement(&self, row: usize, col: usize) -> BandPlacement {
        let k = row / self.a.nrows();
        let cols = self.band_columns(k);
        if col < cols.start {
            BandPlacement::Below
        } else if col >= cols.end {
            BandPlacement::Above
        } else {
            BandPlacement::On
        }
    }

    fn check_shape(&self, what: &'static str, m: &DMatrix<f64>) -> Result<()> {
        check_dim(what, self.c0.nrows(), m.nrows())?;
        check_dim(what, self.c0.ncols(), m.ncols())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandPlacement {
    /// Left of the band block in its row.
    Below,
    On,
    /// Right of the band block in its row.
    Above,
}

pub fn build_banded_c(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize) -> Result<BandedReference> {
    let n_x = a.nrows();
    check_dim("A columns", n_x, a.ncols())?;
    check_dim("B rows", n_x, b.nrows())?;
    if horizon == 0 || n_x == 0 {
        return Err(Error::InvalidParams("horizon and state dimension must be positive".into()));
    }
    let layout = DecisionLayout::new(n_x, b.ncols(), horizon);
    let mut c0 = DMatrix::zeros(layout.n_dynamics_rows(), layout.len());
    for k in 0..horizon {
        let r = k * n_x;
        let xs = layout.state_slice(k).start;
        let us = layout.action_slice(k).start;
        let xn = layout.state_slice(k + 1).start;
        c0.view_mut((r, xs), (n_x, n_x)).copy_from(a);
        c0.view_mut((r, us), (n_x, layout.n_u)).copy_from(b);
        for i in 0..n_x {
            c0[(r + i, xn + i)] = -1.0;
        }
    }
    Ok(BandedReference {
        c0,
        a: a.clone(),
        b: b.clone(),
        horizon,
    })
}

/// Three-constant scaling of the deviation penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    /// Entries right of the band.
    pub c1: f64,
    /// Entries on the band.
    pub c2: f64,
    /// Entries left of the band.
    pub c3: f64,
}

impl MaskSpec {
    pub const ZERO: MaskSpec = MaskSpec {
        c1: 0.0,
        c2: 0.0,
        c3: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if [self.c1, self.c2, self.c3].iter().all(|c| c.is_finite() && *c >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("mask constants must be nonnegative: {self:?}")))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.c1 == 0.0 && self.c2 == 0.0 && self.c3 == 0.0
    }
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            c1: 1.0,
            c2: 1e-4,
            c3: 0.0,
        }
    }
}

pub fn build_c_mask(spec: &MaskSpec, band: &BandedReference) -> DMatrix<f64> {
    DMatrix::from_fn(band.c0.nrows(), band.c0.ncols(), |r, c| match band.placement(r, c) {
        BandPlacement::Below => spec.c3,
        BandPlacement::On => spec.c2,
        BandPlacement::Above => spec.c1,
    })
}

/// `sum_ij mask_ij |C_ij - C0_ij|`.
pub fn deviation_penalty_value(c: &DMatrix<f64>, band: &BandedReference, mask: &DMatrix<f64>) -> Result<f64> {
    band.check_shape("constraint matrix", c)?;
    band.check_shape("mask", mask)?;
    Ok(c.iter()
        .zip(band.c0.iter())
        .zip(mask.iter())
        .map(|((c, c0), m)| m * (c - c0).abs())
        .sum())
}

/// Consecutive states and actions `s_j, a_j, ..., a_{j+N-1}, s_{j+N}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Interleaved vector `[s_j; a_j; s_{j+1}; a_{j+1}; ...; s_{j+N}]`.
    pub fn decision_vector(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for (s, a) in self.states.iter().zip(&self.actions) {
            out.extend(s.iter());
            out.extend(a.iter());
        }
        if let Some(last) = self.states.get(self.actions.len()) {
            out.extend(last.iter());
        }
        DVector::from_vec(out)
    }
}

/// `beta * sum_i |C tau_i|^2`.
pub fn si_penalty_value(c: &DMatrix<f64>, trajectories: &[Trajectory], beta: f64) -> Result<f64> {
    let mut total = 0.0;
    for t in trajectories {
        let tau = t.decision_vector();
        check_dim("trajectory vector", c.ncols(), tau.len())?;
        total += (c * tau).norm_squared();
    }
    Ok(beta * total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandMetrics {
    pub on_band_l1: f64,
    pub off_band_l1: f64,
    pub deviation_from_c0_l1: f64,
}

pub fn band_metrics(c: &DMatrix<f64>, band: &BandedReference) -> Result<BandMetrics> {
    band.check_shape("constraint matrix", c)?;
    let mut on = 0.0;
    let mut off = 0.0;
    for r in 0..c.nrows() {
        for col in 0..c.ncols() {
            let v = c[(r, col)].abs();
            if band.placement(r, col) == BandPlacement::On {
                on += v;
            } else {
                off += v;
            }
        }
    }
    let deviation = (c - &band.c0).abs().sum();
    Ok(BandMetrics {
        on_band_l1: on,
        off_band_l1: off,
        deviation_from_c0_l1: deviation,
    })
}
