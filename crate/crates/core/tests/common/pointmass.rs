use nalgebra::{DMatrix, DVector};
use qprl::approximator::{PointMassTheta, ThetaParams};
use qprl::env::{NoiseModel, PointMassParams, corrupt_model, step};
use qprl::structure::{BandedReference, Trajectory, build_banded_c};
use rand::{Rng, RngExt};

pub fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

pub fn corrupted_band<R: Rng>(rng: &mut R) -> BandedReference {
    let p = PointMassParams::default();
    let (a, b) = corrupt_model(&p.a, &p.b, 0.05, rng);
    build_banded_c(&a, &b, 10).unwrap()
}

/// Point-mass parameterization with random cost diagonal and offset, all of
/// `C` trainable and perturbed away from the reference by `c_noise`.
pub fn random_theta<R: Rng>(rng: &mut R, band: &BandedReference, c_noise: f64) -> ThetaParams {
    let p = PointMassParams::default();
    let mut theta = PointMassTheta {
        horizon: band.horizon,
        discount: p.gamma,
        state_cost: (0..4).map(|_| rng.random_range(0.1..1.0)).collect(),
        offset: rng.random_range(0.0..1.0),
        state_lower: to_vec(&p.state_lower),
        state_upper: to_vec(&p.state_upper),
        action_lower: to_vec(&p.action_lower),
        action_upper: to_vec(&p.action_upper),
        slack_weight: 100.0,
        learn_constraints: true,
    }
    .build(band)
    .unwrap();
    if c_noise > 0.0 {
        let c = &theta.eq_matrix;
        theta.eq_matrix = c + DMatrix::from_fn(c.nrows(), c.ncols(), |_, _| rng.random_range(-c_noise..c_noise));
    }
    theta
}

pub fn random_state<R: Rng>(rng: &mut R) -> DVector<f64> {
    DVector::from_row_slice(&[
        rng.random_range(-1.8..1.8),
        rng.random_range(-1.8..1.8),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    ])
}

pub fn random_action<R: Rng>(rng: &mut R) -> DVector<f64> {
    DVector::from_row_slice(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
}

/// Noiseless rollout of `horizon` steps that stays away from the state bounds.
pub fn rollout<R: Rng>(params: &PointMassParams, rng: &mut R, horizon: usize) -> Trajectory {
    let mut noise = NoiseModel::none(4);
    let mut s = DVector::from_row_slice(&[
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ]);
    let mut states = vec![s.clone()];
    let mut actions = Vec::new();
    for _ in 0..horizon {
        let a = DVector::from_row_slice(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let (next, _) = step(params, &s, &a, &mut noise, rng);
        actions.push(a);
        states.push(next.clone());
        s = next;
    }
    Trajectory { states, actions }
}
