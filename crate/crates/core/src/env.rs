//! Linear point-mass environment with additive Gaussian or Brownian noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Stage cost weight, `l(s, a) = s' W s`.
    pub w: DMatrix<f64>,
    pub gamma: f64,
    pub state_lower: DVector<f64>,
    pub state_upper: DVector<f64>,
    pub action_lower: DVector<f64>,
    pub action_upper: DVector<f64>,
}

impl Default for PointMassParams {
    fn default() -> Self {
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.0, 0.1, 0.0,
            0.0, 1.0, 0.0, 0.1,
            0.0, 0.0, 0.9, 0.0,
            0.0, 0.0, 0.0, 0.9,
        ]);
        #[rustfmt::skip]
        let b = DMatrix::from_row_slice(4, 2, &[
            0.0, 0.0,
            0.0, 0.0,
            0.1, 0.0,
            0.0, 0.1,
        ]);
        Self {
            a,
            b,
            w: DMatrix::from_diagonal(&DVector::from_row_slice(&[3.0, 3.0, 0.25, 0.25])),
            gamma: 0.9,
            state_lower: DVector::from_row_slice(&[-2.0, -2.0, -10.0, -10.0]),
            state_upper: DVector::from_row_slice(&[2.0, 2.0, 10.0, 10.0]),
            action_lower: DVector::from_row_slice(&[-1.0, -1.0]),
            action_upper: DVector::from_row_slice(&[1.0, 1.0]),
        }
    }
}

impl PointMassParams {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn stage_cost(&self, s: &DVector<f64>) -> f64 {
        s.dot(&(&self.w * s))
    }

    pub fn clip_action(&self, a: &DVector<f64>) -> DVector<f64> {
        clip(a, &self.action_lower, &self.action_upper)
    }

    pub fn clip_state(&self, s: &DVector<f64>) -> DVector<f64> {
        clip(s, &self.state_lower, &self.state_upper)
    }
}

fn clip(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), (0..v.len()).map(|i| v[i].clamp(lo[i], hi[i])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    None,
    Gaussian,
    Brownian,
}

/// Additive process noise. Gaussian noise is drawn fresh each step; Brownian
/// noise accumulates Gaussian increments and resets at episode start.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Per-coordinate standard deviation of the draw (Gaussian) or increment (Brownian).
    pub sigma: DVector<f64>,
    state: DVector<f64>,
}

impl NoiseModel {
    pub fn none(n_x: usize) -> Self {
        Self::new(NoiseKind::None, DVector::zeros(n_x))
    }

    pub fn new(kind: NoiseKind, sigma: DVector<f64>) -> Self {
        let n = sigma.len();
        Self {
            kind,
            sigma,
            state: DVector::zeros(n),
        }
    }

    /// Default magnitudes for the point mass.
    pub fn default_for(kind: NoiseKind) -> Self {
        let sigma = match kind {
            NoiseKind::None => DVector::zeros(4),
            NoiseKind::Gaussian => DVector::from_row_slice(&[0.01, 0.01, 0.05, 0.05]),
            NoiseKind::Brownian => DVector::from_row_slice(&[0.001, 0.001, 0.005, 0.005]),
        };
        Self::new(kind, sigma)
    }

    pub fn reset(&mut self) {
        self.state.fill(0.0);
    }

    /// Current accumulated Brownian value.
    pub fn current(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> DVector<f64> {
        match self.kind {
            NoiseKind::None => DVector::zeros(self.sigma.len()),
            NoiseKind::Gaussian => gaussian(&self.sigma, rng),
            NoiseKind::Brownian => {
                let inc = gaussian(&self.sigma, rng);
                self.state += inc;
                self.state.clone()
            }
        }
    }
}

fn gaussian<R: Rng + ?Sized>(sigma: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    sigma.map(|s| {
        let n: f64 = rng.sample(StandardNormal);
        s * n
    })
}

/// One transition: `s+ = clip(A s + B clip(a) + nu)`, cost `s' W s`.
pub fn step<R: Rng + ?Sized>(
    params: &PointMassParams,
    state: &DVector<f64>,
    action: &DVector<f64>,
    noise: &mut NoiseModel,
    rng: &mut R,
) -> (DVector<f64>, f64) {
    let a = params.clip_action(action);
    let nu = noise.sample(rng);
    let next = &params.a * state + &params.b * a + nu;
    (params.clip_state(&next), params.stage_cost(state))
}

/// `(A + dA, B + dB)` with every perturbation entry uniform in `[-delta, delta]`.
pub fn corrupt_model<R: Rng + ?Sized>(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    delta: f64,
    rng: &mut R,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut draw = |m: &DMatrix<f64>| {
        m.map(|v| {
            if delta > 0.0 {
                v + rng.random_range(-delta..=delta)
            } else {
                v
            }
        })
    };
    let a_hat = draw(a);
    let b_hat = draw(b);
    (a_hat, b_hat)
}

/// Positions uniform in `[-1.5, 1.5]^2`, zero velocities; resets the noise state.
pub fn reset<R: Rng + ?Sized>(noise: &mut NoiseModel, rng: &mut R) -> DVector<f64> {
    noise.reset();
    let x = rng.random_range(-1.5..=1.5);
    let y = rng.random_range(-1.5..=1.5);
    DVector::from_row_slice(&[x, y, 0.0, 0.0])
}

/// Environment instance owning its noise process and RNG.
#[derive(Debug, Clone)]
pub struct PointMassEnv {
    pub params: PointMassParams,
    pub noise: NoiseModel,
    rng: ChaCha8Rng,
    state: DVector<f64>,
}

impl PointMassEnv {
    pub fn new(params: PointMassParams, noise: NoiseModel, seed: u64) -> Self {
        let n = params.n_x();
        Self {
            params,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: DVector::zeros(n),
        }
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn reset(&mut self) -> DVector<f64> {
        self.state = reset(&mut self.noise, &mut self.rng);
        self.state.clone()
    }

    /// Start an episode from a given state.
    pub fn reset_to(&mut self, state: DVector<f64>) {
        self.noise.reset();
        self.state = state;
    }

    pub fn step(&mut self, action: &DVector<f64>) -> (DVector<f64>, f64) {
        let (next, cost) = step(&self.params, &self.state, action, &mut self.noise, &mut self.rng);
        self.state = next.clone();
        (next, cost)
    }
}
