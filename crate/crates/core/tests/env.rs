use nalgebra::DVector;
use proptest::prelude::*;
use qprl::env::{NoiseKind, NoiseModel, PointMassEnv, PointMassParams, reset, step};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn noiseless_rollouts_follow_the_model() {
    let params = PointMassParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut noise = NoiseModel::none(4);
    for _ in 0..100 {
        let mut s = reset(&mut noise, &mut rng);
        for _ in 0..50 {
            let a = DVector::from_row_slice(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let (next, _) = step(&params, &s, &a, &mut noise, &mut rng);
            let model = &params.a * &s + &params.b * &a;
            if model == params.clip_state(&model) {
                assert!((&next - &model).amax() <= 1e-12);
            }
            s = next;
        }
    }
}

#[test]
fn gaussian_noise_is_centered() {
    let mut noise = NoiseModel::default_for(NoiseKind::Gaussian);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let mut sum = DVector::zeros(4);
    for _ in 0..n {
        sum += noise.sample(&mut rng);
    }
    let mean = sum / n as f64;
    for i in 0..4 {
        assert!(mean[i].abs() <= 4.0 * noise.sigma[i] / (n as f64).sqrt());
    }
}

#[test]
fn brownian_variance_grows_linearly() {
    let mut noise = NoiseModel::default_for(NoiseKind::Brownian);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (episodes, len) = (10_000, 50);
    let mut sq = vec![DVector::<f64>::zeros(4); len];
    for _ in 0..episodes {
        reset(&mut noise, &mut rng);
        for k in 0..len {
            let v = noise.sample(&mut rng);
            sq[k] += v.component_mul(&v);
        }
    }
    for i in 0..4 {
        // Least-squares slope through the origin of Var(nu_k) against k.
        let (num, den) = (0..len).fold((0.0, 0.0), |(n, d), k| {
            let t = (k + 1) as f64;
            (n + t * sq[k][i] / episodes as f64, d + t * t)
        });
        let slope = num / den;
        let expected = noise.sigma[i] * noise.sigma[i];
        assert!((slope / expected - 1.0).abs() <= 0.1, "coordinate {i}: slope {slope} vs {expected}");
    }
}

#[test]
fn environment_is_deterministic_per_seed() {
    let run = |seed| {
        let mut env = PointMassEnv::new(
            PointMassParams::default(),
            NoiseModel::default_for(NoiseKind::Brownian),
            seed,
        );
        let mut states = vec![env.reset()];
        for _ in 0..20 {
            states.push(env.step(&DVector::from_row_slice(&[0.3, -0.2])).0);
        }
        states
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

proptest! {
    #[test]
    fn stage_cost_nonnegative(x in -2.0f64..2.0, y in -2.0f64..2.0, vx in -10.0f64..10.0, vy in -10.0f64..10.0) {
        let params = PointMassParams::default();
        prop_assert!(params.stage_cost(&DVector::from_row_slice(&[x, y, vx, vy])) >= 0.0);
    }

    #[test]
    fn steps_stay_in_bounds(seed in any::<u64>(), ax in -5.0f64..5.0, ay in -5.0f64..5.0) {
        let params = PointMassParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = NoiseModel::default_for(NoiseKind::Gaussian);
        let s = DVector::from_row_slice(&[1.99, -1.99, 9.9, -9.9]);
        let (next, _) = step(&params, &s, &DVector::from_row_slice(&[ax, ay]), &mut noise, &mut rng);
        prop_assert_eq!(params.clip_state(&next), next);
    }
}
