mod common;

use common::normal_matrix;
use common::pointmass::{corrupted_band, rollout};
use nalgebra::DMatrix;
use proptest::prelude::*;
use qprl::env::PointMassParams;
use qprl::structure::{
    BandPlacement, MaskSpec, Trajectory, band_metrics, build_banded_c, build_c_mask, deviation_penalty_value,
    si_penalty_value,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn reference_annihilates_noiseless_rollouts() {
    let params = PointMassParams::default();
    let band = build_banded_c(&params.a, &params.b, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rollouts: Vec<Trajectory> = (0..100).map(|_| rollout(&params, &mut rng, 10)).collect();
    for t in &rollouts {
        assert!((&band.c0 * t.decision_vector()).amax() <= 1e-12);
    }
    assert_eq!(si_penalty_value(&band.c0, &rollouts, 1.0).unwrap(), 0.0);
}

#[test]
fn point_mass_reference_shape() {
    let params = PointMassParams::default();
    let band = build_banded_c(&params.a, &params.b, 10).unwrap();
    assert_eq!((band.c0.nrows(), band.c0.ncols()), (40, 64));
    let m = band_metrics(&band.c0, &band).unwrap();
    assert_eq!(m.off_band_l1, 0.0);
    let off = (0..40)
        .flat_map(|r| (0..64).map(move |c| (r, c)))
        .filter(|&(r, c)| band.placement(r, c) != BandPlacement::On)
        .count();
    let ones = band.c0.add_scalar(1.0);
    let shifted = band_metrics(&(&ones - &band.c0), &band).unwrap();
    assert_eq!(shifted.off_band_l1, off as f64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deviation_zero_iff_masked_entries_agree(seed in any::<u64>(), c1 in 0.0f64..2.0, c2 in 0.0f64..2.0, c3 in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let band = corrupted_band(&mut rng);
        let mask = build_c_mask(&MaskSpec { c1, c2, c3 }, &band);
        let mut c = band.c0.clone();
        // Disturb only unmasked entries: the penalty stays zero.
        for r in 0..c.nrows() {
            for j in 0..c.ncols() {
                if mask[(r, j)] == 0.0 {
                    c[(r, j)] += rng.random_range(-1.0..1.0);
                }
            }
        }
        prop_assert_eq!(deviation_penalty_value(&c, &band, &mask).unwrap(), 0.0);
        let (r, j) = (rng.random_range(0..40), rng.random_range(0..64));
        c[(r, j)] += 0.5;
        let v = deviation_penalty_value(&c, &band, &mask).unwrap();
        prop_assert_eq!(v > 0.0, mask[(r, j)] > 0.0);
    }

    #[test]
    fn si_penalty_nonnegative_and_linear_in_beta(seed in any::<u64>(), beta in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PointMassParams::default();
        let c = normal_matrix(&mut rng, 40, 64);
        let ts: Vec<Trajectory> = (0..3).map(|_| rollout(&params, &mut rng, 10)).collect();
        let one = si_penalty_value(&c, &ts, 1.0).unwrap();
        let scaled = si_penalty_value(&c, &ts, beta).unwrap();
        prop_assert!(one >= 0.0);
        prop_assert!((scaled - beta * one).abs() <= 1e-12 * (1.0 + scaled.abs()));
    }

    #[test]
    fn band_metrics_partition_l1(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let band = corrupted_band(&mut rng);
        let c: DMatrix<f64> = normal_matrix(&mut rng, 40, 64);
        let m = band_metrics(&c, &band).unwrap();
        prop_assert!((m.on_band_l1 + m.off_band_l1 - c.abs().sum()).abs() <= 1e-12 * c.abs().sum());
    }
}
