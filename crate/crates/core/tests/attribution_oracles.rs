mod common;

use alignlab::attribution::{
    activation_distance, attribute_sweep, distance_matrix, lasso_attribution, probe_fit, DistanceMatrix,
    TargetMode, TokenConvention,
};
use alignlab::model::{forward, init_params, ModelConfig};
use alignlab::numerics::{LassoObjective, Matrix};
use alignlab::patching::{layer_sweep, PatchSpec};
use common::perturbed_pair;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn synthetic_distances(n: usize, layers: usize, seed: u64) -> DistanceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DistanceMatrix {
        values: Matrix::from_fn(n, layers, |_, _| 1.0 + rng.sample::<f64, _>(StandardNormal).abs()),
        pair_ids: (0..n).map(|i| format!("pair-{i}")).collect(),
        convention: TokenConvention::FinalTokenChosen,
    }
}

/// Two-pass z-score of one column with the sample standard deviation.
fn zscore(col: &[f64]) -> Vec<f64> {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let s = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    col.iter().map(|x| (x - m) / s).collect()
}

#[test]
fn equal_models_have_zero_distance() {
    let (base, _, ds) = perturbed_pair(1, 6);
    let dm = distance_matrix(&base, &base, &ds, TokenConvention::FinalTokenChosen).unwrap();
    assert!(dm.values.data().iter().all(|&v| v == 0.0));
    assert_eq!(dm.n_layers(), 3);
}

#[test]
fn distances_are_per_pair() {
    let (base, tuned, ds) = perturbed_pair(2, 6);
    let dm = distance_matrix(&base, &tuned, &ds, TokenConvention::FinalTokenMean).unwrap();
    for (i, p) in ds.pairs().iter().enumerate().rev() {
        let alone = activation_distance(&base, &tuned, p, TokenConvention::FinalTokenMean).unwrap();
        assert_eq!(alone.as_slice(), dm.values.row(i));
        assert!(alone.iter().all(|d| *d >= 0.0 && d.is_finite()));
    }
}

#[test]
fn single_layer_distance_is_the_final_row_norm() {
    let cfg = ModelConfig {
        n_layers: 1,
        ..common::small_config(3)
    };
    let base = init_params(&cfg).unwrap();
    let tuned = common::jitter(&base, 4, 0.3);
    let ds = alignlab::data::generate_synthetic(3, 4, &cfg).unwrap();
    for p in ds.pairs() {
        let seq = p.prompt.concat(&p.chosen);
        let hb = forward(&base, &seq, None).unwrap().trace.layers[0].clone();
        let ht = forward(&tuned, &seq, None).unwrap().trace.layers[0].clone();
        let last = seq.len() - 1;
        let norm = hb.row(last).iter().zip(ht.row(last)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let d = activation_distance(&base, &tuned, p, TokenConvention::FinalTokenChosen).unwrap();
        assert!((d[0] - norm).abs() < 1e-12);
    }
}

#[test]
fn probe_matches_closed_form_ols() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 5.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 1.5 * v - 2.0 + rng.sample::<f64, _>(StandardNormal)).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let f = probe_fit(4, &x, &y).unwrap();
    assert_eq!(f.layer, 4);
    assert!((f.slope - sxy / sxx).abs() < 1e-10);
    assert!((f.intercept - (my - sxy / sxx * mx)).abs() < 1e-10);
    assert!((f.r_squared - sxy * sxy / (sxx * syy)).abs() < 1e-10);
}

#[test]
fn planted_layer_dominates_every_fit() {
    let layers = 8;
    for seed in 0..20u64 {
        let planted = (seed as usize * 3) % layers;
        let dm = synthetic_distances(60, layers, seed);
        let z = zscore(&dm.values.col(planted));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let effects: Vec<f64> = z.iter().map(|v| 2.0 * v + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
        let res = lasso_attribution(&dm, &effects, seed).unwrap();
        assert_eq!(res.top_layer(), Some(planted));
        assert!((res.coefficients[planted] - 2.0).abs() < 0.3);
        for (l, c) in res.coefficients.iter().enumerate() {
            if l != planted {
                assert!(c.abs() < 0.05, "seed {seed} layer {l}: {c}");
            }
        }
    }
}

#[test]
fn permuted_target_gives_null_model() {
    let dm = synthetic_distances(50, 6, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut effects: Vec<f64> = (0..50).map(|_| rng.sample(StandardNormal)).collect();
    effects.shuffle(&mut rng);
    let res = lasso_attribution(&dm, &effects, 3).unwrap();
    assert!(res.coefficients.iter().all(|c| *c == 0.0), "{:?}", res.coefficients);
    assert_eq!(res.top_layer(), None);
}

#[test]
fn too_few_pairs_rejected() {
    let dm = synthetic_distances(9, 3, 1);
    assert!(lasso_attribution(&dm, &[0.0; 9], 0).is_err());
    assert!(lasso_attribution(&dm, &[0.0; 8], 0).is_err());
}

#[test]
fn raw_coefficients_undo_the_scaling() {
    let dm = synthetic_distances(40, 4, 11);
    let effects: Vec<f64> = (0..40).map(|i| 3.0 * dm.values.get(i, 2) + 1.0).collect();
    let res = lasso_attribution(&dm, &effects, 0).unwrap();
    for l in 0..4 {
        assert!((res.raw_coefficients[l] * res.feature_stds[l] - res.coefficients[l]).abs() < 1e-12);
    }
    assert_eq!(res.coefficients.len(), 4);
}

#[test]
fn sweep_modes_are_reproducible() {
    let (base, tuned, ds) = perturbed_pair(5, 12);
    let dm = distance_matrix(&base, &tuned, &ds, TokenConvention::FinalTokenChosen).unwrap();
    let sweep = layer_sweep(&base, &tuned, &ds, &PatchSpec::default()).unwrap();
    for mode in [TargetMode::PeakLayer, TargetMode::Stacked] {
        let a = attribute_sweep(&dm, &sweep, mode, LassoObjective::Normalized, 4).unwrap();
        let b = attribute_sweep(&dm, &sweep, mode, LassoObjective::Normalized, 4).unwrap();
        assert_eq!(a.coefficients, b.coefficients);
        assert_eq!(a.coefficients.len(), 3);
        assert_eq!(a.target, mode);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probe_r2_is_affine_invariant(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0, flip in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random::<f64>()).collect();
        let a = if flip { -scale } else { scale };
        let x2: Vec<f64> = x.iter().map(|v| a * v + shift).collect();
        let f1 = probe_fit(0, &x, &y).unwrap();
        let f2 = probe_fit(0, &x2, &y).unwrap();
        prop_assert!((f1.r_squared - f2.r_squared).abs() < 1e-10);
        prop_assert!((f1.slope - a * f2.slope).abs() < 1e-8 * (1.0 + f1.slope.abs()));
        prop_assert!((0.0..=1.0).contains(&f1.r_squared));
    }

    #[test]
    fn distances_nonnegative_and_finite(seed in 0u64..50) {
        let dm = synthetic_distances(10, 4, seed);
        let effects: Vec<f64> = dm.values.col(1);
        let res = lasso_attribution(&dm, &effects, seed).unwrap();
        prop_assert!(res.coefficients.iter().all(|c| c.is_finite()));
        for w in res.cv_report.path_nonzero.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }
}
