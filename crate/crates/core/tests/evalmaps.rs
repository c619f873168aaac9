use brainage::evalmaps::*;
use brainage::loss::mae_voxel;
use brainage::net::{NetConfig, TaskSet, UNet};
use brainage::phantom::{generate_phantom, PhantomSpec};
use brainage::volume::{BrainMask, Volume};
use brainage::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (sxy / sxx, my - sxy / sxx * mx)
}

#[test]
fn pad_hand_cases() {
    let mask = BrainMask::new([2, 1, 1], vec![true, true]).unwrap();
    let p = compute_pad(&Volume::new([2, 1, 1], [1.0; 3], vec![52.0, 47.0]).unwrap(), 50.0, &mask).unwrap();
    assert_eq!(p.data, vec![2.0, -3.0]);
    assert_eq!(p.sample_mae, 2.5);
    let a = adjust_pad(&p);
    assert_eq!(a.data, vec![-0.5, -5.5]);
    assert!(a.adjusted);

    let three = compute_pad(&Volume::filled([3, 3, 3], 53.0), 50.0, &BrainMask::full([3, 3, 3])).unwrap();
    assert_eq!(three.sample_mae, 3.0);
    assert!(adjust_pad(&three).data.iter().all(|&v| v == 0.0));
    let zero = compute_pad(&Volume::filled([2, 2, 2], 40.0), 40.0, &BrainMask::full([2, 2, 2])).unwrap();
    assert_eq!(zero.sample_mae, 0.0);
    assert_eq!(adjust_pad(&zero).data, zero.data);
}

#[test]
fn pad_rejects_empty_mask_and_shape_mismatch() {
    let empty = BrainMask::new_allow_empty([2, 1, 1], vec![false, false]).unwrap();
    assert!(compute_pad(&Volume::zeros([2, 1, 1]), 30.0, &empty).is_err());
    assert!(compute_pad(&Volume::zeros([3, 1, 1]), 30.0, &BrainMask::full([2, 1, 1])).is_err());
}

#[test]
fn pad_map_saves_volume_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let p = compute_pad(&Volume::filled([4, 4, 4], 33.0), 30.0, &BrainMask::full([4, 4, 4])).unwrap();
    let path = dir.path().join("pad.nii.gz");
    p.save(&path, "nifti1").unwrap();
    let side: PadSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!(side.sample_mae, 3.0);
    assert!(!side.corrected);
    assert_eq!(brainage::volume::load_volume(&path, "nifti1").unwrap().data()[0], 3.0);
}

#[test]
fn regression_fit_is_exact_on_a_line() {
    let pairs: Vec<(f64, f64)> = (0..20).map(|i| 18.0 + 3.5 * i as f64).map(|a| (a, 0.7 * a + 15.0)).collect();
    match fit_bias_correction(&pairs, "regression").unwrap() {
        BiasCorrectionModel::Regression { slope, intercept, calibration_n, .. } => {
            assert!((slope - 0.7).abs() < 1e-9 && (intercept - 15.0).abs() < 1e-9);
            assert_eq!(calibration_n, 20);
        }
        other => panic!("{other:?}"),
    }
    let id: Vec<(f64, f64)> = (18..60).map(|a| (a as f64, a as f64)).collect();
    let bc = fit_bias_correction(&id, "regression").unwrap();
    assert!((bc.apply(44.0, 40.0).unwrap() - 44.0).abs() < 1e-9);
}

#[test]
fn regression_inverts_the_bias() {
    let bc = BiasCorrectionModel::Regression {
        slope: 0.7,
        intercept: 15.0,
        calibration_n: 10,
        age_range: [18.0, 88.0],
    };
    assert!((bc.apply(50.0, 50.0).unwrap() - 50.0).abs() < 1e-12);
    assert_eq!(BiasCorrectionModel::identity().apply(61.5, 40.0).unwrap(), 61.5);
}

#[test]
fn out_of_range_age_is_rejected_in_both_modes() {
    let pairs: Vec<(f64, f64)> = (18..=70).map(|a| (a as f64, a as f64 + 4.0)).collect();
    for mode in ["regression", "age_bins"] {
        let bc = fit_bias_correction(&pairs, mode).unwrap();
        let e = bc.apply(60.0, 75.0).unwrap_err();
        assert!(matches!(e, Error::Range(_)), "{mode}: {e}");
        assert!(e.to_string().contains("70"), "{e}");
    }
}

#[test]
fn age_bins_on_constant_pad() {
    let pairs: Vec<(f64, f64)> = (18..=88).map(|a| (a as f64, a as f64 + 4.0)).collect();
    let bc = fit_bias_correction(&pairs, "age_bins").unwrap();
    match &bc {
        BiasCorrectionModel::AgeBins { offsets, edges, .. } => {
            assert_eq!(edges.first(), Some(&18.0));
            assert_eq!(edges.last(), Some(&88.0));
            assert!(offsets.iter().all(|o| (o.unwrap() - 4.0).abs() < 1e-12));
        }
        other => panic!("{other:?}"),
    }
    assert!((bc.apply(54.0, 50.0).unwrap() - 50.0).abs() < 1e-12);
}

#[test]
fn degenerate_calibration_fails() {
    assert!(matches!(fit_bias_correction(&[(40.0, 41.0), (40.0, 45.0)], "regression"), Err(Error::Fit(_))));
    assert!(fit_bias_correction(&[(40.0, 41.0)], "regression").is_err());
    assert!(matches!(fit_bias_correction(&[(40.0, 41.0), (50.0, 55.0)], "cubic"), Err(Error::UnknownStrategy { .. })));
}

#[test]
fn regression_recovers_synthetic_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let pairs: Vec<(f64, f64)> = (0..100)
        .map(|_| {
            let a = rng.gen_range(18.0..88.0);
            (a, 0.7 * a + 15.0 + noise.sample(&mut rng))
        })
        .collect();
    let bc = fit_bias_correction(&pairs, "regression").unwrap();
    let BiasCorrectionModel::Regression { slope, intercept, .. } = bc else { panic!() };
    assert!((slope - 0.7).abs() <= 0.05 && (intercept - 15.0).abs() <= 1.0);
    let ages: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let pads: Vec<f64> = pairs.iter().map(|&(a, p)| bc.apply(p, a).unwrap() - a).collect();
    assert!(line_fit(&ages, &pads).0.abs() <= 0.05);
}

#[test]
fn voxel_correction_applies_the_global_transform() {
    let bc = BiasCorrectionModel::Regression {
        slope: 0.5,
        intercept: 20.0,
        calibration_n: 3,
        age_range: [18.0, 88.0],
    };
    let v = Volume::new([3, 1, 1], [1.0; 3], vec![30.0, 40.0, 50.0]).unwrap();
    assert_eq!(bc.apply_volume(&v, 40.0).unwrap().data(), &[20.0, 40.0, 60.0]);
}

#[test]
fn mean_sd_uses_sample_convention() {
    let (m, sd) = mean_sd(&[2.0, 4.0]);
    assert_eq!(m, 3.0);
    assert!((sd - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(format_mean_sd(m, sd), "3.00±1.41");
    assert_eq!(mean_sd(&[5.0]), (5.0, 0.0));
}

#[test]
fn full_volume_prediction_shapes_and_determinism() {
    let cfg = NetConfig {
        base_channels: 2,
        depth: 3,
        task_set: TaskSet::SGV,
        global_hidden: 4,
        age_offset: 50.0,
        ..NetConfig::default()
    };
    let mut m = UNet::new(cfg, 1).unwrap();
    let s = generate_phantom(&PhantomSpec::scaled([20, 18, 22], 40.0, 3)).unwrap();
    let a = predict_full_volume(&mut m, &s.image).unwrap();
    assert_eq!(a.voxel_age.dims(), [20, 18, 22]);
    assert_eq!(a.seg_logits.as_ref().unwrap()[0].len(), s.image.len());
    let b = predict_full_volume(&mut m, &s.image).unwrap();
    assert_eq!(a, b);
}

#[test]
fn report_for_a_perfect_predictor_is_zero() {
    let r = TestReport {
        label: "oracle".into(),
        rows: vec![],
        mae_mean: 0.0,
        mae_sd: 0.0,
        dice_mean: None,
        global_mae: None,
        corrected: None,
    };
    assert_eq!(r.mae_cell(), "0.00±0.00");
    assert_eq!(format_mean_sd(5.3, 3.29), "5.30±3.29");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pad_mae_agrees_with_the_loss(seed in any::<u64>(), age in 18.0f64..88.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 64;
        let pred: Vec<f32> = (0..n).map(|_| rng.gen_range(10.0f32..90.0)).collect();
        let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        m[0] = true;
        let mask = BrainMask::new([4, 4, 4], m).unwrap();
        let p = compute_pad(&Volume::new([4, 4, 4], [1.0; 3], pred.clone()).unwrap(), age, &mask).unwrap();
        let p64: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
        let t = vec![age; n];
        prop_assert!((p.sample_mae - mae_voxel(&[&p64], &[&t], &[&mask]).unwrap()).abs() < 1e-6);
        let a = adjust_pad(&p);
        prop_assert!((a.mask_mean() - (p.mask_mean() - p.sample_mae)).abs() < 1e-9);
    }

    #[test]
    fn correction_keeps_order_at_fixed_age(p1 in 10.0f64..90.0, p2 in 10.0f64..90.0, age in 20.0f64..80.0, slope in 0.3f64..1.2) {
        let bc = BiasCorrectionModel::Regression { slope, intercept: 12.0, calibration_n: 5, age_range: [18.0, 88.0] };
        let (c1, c2) = (bc.apply(p1, age).unwrap(), bc.apply(p2, age).unwrap());
        prop_assert_eq!(p1 < p2, c1 < c2);
        let pairs: Vec<(f64, f64)> = (18..=88).map(|a| (a as f64, a as f64 * slope)).collect();
        let bins = fit_bias_correction(&pairs, "age_bins").unwrap();
        let (d1, d2) = (bins.apply(p1, age).unwrap(), bins.apply(p2, age).unwrap());
        prop_assert_eq!(p1 < p2, d1 < d2);
    }
}
