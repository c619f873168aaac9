use brainage::loss::mae_voxel;
use brainage::phantom::{generate_cohort, generate_phantom, PhantomSpec};
use brainage::volume::*;
use brainage::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume::new(dims, [1.0, 1.5, 2.0], (0..n).map(|_| rng.gen_range(-100.0f32..100.0)).collect()).unwrap()
}

#[test]
fn zeros_and_random_round_trip_bitwise_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    for (fmt, ext) in [("nifti1", "nii.gz"), ("nifti1", "nii"), ("raw", "raw")] {
        for v in [Volume::zeros([8; 3]), random_volume([16; 3], 3), random_volume([5, 7, 3], 4)] {
            let p = dir.path().join(format!("v.{ext}"));
            save_volume(&v, &p, fmt).unwrap();
            let back = load_volume(&p, fmt).unwrap();
            assert_eq!(back.dims(), v.dims());
            assert_eq!(back.spacing(), v.spacing());
            let same = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{fmt} round trip changed values");
        }
    }
}

#[test]
fn orientation_survives_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume([4, 4, 4], 1).with_orientation(Orientation::parse("LPS").unwrap());
    for (fmt, ext) in [("nifti1", "nii"), ("raw", "raw")] {
        let p = dir.path().join(format!("o.{ext}"));
        save_volume(&v, &p, fmt).unwrap();
        assert_eq!(load_volume(&p, fmt).unwrap().orientation(), v.orientation());
    }
}

#[test]
fn nan_voxel_is_rejected_with_its_index() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nan.raw");
    save_volume(&Volume::zeros([4, 4, 4]), &p, "raw").unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    let idx = 1 + 4 * (2 + 4 * 3);
    bytes[idx * 4..idx * 4 + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&p, bytes).unwrap();
    let e = load_volume(&p, "raw").unwrap_err();
    assert!(matches!(e, Error::Ingestion { .. }), "{e}");
    let msg = e.to_string();
    assert!(msg.contains(&idx.to_string()) || msg.contains("(1, 2, 3)"), "{msg}");
}

#[test]
fn missing_sidecar_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.raw");
    save_volume(&Volume::zeros([2, 2, 2]), &p, "raw").unwrap();
    let side = dir.path().join("m.raw.txt");
    let text = std::fs::read_to_string(&side).unwrap();
    std::fs::write(&side, text.lines().filter(|l| !l.starts_with("spacing")).collect::<Vec<_>>().join("\n")).unwrap();
    let msg = load_volume(&p, "raw").unwrap_err().to_string();
    assert!(msg.contains("spacing"), "{msg}");
}

#[test]
fn extension_must_match_format() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::zeros([2, 2, 2]);
    assert!(save_volume(&v, dir.path().join("a.raw"), "nifti1").is_err());
    assert!(save_volume(&v, dir.path().join("a.nii.gz"), "raw").is_err());
    assert!(matches!(
        save_volume(&v, dir.path().join("a.nii"), "analyze"),
        Err(Error::UnknownStrategy { .. })
    ));
}

#[test]
fn unreadable_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_volume(dir.path().join("none.nii.gz"), "nifti1").is_err());
    let p = dir.path().join("junk.nii");
    std::fs::write(&p, b"not an image").unwrap();
    assert!(load_volume(&p, "nifti1").is_err());
}

#[test]
fn patch_origins_are_uniform_by_chi_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 10_000;
    let mut counts = [[0usize; 33]; 3];
    for _ in 0..draws {
        let p = sample_random_patch([160; 3], [128; 3], &mut rng).unwrap();
        for a in 0..3 {
            counts[a][p.origin[a]] += 1;
        }
    }
    // chi-square critical value for 32 degrees of freedom at alpha = 0.01
    let critical = 53.486;
    let expected = draws as f64 / 33.0;
    for c in counts {
        let chi: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi < critical, "chi-square {chi}");
    }
}

#[test]
fn patch_sampling_never_leaves_the_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1_000_000 {
        let dims = [rng.gen_range(1..40), rng.gen_range(1..40), rng.gen_range(1..40)];
        let size = [rng.gen_range(1..=dims[0]), rng.gen_range(1..=dims[1]), rng.gen_range(1..=dims[2])];
        let p = sample_random_patch(dims, size, &mut rng).unwrap();
        for a in 0..3 {
            assert!(p.origin[a] + p.size[a] <= dims[a]);
        }
    }
    assert!(sample_random_patch([8; 3], [9, 8, 8], &mut rng).is_err());
}

#[test]
fn phantom_files_reload_as_the_same_samples() {
    let dir = tempfile::tempdir().unwrap();
    let template = PhantomSpec::scaled([16; 3], 40.0, 0);
    let samples = brainage::phantom::generate_cohort_with(&template, 3, 20.0, 80.0, 9).unwrap();
    for fmt in ["nifti1", "raw"] {
        let sub = dir.path().join(fmt);
        let m = brainage::dataset::write_samples(&samples, &sub, fmt).unwrap();
        let back = brainage::dataset::Manifest::read(&m).unwrap().load_all().unwrap();
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.age, b.age);
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.tissues.data(), b.tissues.data());
        }
    }
}

#[test]
fn cohort_age_mean_is_central() {
    let specs = brainage::phantom::cohort_specs(&PhantomSpec::default(), 500, 18.0, 88.0, 3).unwrap();
    let mean = specs.iter().map(|s| s.age).sum::<f64>() / 500.0;
    assert!((49.0..=57.0).contains(&mean), "{mean}");
    let one = generate_cohort(1, 18.0, 88.0, 1).unwrap();
    assert!((18.0..=88.0).contains(&one[0].age));
    assert!(generate_cohort(2, 50.0, 40.0, 1).is_err());
}

#[test]
fn same_seed_same_phantom() {
    let s = PhantomSpec::scaled([24; 3], 30.0, 77);
    assert_eq!(generate_phantom(&s).unwrap(), generate_phantom(&s).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn raw_round_trip_is_exact(dx in 1usize..6, dy in 1usize..6, dz in 1usize..6, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume([dx, dy, dz], seed);
        let p = dir.path().join("p.raw");
        save_volume(&v, &p, "raw").unwrap();
        prop_assert_eq!(load_volume(&p, "raw").unwrap(), v);
    }

    #[test]
    fn masked_reductions_ignore_outside_voxels(seed in any::<u64>(), bump in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 27;
        let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        m[0] = true;
        let mask = BrainMask::new([3, 3, 3], m.clone()).unwrap();
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..90.0)).collect();
        let truth = vec![40.0; n];
        let a = mae_voxel(&[&pred], &[&truth], &[&mask]).unwrap();
        let mut p2 = pred.clone();
        for (v, &inside) in p2.iter_mut().zip(&m) {
            if !inside {
                *v += bump;
            }
        }
        prop_assert_eq!(a, mae_voxel(&[&p2], &[&truth], &[&mask]).unwrap());
    }

    #[test]
    fn crop_of_single_voxel_is_that_voxel(x in 0usize..5, y in 0usize..4, z in 0usize..3, seed in any::<u64>()) {
        let v = random_volume([5, 4, 3], seed);
        let c = crop(&v, &Patch { origin: [x, y, z], size: [1, 1, 1] }).unwrap();
        prop_assert_eq!(c.data()[0], v.get(x, y, z));
        prop_assert_eq!(c.spacing(), v.spacing());
    }
}
