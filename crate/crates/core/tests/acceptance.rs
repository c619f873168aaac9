//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,3,7` restricts the run to the listed criteria.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use brainage::dataset::Sample;
use brainage::evalmaps::{fit_bias_correction, format_mean_sd, BiasCorrectionModel, PADMap};
use brainage::interpret::*;
use brainage::loss::*;
use brainage::net::{GlobalRegressor, RegressorConfig, TaskSet};
use brainage::phantom::generate_cohort;
use brainage::regional::{cohort_regional_report, regional_means, RegionAtlas};
use brainage::stats::{holm_bonferroni, wilcoxon_signed_rank, PMethod};
use brainage::train::*;
use brainage::volume::{BrainMask, LabelVolume, Volume};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_loss_oracles() -> Check {
    let p = vec![vec![vec![0.0, 1.0, 1.0, 1.0], vec![1.0, 0.0, 0.0, 0.0]]];
    let d = dice_loss(&p, &[&[1, 1, 0, 0]]).unwrap();
    ensure(1.0 - d == 2.0 / 3.0, format!("toy Dice {}", 1.0 - d))?;
    let mask = BrainMask::new([2, 1, 1], vec![true, true]).unwrap();
    let m = mae_voxel(&[&[32.0, 37.0]], &[&[30.0, 40.0]], &[&mask]).unwrap();
    ensure(m == 2.5, format!("toy MAE {m}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let batch = rng.gen_range(1..4);
        let n = rng.gen_range(8..80);
        let classes = rng.gen_range(2..5);
        let (inputs, targets) = loss_toy(&mut rng, batch, n, classes);
        let probs: Vec<Vec<Vec<f64>>> = (0..batch).map(|_| random_probs(&mut rng, classes, n)).collect();
        let labels: Vec<&[u8]> = targets.labels.iter().map(Vec::as_slice).collect();
        worst = worst.max((dice_loss(&probs, &labels).unwrap() - naive_dice_loss(&probs, &labels)).abs());
        let pv: Vec<&[f64]> = inputs.voxel.iter().map(Vec::as_slice).collect();
        let tv: Vec<&[f64]> = targets.voxel.iter().map(Vec::as_slice).collect();
        let mv: Vec<&BrainMask> = targets.masks.iter().collect();
        let fast = mae_voxel(&pv, &tv, &mv).unwrap();
        worst = worst.max((fast - naive_mae_voxel(&inputs.voxel, &targets.voxel, &targets.masks)).abs());
        let g = inputs.global.as_ref().unwrap();
        worst = worst.max((mae_global(g, &targets.global).unwrap() - naive_mae_global(g, &targets.global)).abs());
    }
    ensure(worst < 1e-6, format!("worst oracle gap {worst:e}"))?;
    Ok(format!("200 instances, worst gap {worst:.1e}; Dice 2/3 and MAE 2.5 exact"))
}

fn c2_gradients() -> Check {
    let mut worst = 0.0f64;
    for ts in TaskSet::ALL {
        for epoch in [10, 100, 200] {
            let e = max_gradient_error(ts, epoch, epoch as u64 + 1);
            ensure(e < 1e-4, format!("{ts} epoch {epoch}: relative error {e:e}"))?;
            worst = worst.max(e);
        }
    }
    Ok(format!("4 task sets x 3 segments, worst relative error {worst:.1e}"))
}

fn c3_schedules() -> Check {
    let s = LossWeightSchedule::default();
    let table = [
        (0, Weights::new(80.0, 1.0, 1.0)),
        (49, Weights::new(80.0, 1.0, 1.0)),
        (50, Weights::new(40.0, 1.0, 1.0)),
        (129, Weights::new(40.0, 1.0, 1.0)),
        (130, Weights::new(15.0, 0.7, 1.3)),
        (300, Weights::new(15.0, 0.7, 1.3)),
    ];
    for (e, w) in table {
        ensure(s.weights_at(e).unwrap() == w, format!("weights at epoch {e}"))?;
    }
    let c = TrainConfig::default();
    let lrs = [0.001, 0.0006, 0.00036, 0.000216, 0.0001296];
    for (e, want) in [0, 70, 140, 210, 280].into_iter().zip(lrs) {
        ensure(lr_at(e, &c) == want, format!("lr at epoch {e} is {}", lr_at(e, &c)))?;
    }
    Ok("6 weight lookups and 5 learning rates exact".into())
}

fn c4_noise() -> Check {
    let n = 1_000_000;
    let mask = BrainMask::full([100, 100, 100]);
    let truth = vec![50.0; n];
    let noisy = inject_label_noise(&truth, &mask, &NoiseSpec { seed: 4, ..NoiseSpec::default() }).unwrap();
    ensure(noisy.iter().all(|v| (48.0..=52.0).contains(v)), "label outside age ± 2")?;
    let mean = noisy.iter().sum::<f64>() / n as f64;
    let var = noisy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    ensure((mean - 50.0).abs() <= 0.01, format!("mean {mean}"))?;
    ensure((var / (4.0 / 3.0) - 1.0).abs() <= 0.05, format!("variance {var}"))?;
    let clean = inject_label_noise(&truth, &mask, &NoiseSpec::disabled()).unwrap();
    ensure(clean == truth, "no-noise labels differ from age")?;
    Ok(format!("mean offset {:+.4}, variance {var:.4} (target 1.3333)", mean - 50.0))
}

struct Desk {
    samples: Vec<Sample>,
    split: SplitSpec,
    report: AblationReport,
    seconds: f64,
}

fn desk_ablation() -> Desk {
    let t = Instant::now();
    let samples = generate_cohort(200, 18.0, 88.0, 7).unwrap();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = SplitSpec::by_counts(&ids, 160, 20, 7).unwrap();
    let cfg = TrainConfig { seed: 7, ..TrainConfig::desk() };
    let report = run_ablation(&cfg, &samples, &split, None).unwrap();
    Desk {
        samples,
        split,
        report,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn c5_end_to_end(desk: &Desk) -> Check {
    let train = SplitSpec::select(&desk.split.train, &desk.samples).unwrap();
    let test = SplitSpec::select(&desk.split.test, &desk.samples).unwrap();
    let mean = train.iter().map(|s| s.age).sum::<f64>() / train.len() as f64;
    let baseline = test.iter().map(|s| (s.age - mean).abs()).sum::<f64>() / test.len() as f64;
    let row = desk.report.rows.iter().find(|r| r.variant == "S+G+V").unwrap();
    let ratio = row.mae_mean / baseline;
    let dice = row.dice_mean.unwrap();
    let msg = format!(
        "MAE {} vs baseline {baseline:.2} (ratio {ratio:.3}, need <= 0.6), Dice {dice:.3} (need >= 0.85)",
        format_mean_sd(row.mae_mean, row.mae_sd)
    );
    ensure(ratio <= 0.6 && dice >= 0.85, msg.clone())?;
    Ok(msg)
}

fn c6_ablation(desk: &Desk) -> Check {
    let names: Vec<&str> = desk.report.rows.iter().map(|r| r.variant.as_str()).collect();
    ensure(names == ["V", "S+V", "G+V", "S+G+V"], format!("variants {names:?}"))?;
    let table = desk.report.to_table();
    ensure(table.lines().count() == 5 && table.contains('±'), format!("table:\n{table}"))?;
    for r in &desk.report.rows {
        ensure(r.mae_mean.is_finite(), format!("{} MAE not finite", r.variant))?;
    }

    let samples = generate_cohort(2, 18.0, 88.0, 11).unwrap();
    let split = SplitSpec {
        train: vec![samples[0].id.clone()],
        val: vec![samples[1].id.clone()],
        test: vec![],
    };
    let mut maes = Vec::new();
    for ts in TaskSet::ALL {
        let epochs = 200;
        let cfg = TrainConfig {
            epochs,
            lr_step: (70.0 * epochs as f64 / 300.0).round() as usize,
            schedule: LossWeightSchedule::scaled(epochs),
            seed: 11,
            ..TrainConfig::desk()
        }
        .for_variant(ts);
        let mut out = train_model(&cfg, &samples, &split, None).unwrap();
        let m = training_mae(&mut out.model, &[&samples[0]]).unwrap();
        maes.push(format!("{ts} {m:.3}"));
        ensure(m < 1.0, format!("sentinel {ts}: training MAE {m}"))?;
    }
    Ok(format!("{}; sentinel {}", table.lines().skip(1).map(str::trim).collect::<Vec<_>>().join(" | "), maes.join(", ")))
}

fn c7_bias() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let pairs: Vec<(f64, f64)> = (0..100)
        .map(|_| {
            let a = rng.gen_range(18.0..88.0);
            (a, 0.7 * a + 15.0 + noise.sample(&mut rng))
        })
        .collect();
    let bc = fit_bias_correction(&pairs, "regression").unwrap();
    let BiasCorrectionModel::Regression { slope, intercept, .. } = bc else {
        return Err("regression mode returned another model".into());
    };
    ensure((slope - 0.7).abs() <= 0.05 && (intercept - 15.0).abs() <= 1.0, format!("fit ({slope}, {intercept})"))?;
    let ages: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let pads: Vec<f64> = pairs.iter().map(|&(a, p)| bc.apply(p, a).unwrap() - a).collect();
    let n = ages.len() as f64;
    let (ma, mp) = (ages.iter().sum::<f64>() / n, pads.iter().sum::<f64>() / n);
    let sxy: f64 = ages.iter().zip(&pads).map(|(a, p)| (a - ma) * (p - mp)).sum();
    let sxx: f64 = ages.iter().map(|a| (a - ma).powi(2)).sum();
    let residual = sxy / sxx;
    ensure(residual.abs() <= 0.05, format!("post-correction slope {residual}"))?;
    let lo = ages.iter().cloned().fold(f64::MAX, f64::min);
    ensure(bc.apply(50.0, lo - 1.0).is_err(), "out-of-range age accepted")?;
    Ok(format!("fit ({slope:.4}, {intercept:.3}), residual slope {residual:+.4}, out-of-range rejected"))
}

fn random_regional_case(rng: &mut ChaCha8Rng) -> (PADMap, RegionAtlas) {
    let dims = [rng.gen_range(4..24), rng.gen_range(4..24), rng.gen_range(4..24)];
    let n: usize = dims.iter().product();
    let regions = rng.gen_range(1..10u8);
    let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    m[0] = true;
    let mut map: std::collections::BTreeMap<u8, String> = (1..=regions).map(|c| (c, format!("r{c}"))).collect();
    map.insert(0, "outside".into());
    let codes = (0..n).map(|_| rng.gen_range(0..=regions)).collect();
    let atlas = RegionAtlas::new(LabelVolume::new(dims, codes, map).unwrap()).unwrap();
    let pad = PADMap {
        dims,
        data: (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect(),
        mask: BrainMask::new(dims, m).unwrap(),
        chronological_age: 50.0,
        sample_mae: 0.0,
        adjusted: false,
        corrected: false,
    };
    (pad, atlas)
}

fn c8_regional() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst, mut recombine) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (pad, atlas) = random_regional_case(&mut rng);
        let want = naive_regional(&pad, &atlas);
        let stats = regional_means(&pad, &atlas).unwrap();
        for s in &stats {
            let (n, m) = want[&s.code];
            ensure(s.count == n, format!("region {} count {} vs {n}", s.code, s.count))?;
            if let Some(mean) = s.mean {
                worst = worst.max((mean - m).abs());
            }
        }
        let codes = atlas.labels().data();
        let covered: Vec<f64> = (0..pad.data.len())
            .filter(|&i| pad.mask.data()[i] && codes[i] != 0)
            .map(|i| pad.data[i])
            .collect();
        let total: usize = stats.iter().map(|s| s.count).sum();
        let weighted: f64 = stats.iter().filter_map(|s| s.mean.map(|m| m * s.count as f64)).sum::<f64>();
        if total > 0 {
            recombine = recombine.max((weighted / total as f64 - covered.iter().sum::<f64>() / covered.len() as f64).abs());
        }
    }
    ensure(worst < 1e-9 && recombine < 1e-9, format!("oracle gap {worst:e}, recombination gap {recombine:e}"))?;

    let (mut pad, atlas) = random_regional_case(&mut rng);
    pad.data.iter_mut().for_each(|v| *v = 3.0);
    let report = cohort_regional_report(&[pad], &atlas).unwrap();
    for r in &report.rows {
        let cell = format_mean_sd(r.pad_mean, r.sd_mean);
        ensure(cell == "3.00±0.00", format!("{} shows {cell}", r.name))?;
    }
    Ok(format!("50 pairs, oracle gap {worst:.1e}, recombination gap {recombine:.1e}, constant +3 gives 3.00±0.00"))
}

fn small_regressor(channels: Vec<usize>, seed: u64) -> GlobalRegressor {
    GlobalRegressor::new(
        RegressorConfig {
            channels,
            final_channels: 4,
            age_offset: 0.0,
            age_scale: 1.0,
        },
        seed,
    )
    .unwrap()
}

fn uniform_volume(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Volume {
    let n = dims.iter().product();
    Volume::new(dims, [1.0; 3], (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap()
}

fn c9_interpret() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = uniform_volume([16; 3], &mut rng);
    let mut m = small_regressor(vec![4, 4], 9);
    let spec = OcclusionSpec {
        size: [4; 3],
        stride: [3; 3],
        fill_value: 0.0,
    };
    let fast = occlusion_sensitivity(&mut m, &x, spec).unwrap();
    ensure(fast.data.data() == &naive_occlusion(&mut m, &x, &spec).unwrap()[..], "occlusion differs from loops")?;

    let sg = smoothgrad(&mut m, &x, SmoothGradSpec { n_samples: 1, noise_sd: 0.0, seed: 0 }).unwrap();
    let (_, g) = m.input_gradient(&x).unwrap();
    let bitwise = sg.data.data().iter().zip(&g).all(|(a, b)| a.to_bits() == b.abs().to_bits());
    ensure(bitwise, "SmoothGrad(n=1, sd=0) is not |gradient| bitwise")?;

    let mut deep = small_regressor(vec![4, 4, 4], 10);
    for _ in 0..100 {
        let cam = gradcam(&mut deep, &uniform_volume([16; 3], &mut rng)).unwrap();
        ensure(cam.data.data().iter().all(|&v| v >= 0.0), "negative Grad-CAM value")?;
    }
    deep.zero_head();
    let cam = gradcam(&mut deep, &uniform_volume([16; 3], &mut rng)).unwrap();
    ensure(cam.data.data().iter().all(|&v| v == 0.0), "Grad-CAM nonzero for a feature-independent head")?;

    let w: Vec<f32> = (0..512).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    let mut lin = LinearModel { w: w.clone(), b: 40.0 };
    let s = smoothgrad(&mut lin, &uniform_volume([8; 3], &mut rng), SmoothGradSpec { n_samples: 64, noise_sd: 0.2, seed: 2 })
        .unwrap();
    let worst = s.data.data().iter().zip(&w).map(|(a, b)| ((a - b.abs()) / b.abs()).abs()).fold(0.0f32, f32::max);
    ensure(worst <= 0.02, format!("linear SmoothGrad off by {worst}"))?;
    Ok(format!("occlusion exact on 16³, SmoothGrad bitwise, Grad-CAM >= 0 and zero, linear |w| within {:.1e}", worst))
}

fn c10_stats() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 5..=10 {
        for _ in 0..50 {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-6..=6) as f64).collect();
            if let Ok(c) = wilcoxon_signed_rank(&a, &vec![0.0; n]) {
                ensure(c.method == PMethod::Exact, "small sample not on the exact path")?;
                worst = worst.max((c.p_value - brute_force_wilcoxon_p(&a)).abs());
                cases += 1;
            }
        }
    }
    ensure(worst <= 1e-12, format!("exact p differs from enumeration by {worst:e}"))?;
    let r = holm_bonferroni(&[0.01, 0.02, 0.03], 0.05).unwrap();
    ensure(r.reject == [true, true, true], format!("{:?}", r.reject))?;
    let r = holm_bonferroni(&[0.04, 0.04], 0.05).unwrap();
    ensure(r.reject == [false, false], format!("{:?}", r.reject))?;
    Ok(format!("{cases} exact cases, worst gap {worst:.1e}; both Holm examples reproduce"))
}

fn cli(args: &[&str]) -> i32 {
    brainage::cli::main_with_args(std::iter::once("brainage").chain(args.iter().copied()))
}

fn c11_reproducibility() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |q: &Path| q.to_str().unwrap().to_string();
    let data = dir.path().join("data");
    ensure(cli(&["phantom-gen", "--n", "6", "--dims", "32", "--seed", "2", "--out", &p(&data)]) == 0, "phantom-gen failed")?;
    let manifest = p(&data.join("manifest.csv"));
    let tiny = ["--n-train", "4", "--n-val", "1", "--epochs", "2", "--patch-size", "16", "--base-channels", "2", "--seed", "5"];
    let mut diffs = Vec::new();
    let roots = [dir.path().join("first"), dir.path().join("second")];
    for root in &roots {
        for sub in ["train", "ablate"] {
            let mut args = vec![sub, "--manifest", &manifest];
            args.extend(tiny);
            let out = p(&root.join(sub));
            args.extend(["--out", &out]);
            ensure(cli(&args) == 0, format!("{sub} failed"))?;
        }
        let ckpt = p(&roots[0].join("train/final.ckpt"));
        let split = p(&roots[0].join("train/split.json"));
        let out = p(&root.join("eval"));
        ensure(
            cli(&["eval", "--checkpoint", &ckpt, "--testset", &manifest, "--split", &split, "--out", &out]) == 0,
            "eval failed",
        )?;
    }
    diffs.extend(tree_differences(&roots[0], &roots[1]));
    ensure(diffs.is_empty(), diffs.join("; "))?;
    Ok("train, ablate and eval reruns byte-identical".into())
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let start = Instant::now();
    let mut failed = 0;
    let mut report = |k: usize, title: &str, f: &mut dyn FnMut() -> Check| {
        if !wanted(k) {
            return;
        }
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(m) => println!("PASS criterion {k} ({title}, {secs:.1}s): {m}"),
            Err(m) => {
                failed += 1;
                println!("FAIL criterion {k} ({title}, {secs:.1}s): {m}");
            }
        }
    };
    report(1, "loss oracles", &mut c1_loss_oracles);
    report(2, "gradient checks", &mut c2_gradients);
    report(3, "schedule exactness", &mut c3_schedules);
    report(4, "noise statistics", &mut c4_noise);
    if wanted(5) || wanted(6) {
        let desk = catch_unwind(desk_ablation).map_err(|_| "desk ablation panicked".to_string());
        if let Ok(d) = &desk {
            println!("desk ablation trained 4 variants in {:.0}s", d.seconds);
        }
        report(5, "end-to-end phantom experiment", &mut || desk.as_ref().map_err(Clone::clone).and_then(c5_end_to_end));
        report(6, "ablation harness", &mut || desk.as_ref().map_err(Clone::clone).and_then(c6_ablation));
    }
    report(7, "bias correction", &mut c7_bias);
    report(8, "regional aggregation", &mut c8_regional);
    report(9, "interpretability", &mut c9_interpret);
    report(10, "statistics", &mut c10_stats);
    report(11, "reproducibility", &mut c11_reproducibility);
    println!("acceptance finished in {:.0}s, {failed} failed", start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
