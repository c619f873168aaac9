//! Training loop, train/val/test splits, the learning-rate schedule, and the task ablation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nn3d::{AdamW, Mode, Parameterized, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::evalmaps::{evaluate_testset, format_mean_sd, predict_full_volume, TestReport};
use crate::loss::{
    combined_loss, combined_loss_with_grad, inject_label_noise, mae_global, mix, write_log_row, LossBreakdown,
    LossInputs, LossTargets, LossWeightSchedule, NoiseSpec, Phase, Weights, LOG_HEADER,
};
use crate::net::{save_checkpoint, GlobalRegressor, NetConfig, RegressorConfig, TaskSet, UNet};
use crate::volume::{crop, sample_random_patch, BrainMask};

fn default_betas() -> [f64; 2] {
    [0.5, 0.999]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub patch_size: [usize; 3],
    #[serde(default)]
    pub noise: NoiseSpec,
    pub task_set: TaskSet,
    pub schedule: LossWeightSchedule,
    #[serde(default)]
    pub seed: u64,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    /// Full-scale protocol.
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 2,
            lr0: 1e-3,
            weight_decay: 1e-5,
            betas: default_betas(),
            lr_step: 70,
            lr_gamma: 0.6,
            patch_size: [128; 3],
            noise: NoiseSpec::default(),
            task_set: TaskSet::SGV,
            schedule: LossWeightSchedule::full_scale(),
            seed: 0,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized run: 48³ patches of 64³ phantoms for 40 epochs with both schedules compressed.
    pub fn desk() -> Self {
        let epochs = 40;
        Self {
            epochs,
            patch_size: [48; 3],
            lr_step: (70.0 * epochs as f64 / 300.0).round() as usize,
            schedule: LossWeightSchedule::scaled(epochs),
            net: NetConfig {
                base_channels: 4,
                global_hidden: 32,
                age_scale: 10.0,
                ..NetConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Ablation variants use the default moment coefficients; the proposed model keeps its own.
    pub fn for_variant(&self, ts: TaskSet) -> Self {
        let mut c = self.clone();
        c.task_set = ts;
        c.net.task_set = ts;
        if ts != TaskSet::SGV {
            c.betas = [0.9, 0.999];
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0) || !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) || self.lr_step == 0 {
            return bad(format!(
                "need lr0 > 0, 0 < lr_gamma <= 1, lr_step >= 1 (got {}, {}, {})",
                self.lr0, self.lr_gamma, self.lr_step
            ));
        }
        if !(self.weight_decay >= 0.0) || self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("weight_decay must be >= 0 and betas in [0, 1)".into());
        }
        if self.task_set != self.net.task_set {
            return bad(format!(
                "task_set {} differs from net.task_set {}",
                self.task_set, self.net.task_set
            ));
        }
        if self.schedule.last_epoch() + 1 < self.epochs {
            return bad(format!(
                "schedule covers epochs 0..={} but training runs {} epochs",
                self.schedule.last_epoch(),
                self.epochs
            ));
        }
        self.noise.validate()?;
        self.net.validate()?;
        self.net.check_input(self.patch_size)
    }
}

/// `lr0 · lr_gamma^⌊epoch / lr_step⌋`, rounded to 15 significant digits so that decimal
/// settings give decimal rates (0.001 · 0.6² is 0.00036, not 0.00035999999999999997).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let v = cfg.lr0 * cfg.lr_gamma.powi((epoch / cfg.lr_step) as i32);
    format!("{v:.14e}").parse().unwrap_or(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    /// Seeded shuffle, then the first `n_train`, next `n_val`, and the rest.
    pub fn by_counts(ids: &[String], n_train: usize, n_val: usize, seed: u64) -> Result<Self> {
        if n_train == 0 || n_train + n_val > ids.len() {
            return Err(Error::Config(format!(
                "cannot split {} ids into {n_train} train and {n_val} validation",
                ids.len()
            )));
        }
        let mut ids = ids.to_vec();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 0x73706c6974)));
        let test = ids.split_off(n_train + n_val);
        let val = ids.split_off(n_train);
        Ok(Self { train: ids, val, test })
    }

    /// Proportional split with the train share taking any rounding slack.
    pub fn by_ratio(ids: &[String], ratio: [f64; 3], seed: u64) -> Result<Self> {
        let total: f64 = ratio.iter().sum();
        let n = ids.len() as f64;
        let n_val = (n * ratio[1] / total).round() as usize;
        let n_test = (n * ratio[2] / total).round() as usize;
        Self::by_counts(ids, ids.len().saturating_sub(n_val + n_test), n_val, seed)
    }

    /// Disjoint and covering `ids` exactly.
    pub fn validate(&self, ids: &[String]) -> Result<()> {
        let mut all: Vec<&String> = self.train.iter().chain(&self.val).chain(&self.test).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        if all.len() != n {
            return Err(Error::Config("split lists overlap".into()));
        }
        let mut want: Vec<&String> = ids.iter().collect();
        want.sort();
        if all != want {
            return Err(Error::Config("split does not cover the manifest exactly".into()));
        }
        if self.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self).expect("split serializes")).map_err(|e| Error::io(path, e))
    }

    pub fn select<'a>(ids: &[String], samples: &'a [Sample]) -> Result<Vec<&'a Sample>> {
        ids.iter()
            .map(|id| {
                samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::Config(format!("split id {id} is not in the dataset")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub weights: Weights,
    pub train_total: f64,
    pub val_mae_voxel: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: UNet,
    pub history: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub final_val_mae: f64,
    pub log_path: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

/// One training patch with its clean and noisy targets.
struct PatchItem {
    image: Vec<f32>,
    noisy: Vec<f64>,
    mask: BrainMask,
    labels: Vec<u8>,
    age: f64,
}

fn draw_patch(s: &Sample, cfg: &TrainConfig, epoch: usize, pos: usize) -> Result<PatchItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed ^ 0x7061746368, epoch as u64), pos as u64));
    // a patch must contain brain for the voxel term to be defined
    for _ in 0..32 {
        let p = sample_random_patch(s.dims(), cfg.patch_size, &mut rng)?;
        let mask = s.mask.crop(&p)?;
        if mask.count() == 0 {
            continue;
        }
        let image = crop(&s.image, &p)?.into_data();
        let labels = s.tissues.crop(&p)?.data().to_vec();
        let clean = vec![s.age; image.len()];
        let noisy = inject_label_noise(&clean, &mask, &cfg.noise.for_draw(epoch, pos))?;
        return Ok(PatchItem {
            image,
            noisy,
            mask,
            labels,
            age: s.age,
        });
    }
    Err(Error::Validation(format!("no patch of sample {} contains brain voxels", s.id)))
}

fn batch_tensor(items: &[PatchItem], size: [usize; 3]) -> Tensor {
    let mut data = Vec::with_capacity(items.len() * items[0].image.len());
    for it in items {
        data.extend_from_slice(&it.image);
    }
    Tensor::from_vec([items.len(), 1, size[2], size[1], size[0]], data)
}

/// Mean of per-sample breakdowns over the validation set against clean labels.
fn validate_model(model: &mut UNet, val: &[&Sample], cfg: &TrainConfig, epoch: usize) -> Result<LossBreakdown> {
    let mut acc: Option<LossBreakdown> = None;
    for s in val {
        let out = predict_full_volume(model, &s.image)?;
        let inputs = LossInputs {
            voxel: vec![out.voxel_age.data().iter().map(|&v| v as f64).collect()],
            seg_logits: out
                .seg_logits
                .as_ref()
                .map(|l| vec![l.iter().map(|c| c.iter().map(|&v| v as f64).collect()).collect()]),
            global: out.global_age.map(|g| vec![g]),
        };
        let targets = LossTargets {
            voxel: vec![vec![s.age; s.image.len()]],
            masks: vec![s.mask.clone()],
            labels: vec![s.tissues.data().to_vec()],
            global: vec![s.age],
        };
        let b = combined_loss(&inputs, &targets, cfg.task_set, &cfg.schedule, epoch)?;
        acc = Some(match acc {
            None => b,
            Some(a) => LossBreakdown {
                dice_loss: a.dice_loss.zip(b.dice_loss).map(|(x, y)| x + y),
                mae_voxel: a.mae_voxel + b.mae_voxel,
                mae_global: a.mae_global.zip(b.mae_global).map(|(x, y)| x + y),
                total: a.total + b.total,
                weights_used: b.weights_used,
            },
        });
    }
    let a = acc.ok_or_else(|| Error::Validation("validation split is empty".into()))?;
    let n = val.len() as f64;
    Ok(LossBreakdown {
        dice_loss: a.dice_loss.map(|x| x / n),
        mae_voxel: a.mae_voxel / n,
        mae_global: a.mae_global.map(|x| x / n),
        total: a.total / n,
        weights_used: a.weights_used,
    })
}

/// Trains a multitask U-Net. With `out_dir`, writes `train_log.csv`, `best.ckpt` and `final.ckpt`.
pub fn train_model(cfg: &TrainConfig, samples: &[Sample], split: &SplitSpec, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    split.validate(&ids)?;
    let train = SplitSpec::select(&split.train, samples)?;
    let val = SplitSpec::select(&split.val, samples)?;
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }

    let mut net_cfg = cfg.net.clone();
    net_cfg.age_offset = train.iter().map(|s| s.age).sum::<f64>() / train.len() as f64;
    let mut model = UNet::new(net_cfg, cfg.seed)?;
    let mut opt = AdamW::new(cfg.lr0 as f32, (cfg.betas[0] as f32, cfg.betas[1] as f32), cfg.weight_decay as f32);

    let mut log: Option<BufWriter<fs::File>> = None;
    let mut paths = (None, None, None);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("train_log.csv");
        let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(&p, e))?;
        log = Some(w);
        paths = (Some(p), Some(dir.join("best.ckpt")), Some(dir.join("final.ckpt")));
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (usize::MAX, f64::INFINITY);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        opt.lr = lr as f32;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x73687566, epoch as u64)));
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| draw_patch(train[i], cfg, epoch, bi * cfg.batch_size + k))
                .collect::<Result<Vec<_>>>()?;
            let x = batch_tensor(&items, cfg.patch_size);
            let out = model.forward(&x, Mode::Train)?;
            let inputs = LossInputs::from_net_output(&out);
            let targets = LossTargets {
                voxel: items.iter().map(|it| it.noisy.clone()).collect(),
                masks: items.iter().map(|it| it.mask.clone()).collect(),
                labels: items.iter().map(|it| it.labels.clone()).collect(),
                global: items.iter().map(|it| it.age).collect(),
            };
            let (b, g) = combined_loss_with_grad(&inputs, &targets, cfg.task_set, &cfg.schedule, epoch)?;
            if !b.total.is_finite() || !out.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: b.total,
                });
            }
            model.zero_grad();
            model.backward(&g.to_net_grads(&out));
            opt.step(&mut model);
            if let Some(w) = log.as_mut() {
                write_log_row(w, Phase::Train, epoch, step, lr, &b)?;
            }
            epoch_total += b.total;
            batches += 1;
            step += 1;
        }
        model.clear_cache();
        let vb = validate_model(&mut model, &val, cfg, epoch)?;
        if let Some(w) = log.as_mut() {
            write_log_row(w, Phase::Val, epoch, step, lr, &vb)?;
            w.flush().map_err(|e| Error::io("train_log.csv", e))?;
        }
        if vb.mae_voxel < best.1 {
            best = (epoch, vb.mae_voxel);
            if let Some(p) = &paths.1 {
                save_checkpoint(p, &mut model, epoch)?;
            }
        }
        history.push(EpochSummary {
            epoch,
            lr,
            weights: vb.weights_used,
            train_total: epoch_total / batches as f64,
            val_mae_voxel: vb.mae_voxel,
        });
    }
    if let Some(p) = &paths.2 {
        save_checkpoint(p, &mut model, cfg.epochs - 1)?;
    }
    Ok(TrainOutcome {
        final_val_mae: history.last().map(|h| h.val_mae_voxel).unwrap_or(f64::NAN),
        model,
        history,
        best_epoch: best.0,
        best_val_mae: best.1,
        log_path: paths.0,
        best_checkpoint: paths.1,
        final_checkpoint: paths.2,
    })
}

/// Mean training MAE_voxel of the last epoch on full volumes; used by the overfit sentinel.
pub fn training_mae(model: &mut UNet, samples: &[&Sample]) -> Result<f64> {
    let mut s = 0.0;
    for x in samples {
        let out = predict_full_volume(model, &x.image)?;
        s += crate::evalmaps::compute_pad(&out.voxel_age, x.age, &x.mask)?.sample_mae;
    }
    Ok(s / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mae_mean: f64,
    pub mae_sd: f64,
    pub dice_mean: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:>14} {:>8}\n", "model", "MAE_voxel", "Dice");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:>14} {:>8}\n",
                r.variant,
                format_mean_sd(r.mae_mean, r.mae_sd),
                r.dice_mean.map(|d| format!("{d:.3}")).unwrap_or_else(|| "-".into())
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mae_mean,mae_sd,dice_mean,best_epoch\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{},{}\n",
                r.variant,
                r.mae_mean,
                r.mae_sd,
                r.dice_mean.map(|d| format!("{d:.6}")).unwrap_or_default(),
                r.best_epoch
            ));
        }
        s
    }
}

/// Trains every task-set variant on the same data and seed, then evaluates each on the test split.
pub fn run_ablation(base: &TrainConfig, samples: &[Sample], split: &SplitSpec, out_dir: Option<&Path>) -> Result<AblationReport> {
    let test: Vec<Sample> = SplitSpec::select(&split.test, samples)?.into_iter().cloned().collect();
    let mut rows = Vec::new();
    for ts in TaskSet::ALL {
        let cfg = base.for_variant(ts);
        let dir = out_dir.map(|d| d.join(ts.label().replace('+', "")));
        let mut outcome = train_model(&cfg, samples, split, dir.as_deref())?;
        let report: TestReport = evaluate_testset(&mut outcome.model, &test, None, ts.label())?;
        rows.push(AblationRow {
            variant: ts.label().to_string(),
            mae_mean: report.mae_mean,
            mae_sd: report.mae_sd,
            dice_mean: report.dice_mean,
            best_epoch: outcome.best_epoch,
        });
    }
    let report = AblationReport { rows };
    if let Some(d) = out_dir {
        let p = d.join("ablation.csv");
        fs::write(&p, report.to_csv()).map_err(|e| Error::io(&p, e))?;
        let p = d.join("ablation.txt");
        fs::write(&p, report.to_table()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

/// Settings for the whole-volume global-age regressor used by the saliency methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub seed: u64,
    pub net: RegressorConfig,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr0: 1e-3,
            weight_decay: 1e-5,
            betas: [0.9, 0.999],
            seed: 0,
            net: RegressorConfig {
                age_scale: 10.0,
                ..RegressorConfig::default()
            },
        }
    }
}

/// Trains the global regressor on whole volumes with the global MAE.
pub fn train_regressor(cfg: &RegressorTrainConfig, train: &[&Sample]) -> Result<GlobalRegressor> {
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("regressor training needs samples and a positive batch size".into()));
    }
    let mut net = cfg.net.clone();
    net.age_offset = train.iter().map(|s| s.age).sum::<f64>() / train.len() as f64;
    let mut model = GlobalRegressor::new(net, cfg.seed)?;
    let mut opt = AdamW::new(cfg.lr0 as f32, (cfg.betas[0] as f32, cfg.betas[1] as f32), cfg.weight_decay as f32);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x72656772, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let [dx, dy, dz] = train[chunk[0]].dims();
            let mut data = Vec::new();
            for &i in chunk {
                data.extend_from_slice(train[i].image.data());
            }
            let x = Tensor::from_vec([chunk.len(), 1, dz, dy, dx], data);
            let pred = model.forward(&x, Mode::Train)?;
            let truth: Vec<f64> = chunk.iter().map(|&i| train[i].age).collect();
            let p64: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
            let loss = mae_global(&p64, &truth)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step: 0, loss });
            }
            let m = chunk.len() as f32;
            let g: Vec<f32> = p64
                .iter()
                .zip(&truth)
                .map(|(p, t)| if p > t { 1.0 / m } else if p < t { -1.0 / m } else { 0.0 })
                .collect();
            model.zero_grad();
            model.backward(&g);
            opt.step(&mut model);
        }
    }
    Ok(model)
}
