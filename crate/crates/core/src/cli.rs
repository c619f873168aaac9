//! Command-line entry point: one binary with a subcommand per workflow stage.
//!
//! Every run writes `run.json` into its output directory before doing any work, recording the
//! resolved configuration, its SHA-256 and the seed; the file is rewritten with `"status": "complete"`
//! when the command finishes. Nothing time- or host-dependent is written, so reruns are byte-identical.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{write_samples, Manifest, Sample};
use crate::error::{Error, Result};
use crate::evalmaps::{
    adjust_pad, compute_pad, evaluate_testset, predict_full_volume, BiasCorrectionModel, BiasCorrectionRegistry,
    PADMap,
};
use crate::interpret::{comparison_panel, OcclusionSpec, SaliencyRegistry, ScalarModel, SmoothGradSpec};
use crate::net::{save_checkpoint, GlobalRegressor, TaskSet, UNet};
use crate::phantom::{generate_cohort_with, PhantomSpec};
use crate::regional::{build_regional_atlas_volume, cohort_regional_report, RegionAtlas};
use crate::stats::{comparison_table, wilcoxon_labeled};
use crate::train::{run_ablation, train_model, train_regressor, RegressorTrainConfig, SplitSpec, TrainConfig};
use crate::volume::{format_for_path, save_volume};

/// Environment variable naming the root under which default output directories are created.
pub const OUT_ROOT_ENV: &str = "BRAINAGE_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "brainage", version, about = "Voxel-level brain-age prediction")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Master seed; all randomness derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: $BRAINAGE_OUT_ROOT/<subcommand>, or runs/<subcommand>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads. 1 is the reproducible default.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// TOML config file. Keys match flag names (underscored); flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom cohort and its manifest.
    PhantomGen(PhantomGenArgs),
    /// Train the multitask model.
    Train(TrainArgs),
    /// Train every task-set variant and report them side by side.
    Ablate(TrainArgs),
    /// Evaluate a checkpoint on a test manifest.
    Eval(EvalArgs),
    /// Write voxelwise PAD maps.
    Padmap(PadmapArgs),
    /// Fit a bias-correction model on calibration predictions.
    BiasFit(BiasFitArgs),
    /// Apply a fitted bias-correction model to predictions.
    BiasApply(BiasApplyArgs),
    /// Aggregate PAD maps over atlas regions.
    Atlas(AtlasArgs),
    /// Saliency maps from a whole-volume regressor.
    Interpret(InterpretArgs),
    /// Paired Wilcoxon tests with Holm correction.
    Stats(StatsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PhantomGen(_) => "phantom-gen",
            Command::Train(_) => "train",
            Command::Ablate(_) => "ablate",
            Command::Eval(_) => "eval",
            Command::Padmap(_) => "padmap",
            Command::BiasFit(_) => "bias-fit",
            Command::BiasApply(_) => "bias-apply",
            Command::Atlas(_) => "atlas",
            Command::Interpret(_) => "interpret",
            Command::Stats(_) => "stats",
        }
    }
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// Cubic grid extent.
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub age_low: Option<f64>,
    #[arg(long)]
    pub age_high: Option<f64>,
    /// nifti1 or raw.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Sample manifest (CSV).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Existing split JSON; otherwise one is drawn from the seed.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Starting configuration when no --config is given: desk or full.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// V, S+V, G+V or S+G+V.
    #[arg(long)]
    pub task_set: Option<String>,
    /// Train on clean labels.
    #[arg(long)]
    pub no_noise: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of test samples.
    #[arg(long)]
    pub testset: PathBuf,
    /// Restrict to the split's test ids.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Fitted bias model (JSON); adds a corrected column.
    #[arg(long)]
    pub bias: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct PadmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub testset: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub bias: Option<PathBuf>,
    /// Also write sample-MAE-adjusted maps.
    #[arg(long)]
    pub adjusted: bool,
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args)]
pub struct BiasFitArgs {
    /// CSV with `age` and `pred` columns.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Predict calibration ages with this model instead (mean voxel age over the mask).
    #[arg(long, requires = "manifest")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Calibrate on the split's validation ids.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// regression or age_bins.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct BiasApplyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with `age` and `pred` columns; other columns are carried through.
    #[arg(long)]
    pub predictions: PathBuf,
}

#[derive(Debug, Args)]
pub struct AtlasArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub testset: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub bias: Option<PathBuf>,
    /// Region label volume; defaults to the phantom atlas.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sample to explain (default: first test id, or first manifest row).
    #[arg(long)]
    pub sample: Option<String>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Trained regressor; otherwise one is trained on the training ids.
    #[arg(long)]
    pub regressor: Option<PathBuf>,
    #[arg(long)]
    pub regressor_epochs: Option<usize>,
    /// Methods to run (repeatable): gradcam, occlusion, smoothgrad.
    #[arg(long = "method")]
    pub methods: Vec<String>,
    #[arg(long)]
    pub occlusion_size: Option<usize>,
    #[arg(long)]
    pub occlusion_stride: Option<usize>,
    #[arg(long)]
    pub smoothgrad_n: Option<usize>,
    #[arg(long)]
    pub smoothgrad_sd: Option<f64>,
    /// U-Net checkpoint; enables the PAD comparison panel.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub axis: Option<usize>,
    #[arg(long)]
    pub slice: Option<usize>,
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// `A.csv:B.csv`, repeatable; all pairs form one Holm family.
    #[arg(long = "pair", required = true)]
    pub pairs: Vec<String>,
    /// Column to compare; rows are matched by `id`.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

/// Config-file values looked up by key.
struct Config(toml::Table);

impl Config {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self(toml::Table::new())),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(Self(text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?))
            }
        }
    }

    /// Flag, then config key, then default.
    fn pick<T: serde::de::DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("config key '{key}': {e}"))),
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    seed: u64,
    workers: usize,
    config_sha256: String,
    config: &'a C,
    status: &'static str,
}

struct Run {
    out: PathBuf,
    seed: u64,
    workers: usize,
    verbose: u8,
    subcommand: &'static str,
}

impl Run {
    fn start<C: Serialize>(&self, config: &C) -> Result<()> {
        self.write_manifest(config, "running")
    }

    fn finish<C: Serialize>(&self, config: &C) -> Result<()> {
        self.write_manifest(config, "complete")
    }

    fn write_manifest<C: Serialize>(&self, config: &C, status: &'static str) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let m = RunManifest {
            tool: "brainage",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            seed: self.seed,
            workers: self.workers,
            config_sha256: config_hash(config),
            config,
            status,
        };
        self.write("run.json", serde_json::to_string_pretty(&m).unwrap() + "\n")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("[{}] {}", self.subcommand, msg.as_ref());
        }
    }
}

/// SHA-256 of the compact JSON form of a resolved configuration.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn default_out(sub: &str) -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(sub)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load(cli.common.config.as_deref())?;
    let sub = cli.command.name();
    if cli.common.workers == 0 {
        return Err(Error::Validation("--workers must be at least 1".into()));
    }
    let run = Run {
        out: cli.common.out.clone().unwrap_or_else(|| default_out(sub)),
        seed: 0,
        workers: cli.common.workers,
        verbose: cli.common.verbose,
        subcommand: sub,
    };
    if run.workers > 1 {
        run.log("computation is single-threaded; --workers above 1 has no effect");
    }
    let seed_flag = cli.common.seed;
    match cli.command {
        Command::PhantomGen(a) => phantom_gen(Run { seed: cfg.pick(seed_flag, "seed", 0)?, ..run }, &cfg, a),
        Command::Train(a) => train(run, cli.common.config.as_deref(), seed_flag, a, false),
        Command::Ablate(a) => train(run, cli.common.config.as_deref(), seed_flag, a, true),
        Command::Eval(a) => eval(Run { seed: cfg.pick(seed_flag, "seed", 0)?, ..run }, &cfg, a),
        Command::Padmap(a) => padmap(Run { seed: cfg.pick(seed_flag, "seed", 0)?, ..run }, &cfg, a),
        Command::BiasFit(a) => bias_fit(Run { seed: cfg.pick(seed_flag, "seed", 0)?, ..run }, &cfg, a),
        Command::BiasApply(a) => bias_apply(Run { seed: cfg.pick(seed_flag, "seed", 0)?, ..run }, a),
        Command::Atlas(a) => atlas(Run { seed: cfg.pick(seed_flag, "seed", 0)?, ..run }, &cfg, a),
        Command::Interpret(a) => interpret(Run { seed: cfg.pick(seed_flag, "seed", 0)?, ..run }, &cfg, a),
        Command::Stats(a) => stats(Run { seed: cfg.pick(seed_flag, "seed", 0)?, ..run }, &cfg, a),
    }
}

#[derive(Serialize)]
struct PhantomGenConfig {
    n: usize,
    dims: usize,
    age_low: f64,
    age_high: f64,
    format: String,
}

fn phantom_gen(run: Run, cfg: &Config, a: PhantomGenArgs) -> Result<()> {
    let c = PhantomGenConfig {
        n: cfg.pick(a.n, "n", 8)?,
        dims: cfg.pick(a.dims, "dims", 64)?,
        age_low: cfg.pick(a.age_low, "age_low", 18.0)?,
        age_high: cfg.pick(a.age_high, "age_high", 88.0)?,
        format: cfg.pick(a.format, "format", "nifti1".to_string())?,
    };
    run.start(&c)?;
    let template = PhantomSpec::scaled([c.dims; 3], 50.0, 0);
    let samples = generate_cohort_with(&template, c.n, c.age_low, c.age_high, run.seed)?;
    let manifest = write_samples(&samples, &run.out, &c.format)?;
    run.log(format!("wrote {} samples, manifest {}", samples.len(), manifest.display()));
    run.finish(&c)
}

fn resolve_split(path: Option<&Path>, ids: &[String], n_train: Option<usize>, n_val: Option<usize>, seed: u64) -> Result<SplitSpec> {
    match path {
        Some(p) => {
            let s = SplitSpec::load(p)?;
            s.validate(ids)?;
            Ok(s)
        }
        None => match (n_train, n_val) {
            (Some(t), Some(v)) => SplitSpec::by_counts(ids, t, v, seed),
            (None, None) => SplitSpec::by_ratio(ids, [0.8, 0.1, 0.1], seed),
            _ => Err(Error::Validation("give both --n-train and --n-val, or neither".into())),
        },
    }
}

fn train(run: Run, config: Option<&Path>, seed_flag: Option<u64>, a: TrainArgs, ablate: bool) -> Result<()> {
    let mut c = match config {
        Some(p) => TrainConfig::load(p)?,
        None => match a.preset.as_str() {
            "desk" => TrainConfig::desk(),
            "full" => TrainConfig::default(),
            other => return Err(Error::Validation(format!("unknown preset '{other}' (desk, full)"))),
        },
    };
    if let Some(s) = seed_flag {
        c.seed = s;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
        if c.schedule.last_epoch() + 1 < e {
            c.schedule = crate::loss::LossWeightSchedule::scaled(e);
        }
    }
    if let Some(b) = a.batch_size {
        c.batch_size = b;
    }
    if let Some(l) = a.lr0 {
        c.lr0 = l;
    }
    if let Some(p) = a.patch_size {
        c.patch_size = [p; 3];
    }
    if let Some(b) = a.base_channels {
        c.net.base_channels = b;
    }
    if let Some(t) = &a.task_set {
        let ts: TaskSet = t.parse()?;
        c = c.for_variant(ts);
    }
    if a.no_noise {
        c.noise.enabled = false;
    }
    c.validate()?;
    let run = Run { seed: c.seed, ..run };
    run.start(&c)?;
    run.write("config.toml", c.to_toml())?;
    let manifest = Manifest::read(&a.manifest)?;
    let ids = manifest.ids();
    let split = resolve_split(a.split.as_deref(), &ids, a.n_train, a.n_val, c.seed)?;
    split.save(run.path("split.json"))?;
    let samples = manifest.load_all()?;
    if ablate {
        let report = run_ablation(&c, &samples, &split, Some(&run.out))?;
        print!("{}", report.to_table());
    } else {
        let outcome = train_model(&c, &samples, &split, Some(&run.out))?;
        run.write("history.json", serde_json::to_string_pretty(&outcome.history).unwrap() + "\n")?;
        run.log(format!(
            "best epoch {} val mae_voxel {:.4}, final {:.4}",
            outcome.best_epoch, outcome.best_val_mae, outcome.final_val_mae
        ));
    }
    run.finish(&c)
}

fn load_testset(testset: &Path, split: Option<&Path>) -> Result<Vec<Sample>> {
    let m = Manifest::read(testset)?;
    let mut samples = m.load_all()?;
    if let Some(p) = split {
        let s = SplitSpec::load(p)?;
        let keep: Vec<Sample> = SplitSpec::select(&s.test, &samples)?.into_iter().cloned().collect();
        samples = keep;
    }
    Ok(samples)
}

fn load_bias(path: Option<&Path>) -> Result<Option<BiasCorrectionModel>> {
    path.map(|p| {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::ingest(p, e.to_string()))
    })
    .transpose()
}

#[derive(Serialize)]
struct EvalConfig {
    checkpoint: PathBuf,
    testset: PathBuf,
    split: Option<PathBuf>,
    bias: Option<PathBuf>,
    label: String,
}

fn eval(run: Run, cfg: &Config, a: EvalArgs) -> Result<()> {
    let (mut model, _) = UNet::load(&a.checkpoint)?;
    let c = EvalConfig {
        label: cfg.pick(a.label, "label", model.config().task_set.label().to_string())?,
        checkpoint: a.checkpoint,
        testset: a.testset,
        split: a.split,
        bias: a.bias,
    };
    run.start(&c)?;
    let samples = load_testset(&c.testset, c.split.as_deref())?;
    let bias = load_bias(c.bias.as_deref())?;
    let report = evaluate_testset(&mut model, &samples, bias.as_ref(), &c.label)?;
    run.write("report.csv", report.to_csv())?;
    run.write("report.txt", report.to_table())?;
    run.write("report.json", serde_json::to_string_pretty(&report).unwrap() + "\n")?;
    print!("{}", report.to_table());
    run.finish(&c)
}

/// PAD map per sample, bias-corrected voxelwise when a model is given.
fn pad_maps(model: &mut UNet, samples: &[Sample], bias: Option<&BiasCorrectionModel>) -> Result<Vec<PADMap>> {
    samples
        .iter()
        .map(|s| {
            let out = predict_full_volume(model, &s.image)?;
            match bias {
                None => compute_pad(&out.voxel_age, s.age, &s.mask),
                Some(b) => {
                    let mut p = compute_pad(&b.apply_volume(&out.voxel_age, s.age)?, s.age, &s.mask)?;
                    p.corrected = true;
                    Ok(p)
                }
            }
        })
        .collect()
}

fn extension(format: &str) -> &'static str {
    if format == "nifti1" {
        "nii.gz"
    } else {
        "raw"
    }
}

#[derive(Serialize)]
struct PadmapConfig {
    checkpoint: PathBuf,
    testset: PathBuf,
    split: Option<PathBuf>,
    bias: Option<PathBuf>,
    adjusted: bool,
    format: String,
}

fn padmap(run: Run, cfg: &Config, a: PadmapArgs) -> Result<()> {
    let c = PadmapConfig {
        adjusted: a.adjusted || cfg.pick(None, "adjusted", false)?,
        format: cfg.pick(a.format, "format", "nifti1".to_string())?,
        checkpoint: a.checkpoint,
        testset: a.testset,
        split: a.split,
        bias: a.bias,
    };
    run.start(&c)?;
    let (mut model, _) = UNet::load(&c.checkpoint)?;
    let samples = load_testset(&c.testset, c.split.as_deref())?;
    let bias = load_bias(c.bias.as_deref())?;
    let pads = pad_maps(&mut model, &samples, bias.as_ref())?;
    let ext = extension(&c.format);
    let mut summary = String::from("id,age,sample_mae,mean_pad\n");
    for (s, p) in samples.iter().zip(&pads) {
        p.save(run.path(&format!("{}_pad.{ext}", s.id)), &c.format)?;
        if c.adjusted {
            adjust_pad(p).save(run.path(&format!("{}_pad_adjusted.{ext}", s.id)), &c.format)?;
        }
        summary.push_str(&format!("{},{},{:.6},{:.6}\n", s.id, s.age, p.sample_mae, p.mask_mean()));
    }
    run.write("padmaps.csv", summary)?;
    run.finish(&c)
}

struct PredRow {
    fields: Vec<String>,
    age: f64,
    pred: f64,
}

fn read_predictions(path: &Path) -> Result<(Vec<String>, Vec<PredRow>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::ingest(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::ingest(path, format!("missing column '{name}'")))
    };
    let (ia, ip) = (col("age")?, col("pred")?);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::ingest(path, e.to_string()))?;
        let num = |i: usize| {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::ingest(path, format!("bad number in row {:?}", rec)))
        };
        rows.push(PredRow {
            age: num(ia)?,
            pred: num(ip)?,
            fields: rec.iter().map(str::to_string).collect(),
        });
    }
    Ok((headers, rows))
}

#[derive(Serialize)]
struct BiasFitConfig {
    predictions: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
    split: Option<PathBuf>,
    mode: String,
}

fn bias_fit(run: Run, cfg: &Config, a: BiasFitArgs) -> Result<()> {
    let c = BiasFitConfig {
        mode: cfg.pick(a.mode, "mode", "regression".to_string())?,
        predictions: a.predictions,
        checkpoint: a.checkpoint,
        manifest: a.manifest,
        split: a.split,
    };
    let registry = BiasCorrectionRegistry::default();
    let strategy = registry.get(&c.mode)?;
    run.start(&c)?;
    let pairs: Vec<(f64, f64)> = match (&c.predictions, &c.checkpoint, &c.manifest) {
        (Some(p), _, _) => read_predictions(p)?.1.iter().map(|r| (r.age, r.pred)).collect(),
        (None, Some(ck), Some(m)) => {
            let (mut model, _) = UNet::load(ck)?;
            let mut samples = Manifest::read(m)?.load_all()?;
            if let Some(sp) = &c.split {
                let s = SplitSpec::load(sp)?;
                samples = SplitSpec::select(&s.val, &samples)?.into_iter().cloned().collect();
            }
            let mut pairs = Vec::with_capacity(samples.len());
            let mut csv = String::from("id,age,pred\n");
            for s in &samples {
                let out = predict_full_volume(&mut model, &s.image)?;
                let pred = compute_pad(&out.voxel_age, s.age, &s.mask)?.mask_mean() + s.age;
                csv.push_str(&format!("{},{},{:.6}\n", s.id, s.age, pred));
                pairs.push((s.age, pred));
            }
            run.write("calibration.csv", csv)?;
            pairs
        }
        _ => return Err(Error::Validation("give --predictions, or --checkpoint with --manifest".into())),
    };
    let model = strategy.fit(&pairs)?;
    run.write("bias.json", serde_json::to_string_pretty(&model).unwrap() + "\n")?;
    run.finish(&c)
}

#[derive(Serialize)]
struct BiasApplyConfig {
    model: PathBuf,
    predictions: PathBuf,
}

fn bias_apply(run: Run, a: BiasApplyArgs) -> Result<()> {
    let c = BiasApplyConfig {
        model: a.model,
        predictions: a.predictions,
    };
    let model = load_bias(Some(&c.model))?.expect("path given");
    run.start(&c)?;
    let (headers, rows) = read_predictions(&c.predictions)?;
    let mut out = headers.join(",") + ",corrected,corrected_pad\n";
    for r in rows {
        let corrected = model.apply(r.pred, r.age)?;
        out.push_str(&format!("{},{:.6},{:.6}\n", r.fields.join(","), corrected, corrected - r.age));
    }
    run.write("corrected.csv", out)?;
    run.finish(&c)
}

#[derive(Serialize)]
struct AtlasConfig {
    checkpoint: PathBuf,
    testset: PathBuf,
    split: Option<PathBuf>,
    bias: Option<PathBuf>,
    atlas: Option<PathBuf>,
    format: String,
}

fn atlas(run: Run, cfg: &Config, a: AtlasArgs) -> Result<()> {
    let c = AtlasConfig {
        format: cfg.pick(a.format, "format", "nifti1".to_string())?,
        checkpoint: a.checkpoint,
        testset: a.testset,
        split: a.split,
        bias: a.bias,
        atlas: a.atlas,
    };
    run.start(&c)?;
    let (mut model, _) = UNet::load(&c.checkpoint)?;
    let samples = load_testset(&c.testset, c.split.as_deref())?;
    let bias = load_bias(c.bias.as_deref())?;
    let pads = pad_maps(&mut model, &samples, bias.as_ref())?;
    let atlas = match &c.atlas {
        Some(p) => RegionAtlas::load(p, format_for_path(p)?)?,
        None => RegionAtlas::phantom(samples[0].dims())?,
    };
    let report = cohort_regional_report(&pads, &atlas)?;
    run.write("regional.csv", report.to_csv())?;
    run.write("regional.txt", report.to_table())?;
    let ext = extension(&c.format);
    if c.atlas.is_none() {
        atlas.save(run.path(&format!("atlas_labels.{ext}")), &c.format)?;
    }
    if report.rows.len() == atlas.regions().len() {
        let vol = build_regional_atlas_volume(&report, &atlas)?;
        save_volume(&vol, run.path(&format!("regional_atlas.{ext}")), &c.format)?;
    } else {
        run.log("some regions had no brain voxels; atlas volume not written");
    }
    print!("{}", report.to_table());
    run.finish(&c)
}

#[derive(Serialize)]
struct InterpretConfig {
    manifest: PathBuf,
    sample: String,
    split: Option<PathBuf>,
    regressor: Option<PathBuf>,
    regressor_epochs: usize,
    methods: Vec<String>,
    occlusion: OcclusionSpec,
    smoothgrad: SmoothGradSpec,
    checkpoint: Option<PathBuf>,
    axis: usize,
    slice: Option<usize>,
    format: String,
}

fn interpret(run: Run, cfg: &Config, a: InterpretArgs) -> Result<()> {
    let manifest = Manifest::read(&a.manifest)?;
    let samples = manifest.load_all()?;
    let split = a.split.as_deref().map(SplitSpec::load).transpose()?;
    let default_sample = split
        .as_ref()
        .and_then(|s| s.test.first().cloned())
        .unwrap_or_else(|| samples[0].id.clone());
    let methods = if a.methods.is_empty() {
        cfg.pick(None, "method", vec!["gradcam".to_string(), "occlusion".into(), "smoothgrad".into()])?
    } else {
        a.methods
    };
    let occ_default = OcclusionSpec::default();
    let sg_default = SmoothGradSpec::default();
    let c = InterpretConfig {
        sample: cfg.pick(a.sample, "sample", default_sample)?,
        regressor_epochs: cfg.pick(a.regressor_epochs, "regressor_epochs", RegressorTrainConfig::default().epochs)?,
        occlusion: OcclusionSpec {
            size: [cfg.pick(a.occlusion_size, "occlusion_size", occ_default.size[0])?; 3],
            stride: [cfg.pick(a.occlusion_stride, "occlusion_stride", occ_default.stride[0])?; 3],
            ..occ_default
        },
        smoothgrad: SmoothGradSpec {
            n_samples: cfg.pick(a.smoothgrad_n, "smoothgrad_n", sg_default.n_samples)?,
            noise_sd: cfg.pick(a.smoothgrad_sd, "smoothgrad_sd", sg_default.noise_sd)?,
            seed: run.seed,
        },
        axis: cfg.pick(a.axis, "axis", 2)?,
        slice: cfg.pick(a.slice.map(Some), "slice", None)?,
        format: cfg.pick(a.format, "format", "nifti1".to_string())?,
        manifest: a.manifest,
        split: a.split,
        regressor: a.regressor,
        methods,
        checkpoint: a.checkpoint,
    };
    let registry = SaliencyRegistry::with(c.occlusion, c.smoothgrad);
    for m in &c.methods {
        registry.get(m)?;
    }
    run.start(&c)?;
    let target = samples
        .iter()
        .find(|s| s.id == c.sample)
        .ok_or_else(|| Error::Validation(format!("sample '{}' is not in the manifest", c.sample)))?;
    let mut regressor = match &c.regressor {
        Some(p) => GlobalRegressor::load(p)?.0,
        None => {
            let train: Vec<&Sample> = match &split {
                Some(s) => SplitSpec::select(&s.train, &samples)?,
                None => samples.iter().filter(|s| s.id != c.sample).collect(),
            };
            let rc = RegressorTrainConfig {
                epochs: c.regressor_epochs,
                seed: run.seed,
                ..RegressorTrainConfig::default()
            };
            let mut m = train_regressor(&rc, &train)?;
            save_checkpoint(run.path("regressor.ckpt"), &mut m, rc.epochs)?;
            m
        }
    };
    let pred = regressor.predict(&target.image)?;
    run.log(format!("sample {} age {} regressor prediction {pred:.3}", target.id, target.age));
    let ext = extension(&c.format);
    let mut maps = Vec::new();
    for m in &c.methods {
        let map = registry.get(m)?.run(&mut regressor, &target.image, &target.id)?;
        map.save(run.path(&format!("{}_{m}.{ext}", target.id)), &c.format)?;
        maps.push(map.unit_range());
    }
    if let Some(ck) = &c.checkpoint {
        let (mut model, _) = UNet::load(ck)?;
        let pad = pad_maps(&mut model, std::slice::from_ref(target), None)?.remove(0);
        let atlas = RegionAtlas::phantom(target.dims())?;
        let report = cohort_regional_report(std::slice::from_ref(&pad), &atlas)?;
        let regional = build_regional_atlas_volume(&report, &atlas)?;
        let index = c.slice.unwrap_or(target.dims()[c.axis.min(2)] / 2);
        comparison_panel(&pad, &regional, &maps, c.axis, index, run.path("panel"))?;
    }
    run.finish(&c)
}

#[derive(Serialize)]
struct StatsConfig {
    pairs: Vec<String>,
    metric: String,
    alpha: f64,
}

fn read_metric(path: &Path, metric: &str) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::ingest(path, e.to_string()))?.clone();
    let find = |n: &str| {
        headers
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| Error::ingest(path, format!("missing column '{n}'")))
    };
    let (ii, im) = (find("id")?, find(metric)?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::ingest(path, e.to_string()))?;
        let v: f64 = rec[im]
            .trim()
            .parse()
            .map_err(|_| Error::ingest(path, format!("bad {metric} value '{}'", &rec[im])))?;
        out.push((rec[ii].to_string(), v));
    }
    Ok(out)
}

/// Run directory names label the two sides; files sharing a directory fall back to their file stems.
fn pair_labels(a: &Path, b: &Path) -> (String, String) {
    let dir = |p: &Path| p.parent().and_then(|d| d.file_name()).map(|d| d.to_string_lossy().into_owned());
    let file = |p: &Path| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
    match (dir(a), dir(b)) {
        (Some(x), Some(y)) if x != y => (x, y),
        _ => (file(a), file(b)),
    }
}

fn stats(run: Run, cfg: &Config, a: StatsArgs) -> Result<()> {
    let c = StatsConfig {
        metric: cfg.pick(a.metric, "metric", "mae_voxel".to_string())?,
        alpha: cfg.pick(a.alpha, "alpha", 0.05)?,
        pairs: a.pairs,
    };
    run.start(&c)?;
    let mut cmps = Vec::new();
    for pair in &c.pairs {
        let (pa, pb) = pair
            .split_once(':')
            .ok_or_else(|| Error::Validation(format!("pair '{pair}' must look like A.csv:B.csv")))?;
        let (pa, pb) = (Path::new(pa), Path::new(pb));
        let ra = read_metric(pa, &c.metric)?;
        let rb: std::collections::BTreeMap<String, f64> = read_metric(pb, &c.metric)?.into_iter().collect();
        let mut va = Vec::new();
        let mut vb = Vec::new();
        for (id, v) in &ra {
            let w = rb
                .get(id)
                .ok_or_else(|| Error::Validation(format!("id '{id}' missing from {}", pb.display())))?;
            va.push(*v);
            vb.push(*w);
        }
        if va.len() != rb.len() {
            return Err(Error::Validation(format!("{} and {} list different ids", pa.display(), pb.display())));
        }
        let (la, lb) = pair_labels(pa, pb);
        cmps.push(wilcoxon_labeled(&va, &vb, (&la, &lb))?);
    }
    let table = comparison_table(&cmps, c.alpha)?;
    run.write("stats.csv", &table)?;
    print!("{table}");
    run.finish(&c)
}
