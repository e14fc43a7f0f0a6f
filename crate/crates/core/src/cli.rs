//! Command-line driver: `gen-shapes`, `pretrain`, `train`, `eval`, `sweep`
//! and `inspect`. Every run directory gets the resolved config, per-epoch
//! metrics, its artifacts and a `manifest.json` of SHA-256 hashes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shotlab_tensor::Scalar;

use crate::config::{PredictorKind, RunConfig};
use crate::datasets::{generate_shapes, load_image_folder, split_classes, write_image_folder, LabeledImageSet, ShapesSpec};
use crate::encoders::{build_encoder, Encoder, EncoderKind};
use crate::error::{Error, Result};
use crate::evaluation::{context_sweep, evaluate, IclPredictor, KnnPredictor, Predictor};
use crate::icl::{IclModel, Precision};
use crate::pretraining::{pretrain_encoder, TripletParams};
use crate::training::{
    format_regime, load_checkpoint, load_encoder, save_encoder, train_icl, CheckpointMeta, CheckpointPlan,
    EncoderFamily, EncoderMode, RegimeConfig, ScheduleParams,
};

/// Default output root when `--out` is absent.
pub const OUT_ENV: &str = "SHOTLAB_OUT";

#[derive(Parser, Debug)]
#[command(name = "shotlab", version, about = "Few-shot image classification by in-context learning")]
pub struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Record wall-clock times and creation timestamps.
    #[arg(long, global = true)]
    pub stamp: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic shapes corpus as an image folder.
    GenShapes(GenShapesArgs),
    /// Pretrain an encoder with a classification (and optional triplet) loss.
    Pretrain(PretrainArgs),
    /// Train the in-context model on episodes.
    Train(TrainArgs),
    /// Evaluate a checkpoint on n-way k-shot tasks.
    Eval(EvalArgs),
    /// Evaluate over a range of shot counts.
    Sweep(SweepArgs),
    /// Verify a run directory's manifest or describe a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenShapesArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Image folder: one subdirectory per class.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub holdout_classes: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EncoderChoice {
    Res,
    Vit,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderChoice>,
    /// Add the triplet term with default margin, weight and mining.
    #[arg(long)]
    pub triplet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RegimeChoice {
    Frozen,
    Delayed,
    Joint,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeChoice>,
    #[arg(long)]
    pub unfreeze_epoch: Option<usize>,
    /// Pretrained encoder checkpoint; without it the encoder starts random.
    #[arg(long)]
    pub encoder_ckpt: Option<PathBuf>,
    /// Epoch count; the schedule's decay phase is refit to end on the last epoch.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub accumulation_steps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum ClassSubset {
    #[default]
    All,
    Train,
    Holdout,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint: an in-context model, or an encoder for `--predictor knn`.
    #[arg(long)]
    pub model: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long, value_enum)]
    pub predictor: Option<PredictorKind>,
    /// Which classes of the data to draw tasks from.
    #[arg(long, value_enum, default_value_t = ClassSubset::All)]
    pub classes: ClassSubset,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated shot counts, e.g. `1,2,5,10`.
    #[arg(long, value_delimiter = ',')]
    pub k_values: Option<Vec<usize>>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long, value_enum)]
    pub predictor: Option<PredictorKind>,
    #[arg(long, value_enum, default_value_t = ClassSubset::All)]
    pub classes: ClassSubset,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Run directory or checkpoint file.
    pub path: PathBuf,
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // A second call in one process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx { stamp: cli.stamp };
    match cli.command {
        Command::GenShapes(a) => gen_shapes(&ctx, a),
        Command::Pretrain(a) => {
            apply_data(&mut cfg, &a.data);
            pretrain(&ctx, cfg, a)
        }
        Command::Train(a) => {
            apply_data(&mut cfg, &a.data);
            train(&ctx, cfg, a)
        }
        Command::Eval(a) => {
            apply_data(&mut cfg, &a.data);
            eval(&ctx, cfg, a)
        }
        Command::Sweep(a) => {
            apply_data(&mut cfg, &a.data);
            sweep(&ctx, cfg, a)
        }
        Command::Inspect(a) => inspect(&a.path),
    }
}

struct Ctx {
    stamp: bool,
}

impl Ctx {
    fn created_at(&self) -> Option<String> {
        self.stamp
            .then(|| humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string())
    }
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.data {
        cfg.data.path = Some(p.clone());
    }
    if let Some(s) = a.image_size {
        cfg.data.image_size = s;
    }
    if let Some(h) = a.holdout_classes {
        cfg.data.holdout_classes = h;
    }
}

fn out_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command)
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Path {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_data(cfg: &RunConfig) -> Result<LabeledImageSet> {
    let path = cfg
        .data
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("no data path: pass --data or set data.path".into()))?;
    load_image_folder(path, (cfg.data.image_size, cfg.data.image_size))
}

/// `(train, holdout)` classes; with no holdout both are the full set.
fn split(cfg: &RunConfig, set: &LabeledImageSet) -> Result<(LabeledImageSet, Option<LabeledImageSet>)> {
    if cfg.data.holdout_classes == 0 {
        return Ok((set.clone(), None));
    }
    let (train, val) = split_classes(set, cfg.data.holdout_classes, cfg.data.split_seed)?;
    Ok((train, Some(val)))
}

fn subset(cfg: &RunConfig, set: LabeledImageSet, which: ClassSubset) -> Result<LabeledImageSet> {
    match which {
        ClassSubset::All => Ok(set),
        ClassSubset::Train => Ok(split(cfg, &set)?.0),
        ClassSubset::Holdout => split(cfg, &set)?
            .1
            .ok_or_else(|| Error::Config("--classes holdout needs data.holdout_classes > 0".into())),
    }
}

fn write_json_line<T: Serialize>(w: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Relative path (with `/` separators) to SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST: &str = "manifest.json";

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.strip_prefix(root).map_or(true, |r| r != Path::new(MANIFEST)) {
            out.push(path);
        }
    }
    Ok(())
}

fn relative_key(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Hashes every file under `dir` into `dir/manifest.json`.
pub fn write_manifest(dir: &Path, command: &str) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect_files(dir, dir, &mut paths)?;
    let files = paths
        .iter()
        .map(|p| Ok((relative_key(dir, p), sha256_file(p)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let manifest = Manifest { command: command.to_string(), files };
    write_pretty(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Rechecks every hash listed in `dir/manifest.json`.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Path { path: path.clone(), reason: e.to_string() })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    for (rel, want) in &manifest.files {
        let file = dir.join(rel);
        let got = sha256_file(&file).map_err(|_| Error::Integrity(format!("{rel} is missing or unreadable")))?;
        if &got != want {
            return Err(Error::Integrity(format!("{rel} does not match its recorded hash")));
        }
    }
    Ok(manifest)
}

fn gen_shapes(_: &Ctx, a: GenShapesArgs) -> Result<()> {
    let dir = out_dir(a.out, "shapes");
    let spec = ShapesSpec::new(a.classes, a.per_class, a.size);
    let set = generate_shapes(&spec, a.seed)?;
    create_dir(&dir)?;
    write_image_folder(&set, &dir)?;
    write_pretty(&dir.join("shapes.json"), &serde_json::json!({ "spec": spec, "seed": a.seed }))?;
    write_manifest(&dir, "gen-shapes")?;
    println!("wrote {} images in {} classes to {}", set.len(), set.num_classes(), dir.display());
    Ok(())
}

fn pretrain(_: &Ctx, mut cfg: RunConfig, a: PretrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    match a.encoder {
        Some(EncoderChoice::Res) => cfg.encoder.kind = EncoderKind::ResidualCnn,
        Some(EncoderChoice::Vit) => cfg.encoder.kind = EncoderKind::Vit,
        None => {}
    }
    if a.triplet && cfg.pretrain.triplet.is_none() {
        cfg.pretrain.triplet = Some(TripletParams::default());
    }
    cfg.resolve();
    cfg.validate()?;
    let dir = out_dir(a.out, "pretrain");
    let set = load_data(&cfg)?;
    let (train, _) = split(&cfg, &set)?;
    create_dir(&dir)?;
    write_config(&dir, &cfg)?;
    match cfg.model.precision {
        Precision::Single => pretrain_typed::<f32>(&cfg, &train, &dir),
        Precision::Double => pretrain_typed::<f64>(&cfg, &train, &dir),
    }
}

fn pretrain_typed<T: Scalar>(cfg: &RunConfig, train: &LabeledImageSet, dir: &Path) -> Result<()> {
    let encoder = build_encoder::<T>(&cfg.encoder, cfg.seed)?;
    let mut metrics = fs::File::create(dir.join("metrics.jsonl"))?;
    let mut write_err = None;
    let (encoder, history) = pretrain_encoder(train, encoder, &cfg.pretrain, |m| {
        if let Err(e) = write_json_line(&mut metrics, m) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let meta = CheckpointMeta {
        init_seed: Some(cfg.seed),
        pretrain_objective: Some(if cfg.pretrain.triplet.is_some() { "ce+triplet" } else { "ce" }.into()),
        epoch: cfg.pretrain.epochs,
        val_acc: history.last().map(|m| m.val_top1),
        ..CheckpointMeta::encoder(&encoder.config)
    };
    save_encoder(&dir.join("encoder.ckpt"), &encoder, meta)?;
    write_manifest(dir, "pretrain")?;
    if let Some(m) = history.last() {
        println!("pretrained {} epochs, held-out item top-1 {:.4}", m.epoch, m.val_top1);
    }
    Ok(())
}

fn train(ctx: &Ctx, mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let t = &mut cfg.train;
    if let Some(e) = a.epochs {
        t.epochs = e;
        let s = &t.schedule;
        t.schedule = ScheduleParams::spanning(s.lr_max, s.lr_min, s.warmup_epochs, s.plateau_epochs, e);
    }
    if let Some(lr) = a.lr_max {
        t.schedule.lr_max = lr;
    }
    for (dst, src) in [
        (&mut t.samples_per_epoch, a.samples_per_epoch),
        (&mut t.batch_size, a.batch_size),
        (&mut t.accumulation_steps, a.accumulation_steps),
        (&mut t.n, a.n),
        (&mut t.k, a.k),
    ] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    if a.no_augment {
        t.augment_episodes = false;
    }
    if let Some(r) = a.regime {
        t.regime.encoder_mode = match r {
            RegimeChoice::Frozen => EncoderMode::Frozen,
            RegimeChoice::Delayed => EncoderMode::Delayed,
            RegimeChoice::Joint => EncoderMode::Joint,
        };
    }
    if let Some(u) = a.unfreeze_epoch {
        t.regime.unfreeze_epoch = Some(u);
    }
    t.regime.encoder_pretrained = a.encoder_ckpt.is_some();
    if let Some(p) = &a.encoder_ckpt {
        let meta = read_meta(p)?;
        cfg.encoder = meta.encoder_config;
        cfg.encoder.pretrained_source = Some(p.display().to_string());
        cfg.data.image_size = cfg.encoder.input_size.0;
    }
    cfg.resolve();
    cfg.validate()?;
    if !cfg.train.regime.encoder_pretrained && cfg.train.regime.encoder_mode == EncoderMode::Frozen {
        log::warn!("training against a frozen randomly initialised encoder");
    }
    let dir = out_dir(a.out, "train");
    let set = load_data(&cfg)?;
    let (train, val) = split(&cfg, &set)?;
    create_dir(&dir)?;
    cfg.train.record_wall_time = ctx.stamp;
    write_config(&dir, &cfg)?;
    match cfg.model.precision {
        Precision::Single => train_typed::<f32>(&cfg, a.encoder_ckpt.as_deref(), &train, val.as_ref(), &dir),
        Precision::Double => train_typed::<f64>(&cfg, a.encoder_ckpt.as_deref(), &train, val.as_ref(), &dir),
    }
}

fn encoder_family(cfg: &RunConfig) -> EncoderFamily {
    match (cfg.encoder.kind, cfg.pretrain.triplet.is_some()) {
        (EncoderKind::ResidualCnn, _) => EncoderFamily::Res,
        (EncoderKind::Vit, false) => EncoderFamily::Vit,
        (EncoderKind::Vit, true) => EncoderFamily::VitTrip,
    }
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    encoder_ckpt: Option<&Path>,
    train: &LabeledImageSet,
    val: Option<&LabeledImageSet>,
    dir: &Path,
) -> Result<()> {
    let encoder: Encoder<T> = match encoder_ckpt {
        Some(p) => load_encoder(p)?.0,
        None => build_encoder(&cfg.encoder, cfg.seed)?,
    };
    let model = IclModel::<T>::new(&cfg.model, cfg.seed)?;
    let regime: &RegimeConfig = &cfg.train.regime;
    let plan = CheckpointPlan {
        dir,
        regime_code: format_regime(encoder_family(cfg), regime.encoder_pretrained, regime),
    };
    let mut metrics = fs::File::create(dir.join("metrics.jsonl"))?;
    let mut write_err = None;
    let outcome = train_icl(model, encoder, train, val, &cfg.train, Some(&plan), |v| {
        if let Err(e) = write_json_line(&mut metrics, v.metrics) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    write_manifest(dir, "train")?;
    let last = outcome.history.last().map_or(f64::NAN, |m| m.train_loss);
    match outcome.best {
        Some((epoch, acc)) => println!("{}: final loss {last:.4}, best held-out accuracy {acc:.4} at epoch {epoch}", plan.regime_code),
        None => println!("{}: final loss {last:.4}", plan.regime_code),
    }
    Ok(())
}

/// Loaded checkpoint, at whichever precision it is evaluated.
enum Loaded<T: Scalar> {
    Icl(IclModel<T>, Encoder<T>),
    Encoder(Encoder<T>),
}

fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    if !path.exists() {
        return Err(Error::Path { path: path.to_path_buf(), reason: "no such file".into() });
    }
    let text = fs::read_to_string(crate::training::sidecar_path(path))
        .map_err(|e| Error::Checkpoint(format!("{}: cannot read sidecar: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn load_any<T: Scalar>(path: &Path) -> Result<(Loaded<T>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    if meta.kind == "icl" {
        let (m, e, meta) = load_checkpoint(path)?;
        Ok((Loaded::Icl(m, e), meta))
    } else {
        let (e, meta) = load_encoder(path)?;
        Ok((Loaded::Encoder(e), meta))
    }
}

fn predictor_for<'a, T: Scalar>(
    loaded: &'a Loaded<T>,
    kind: PredictorKind,
    neighbors: usize,
) -> Result<Box<dyn Predictor + 'a>> {
    match (loaded, kind) {
        (Loaded::Icl(model, encoder), PredictorKind::Icl) => Ok(Box::new(IclPredictor { model, encoder })),
        (Loaded::Icl(_, encoder) | Loaded::Encoder(encoder), PredictorKind::Knn) => {
            Ok(Box::new(KnnPredictor { encoder, k_neighbors: neighbors }))
        }
        (Loaded::Encoder(_), PredictorKind::Icl) => Err(Error::Config(
            "an encoder-only checkpoint supports only --predictor knn".into(),
        )),
    }
}

fn eval_setup(cfg: &mut RunConfig, model: &Path) -> Result<CheckpointMeta> {
    let meta = read_meta(model)?;
    cfg.data.image_size = meta.encoder_config.input_size.0;
    cfg.encoder = meta.encoder_config.clone();
    if let Some(m) = &meta.icl_config {
        cfg.model = m.clone();
        cfg.train.n_max = m.n_max;
    } else {
        cfg.model.embed_dim = cfg.encoder.embed_dim;
    }
    Ok(meta)
}

fn eval(ctx: &Ctx, mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for (dst, src) in [(&mut cfg.eval.n, a.n), (&mut cfg.eval.k, a.k), (&mut cfg.eval.tasks, a.tasks)] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    if let Some(p) = a.predictor {
        cfg.eval.predictor = p;
    }
    let meta = eval_setup(&mut cfg, &a.model)?;
    cfg.resolve();
    cfg.validate()?;
    let set = subset(&cfg, load_data(&cfg)?, a.classes)?;
    let mut report = match cfg.model.precision {
        Precision::Single => eval_typed::<f32>(&cfg, &a.model, &set)?,
        Precision::Double => eval_typed::<f64>(&cfg, &a.model, &set)?,
    };
    report.dataset = dataset_id(&cfg);
    report.model_id = meta.content_sha256.clone();
    report.created_at = ctx.created_at();
    let out = a.out.unwrap_or_else(|| out_dir(None, "eval").join("report.json"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_pretty(&out, &report)?;
    println!("{}-way {}-shot over {} tasks: {}", report.n, report.k, report.tasks, report.formatted());
    Ok(())
}

fn dataset_id(cfg: &RunConfig) -> String {
    cfg.data.path.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

fn eval_typed<T: Scalar>(
    cfg: &RunConfig,
    model: &Path,
    set: &LabeledImageSet,
) -> Result<crate::evaluation::AccuracyReport> {
    let (loaded, _) = load_any::<T>(model)?;
    let predictor = predictor_for(&loaded, cfg.eval.predictor, cfg.eval.knn_neighbors)?;
    let e = &cfg.eval;
    evaluate(predictor.as_ref(), set, e.n, e.k, e.tasks, cfg.model.n_max, cfg.seed)
}

fn sweep(_: &Ctx, mut cfg: RunConfig, a: SweepArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n {
        cfg.eval.n = n;
    }
    if let Some(t) = a.tasks {
        cfg.eval.tasks = t;
    }
    if let Some(k) = a.k_values {
        cfg.eval.k_values = k;
    }
    if let Some(p) = a.predictor {
        cfg.eval.predictor = p;
    }
    eval_setup(&mut cfg, &a.model)?;
    cfg.resolve();
    cfg.validate()?;
    let set = subset(&cfg, load_data(&cfg)?, a.classes)?;
    let table = match cfg.model.precision {
        Precision::Single => sweep_typed::<f32>(&cfg, &a.model, &set)?,
        Precision::Double => sweep_typed::<f64>(&cfg, &a.model, &set)?,
    };
    let dir = out_dir(a.out, "sweep");
    create_dir(&dir)?;
    write_config(&dir, &cfg)?;
    fs::write(dir.join("sweep.csv"), table.to_csv())?;
    fs::write(dir.join("sweep.svg"), table.to_svg())?;
    write_manifest(&dir, "sweep")?;
    for r in &table.rows {
        println!("k={:>2}  {}", r.k, crate::evaluation::format_percent(r.mean_acc, r.std_err));
    }
    Ok(())
}

fn sweep_typed<T: Scalar>(
    cfg: &RunConfig,
    model: &Path,
    set: &LabeledImageSet,
) -> Result<crate::evaluation::SweepTable> {
    let (loaded, _) = load_any::<T>(model)?;
    let predictor = predictor_for(&loaded, cfg.eval.predictor, cfg.eval.knn_neighbors)?;
    let e = &cfg.eval;
    context_sweep(predictor.as_ref(), set, e.n, &e.k_values, e.tasks, cfg.model.n_max, cfg.seed)
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        let m = verify_manifest(path)?;
        println!("{}: {} files verified ({} run)", path.display(), m.files.len(), m.command);
        return Ok(());
    }
    let (loaded, meta) = load_any::<f64>(path)?;
    let (kind, scalars) = match &loaded {
        Loaded::Icl(m, e) => ("icl", m.params.num_scalars() + e.params.num_scalars()),
        Loaded::Encoder(e) => ("encoder", e.params.num_scalars()),
    };
    println!("{}: {kind} checkpoint, {scalars} parameters, integrity verified", path.display());
    println!("{}", serde_json::to_string_pretty(&meta)?);
    Ok(())
}
