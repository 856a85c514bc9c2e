//! Command-line front end.
//!
//! Every subcommand writes its primary outputs atomically and then a run
//! manifest (`<out-dir>/<subcommand>.run.json`) recording the parsed
//! configuration, seed, versions and wall time. Relative output paths are
//! resolved against `--out-dir`; input paths are used as given.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::datagen::{self, CameraSetup, ClipConfig, EmotionPrototypeSet, SampleConfig};
use crate::dataset::{self, csv_row, fmt_num, Clip, Dataset, Frame, Protocol};
use crate::error::{Error, Result};
use crate::eval::{self, ClipFeature, ExpressionStrategy, GroundTruthStrategy, LandmarkFitStrategy, RegressorStrategy};
use crate::fitter::{batch_fit, FitItem, FitterConfig};
use crate::model::{self, ExpressionCoeffs, MorphableModel, ShapeCoeffs};
use crate::projection::projection_matrix;
use crate::regressor::checkpoint::{load_checkpoint, save_checkpoint};
use crate::regressor::preprocess::{prepare_rasters, DatasetMean};
use crate::regressor::train::{predict_dataset, train, TrainConfig};
use crate::regressor::{Architecture, RegressorNet};
use crate::seed::derive_seed;
use crate::timing::timing_report;
use crate::{fsutil, obj};

#[derive(Debug, Parser, Serialize)]
#[command(name = "expr3d", version, about = "3D morphable-model expression estimation toolkit")]
pub struct Cli {
    /// Base seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for batch work (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Log filter (error, warn, info, debug, trace). EXPR3D_LOG overrides it.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Create or inspect morphable models.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Generate synthetic datasets.
    #[command(subcommand)]
    Gen(GenCmd),
    /// Label frames by landmark fitting (coefficients only).
    Label(LabelArgs),
    /// Fit expressions to landmarks with per-frame diagnostics and timing.
    Fit(FitArgs),
    /// Train the direct regressor.
    Train(TrainArgs),
    /// Run the regressor on a dataset.
    Predict(PredictArgs),
    /// Leave-one-clip-out kNN emotion classification.
    Eval(EvalArgs),
    /// Emotion accuracy as images are downscaled.
    Sweep(SweepArgs),
    /// Write a face as a Wavefront OBJ mesh.
    Export(ExportArgs),
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelCmd {
    /// Seeded synthetic model.
    Synth(SynthArgs),
    /// Print a model's dimensions as JSON.
    Info(InfoArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub s: usize,
    #[arg(long, default_value_t = 29)]
    pub m: usize,
    #[arg(long, default_value_t = 68)]
    pub landmarks: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the JSON mirror instead of the binary format.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct InfoArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CameraArgs {
    #[arg(long, default_value_t = CameraSetup::default().image_size)]
    pub image_size: usize,
    #[arg(long, default_value_t = CameraSetup::default().focal)]
    pub focal: f64,
}

impl CameraArgs {
    fn setup(&self) -> CameraSetup {
        CameraSetup { image_size: self.image_size, focal: self.focal }
    }
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GenCmd {
    /// Unlabeled frames grouped by subject, for label generation and training.
    Frames(GenFramesArgs),
    /// Emotion-labeled clips.
    Clips(GenClipsArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenFramesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    #[arg(long, default_value_t = 10)]
    pub frames_per_subject: usize,
    /// Landmark noise, pixels.
    #[arg(long, default_value_t = 0.0)]
    pub landmark_noise: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha_noise: f64,
    #[command(flatten)]
    pub camera: CameraArgs,
    /// Manifest path; frame files go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolArg {
    PeakFrame,
    AllFrames,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Protocol {
        match p {
            ProtocolArg::PeakFrame => Protocol::PeakFrame,
            ProtocolArg::AllFrames => Protocol::AllFrames,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenClipsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub clips_per_class: usize,
    #[arg(long, default_value_t = 5)]
    pub frames_per_clip: usize,
    /// Per-clip spread around the class anchor, whitened units.
    #[arg(long, default_value_t = datagen::DEFAULT_SIGMA_CLASS)]
    pub sigma_class: f64,
    #[arg(long, default_value_t = 0.1)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0.0)]
    pub landmark_noise: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha_noise: f64,
    #[arg(long, value_enum, default_value_t = ProtocolArg::AllFrames)]
    pub protocol: ProtocolArg,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitterArgs {
    #[arg(long, default_value_t = FitterConfig::default().max_iters)]
    pub max_iters: usize,
    #[arg(long, default_value_t = FitterConfig::default().damping)]
    pub damping: f64,
    #[arg(long, default_value_t = FitterConfig::default().box_factor)]
    pub box_factor: f64,
}

impl FitterArgs {
    fn config(&self) -> FitterConfig {
        FitterConfig { max_iters: self.max_iters, damping: self.damping, box_factor: self.box_factor, ..Default::default() }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LabelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub fitter: FitterArgs,
    /// Labels CSV: frame_id, eta_0..eta_{m-1}.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub fitter: FitterArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Timing summary JSON (seconds per image).
    #[arg(long, default_value = "fit_timing.json")]
    pub timing: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Labels CSV from `label`; ground truth from the manifest when absent.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Checkpoint path; the input mean is written to `<out>.mean.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "history.csv")]
    pub history: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    pub momentum: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().plateau_patience)]
    pub patience: usize,
    /// Fraction of frames held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = crate::regressor::DEFAULT_INPUT_SIDE)]
    pub input_side: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional timing CSV.
    #[arg(long)]
    pub timing: Option<PathBuf>,
    /// Also time landmark fitting on the same frames with this model.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Per-frame coefficients CSV (frame_id first); ground truth when absent.
    #[arg(long)]
    pub etas: Option<PathBuf>,
    #[arg(long, default_value_t = eval::DEFAULT_K)]
    pub k: usize,
    /// Output prefix: writes `<out>_counts.csv`, `<out>_rates.csv`, `<out>.json`.
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Regressor checkpoint; the regressor column is skipped without it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_SCALES.to_vec())]
    pub scales: Vec<f64>,
    /// Detector noise at full resolution, pixels.
    #[arg(long, default_value_t = eval::DEFAULT_SIGMA0)]
    pub sigma0: f64,
    #[arg(long, default_value_t = eval::DEFAULT_K)]
    pub k: usize,
    #[command(flatten)]
    pub fitter: FitterArgs,
    /// Output prefix: writes `<out>.csv`, `<out>.svg`, `<out>.json`.
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Shape coefficients CSV; zero when absent.
    #[arg(long)]
    pub alpha: Option<PathBuf>,
    /// Expression coefficients CSV; zero when absent.
    #[arg(long)]
    pub eta: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Model(ModelCmd::Synth(_)) => "model-synth",
            Command::Model(ModelCmd::Info(_)) => "model-info",
            Command::Gen(GenCmd::Frames(_)) => "gen-frames",
            Command::Gen(GenCmd::Clips(_)) => "gen-clips",
            Command::Label(_) => "label",
            Command::Fit(_) => "fit",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Export(_) => "export",
        }
    }
}

/// Parses `argv` (program name first), executes, and returns the exit code:
/// 0 on success, 1 for usage and validation errors, 2 for runtime and data
/// errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    init_logging(&cli.log_level);

    let start = Instant::now();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 2;
        }
    };
    let ctx = Context { seed: cli.seed, out_dir: cli.out_dir.clone() };
    let result = pool.install(|| execute(&cli.command, &ctx)).and_then(|outputs| {
        write_run_manifest(&cli, &argv, &ctx, &outputs, start.elapsed().as_secs_f64())
    });
    match result {
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

fn init_logging(level: &str) {
    let filter = std::env::var("EXPR3D_LOG").unwrap_or_else(|_| level.to_string());
    let _ = env_logger::Builder::new().parse_filters(&filter).format_timestamp(None).try_init();
}

struct Context {
    seed: u64,
    out_dir: PathBuf,
}

impl Context {
    fn out(&self, p: &Path) -> PathBuf {
        self.out_dir.join(p)
    }

    fn derived(&self, label: &str) -> u64 {
        derive_seed(self.seed, label, 0)
    }
}

fn write_run_manifest(cli: &Cli, argv: &[OsString], ctx: &Context, outputs: &[PathBuf], seconds: f64) -> Result<()> {
    let manifest = serde_json::json!({
        "subcommand": cli.command.name(),
        "argv": argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "config": cli,
        "seed": cli.seed,
        "threads": rayon::current_num_threads(),
        "versions": {
            "expr3d": env!("CARGO_PKG_VERSION"),
            "model_format": model::io::FORMAT_VERSION,
            "checkpoint_format": crate::regressor::checkpoint::FORMAT_VERSION,
            "dataset_manifest": dataset::MANIFEST_VERSION,
        },
        "outputs": outputs,
        "wall_time_s": seconds,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fsutil::write_atomic(&ctx.out(Path::new(&format!("{}.run.json", cli.command.name()))), text.as_bytes())
}

fn execute(cmd: &Command, ctx: &Context) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::Model(ModelCmd::Synth(a)) => model_synth(a, ctx),
        Command::Model(ModelCmd::Info(a)) => model_info(a),
        Command::Gen(GenCmd::Frames(a)) => gen_frames(a, ctx),
        Command::Gen(GenCmd::Clips(a)) => gen_clips(a, ctx),
        Command::Label(a) => label(a, ctx),
        Command::Fit(a) => fit(a, ctx),
        Command::Train(a) => train_cmd(a, ctx),
        Command::Predict(a) => predict(a, ctx),
        Command::Eval(a) => eval_cmd(a, ctx),
        Command::Sweep(a) => sweep(a, ctx),
        Command::Export(a) => export(a, ctx),
    }
}

fn write_text(path: PathBuf, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    fsutil::write_atomic(&path, text.as_bytes())?;
    outputs.push(path);
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn model_synth(a: &SynthArgs, ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = model::make_synthetic_model(ctx.seed, a.n, a.s, a.m, a.landmarks)?;
    let path = ctx.out(&a.out);
    if a.json {
        model::io::save_model_json(&m, &path)?;
    } else {
        model::io::save_model(&m, &path)?;
    }
    log::info!("wrote {}", path.display());
    Ok(vec![path])
}

fn model_info(a: &InfoArgs) -> Result<Vec<PathBuf>> {
    let m = model::io::load_model(&a.model)?;
    let info = serde_json::json!({
        "vertices": m.n_vertices(),
        "shape_dim": m.shape_dim(),
        "expr_dim": m.expr_dim(),
        "landmarks": m.n_landmarks(),
        "triangles": m.triangles().map_or(0, |t| t.len()),
        "expr_stddev": m.expr_bounds(1.0).as_slice(),
    });
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(Vec::new())
}

fn gen_frames(a: &GenFramesArgs, ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = model::io::load_model(&a.model)?;
    let config = SampleConfig {
        subjects: a.subjects,
        frames_per_subject: a.frames_per_subject,
        camera: a.camera.setup(),
        landmark_noise_sigma: a.landmark_noise,
        alpha_noise_sigma: a.alpha_noise,
        seed: ctx.derived("cli/gen-frames"),
        ..Default::default()
    };
    let frames = datagen::sample_frames(&m, &config)?;
    let mut by_subject: BTreeMap<usize, Vec<Frame>> = BTreeMap::new();
    for f in frames {
        by_subject.entry(f.subject.unwrap_or(0)).or_default().push(f);
    }
    let clips = by_subject.into_iter().map(|(id, frames)| Clip { id, label: None, frames }).collect();
    let ds = Dataset { classes: Vec::new(), protocol: Protocol::AllFrames, clips };
    let path = ctx.out(&a.out);
    dataset::save_dataset(&ds, &path)?;
    log::info!("wrote {} frames to {}", ds.n_frames(), path.display());
    Ok(vec![path])
}

fn gen_clips(a: &GenClipsArgs, ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = model::io::load_model(&a.model)?;
    let prototypes = EmotionPrototypeSet::seeded(&m, ctx.derived("cli/prototypes"), a.sigma_class)?;
    let config = ClipConfig {
        clips_per_class: a.clips_per_class,
        frames_per_clip: a.frames_per_clip,
        camera: a.camera.setup(),
        landmark_noise_sigma: a.landmark_noise,
        alpha_noise_sigma: a.alpha_noise,
        frame_jitter: a.jitter,
        protocol: a.protocol.into(),
        seed: ctx.derived("cli/gen-clips"),
        ..Default::default()
    };
    let ds = datagen::make_emotion_clips(&m, &prototypes, &config)?;
    let path = ctx.out(&a.out);
    dataset::save_dataset(&ds, &path)?;
    log::info!("wrote {} clips to {}", ds.clips.len(), path.display());
    Ok(vec![path])
}

fn all_frames(ds: &Dataset) -> Vec<Frame> {
    ds.frames().cloned().collect()
}

fn header(first: &str, m: usize, extra: &[&str]) -> String {
    let mut h = first.to_string();
    for j in 0..m {
        let _ = write!(h, ",eta_{j}");
    }
    for e in extra {
        let _ = write!(h, ",{e}");
    }
    h.push('\n');
    h
}

fn label(a: &LabelArgs, ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = model::io::load_model(&a.model)?;
    let frames = all_frames(&dataset::load_dataset(&a.manifest)?);
    let report = datagen::generate_labels(&m, &frames, &a.fitter.config())?;
    for (id, reason) in &report.skipped {
        log::warn!("frame {id} skipped: {reason}");
    }
    let mut csv = header("frame_id", m.expr_dim(), &[]);
    for (id, eta) in &report.labels {
        let _ = writeln!(csv, "{id},{}", csv_row(eta.0.iter().copied()));
    }
    let mut outputs = Vec::new();
    write_text(ctx.out(&a.out), &csv, &mut outputs)?;
    Ok(outputs)
}

fn fit_items(m: &MorphableModel, frames: &[Frame]) -> Result<(Vec<usize>, Vec<FitItem>)> {
    let alphas = datagen::pooled_alphas(m, frames)?;
    let mut ids = Vec::new();
    let mut items = Vec::new();
    for (f, alpha) in frames.iter().zip(alphas) {
        match projection_matrix(&f.pose, &f.intrinsics) {
            Ok(pi) => {
                ids.push(f.id);
                items.push(FitItem { alpha, pi, landmarks: f.landmarks.clone() });
            }
            Err(e) => log::warn!("frame {}: {e}", f.id),
        }
    }
    Ok((ids, items))
}

fn fit(a: &FitArgs, ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = model::io::load_model(&a.model)?;
    let config = a.fitter.config();
    config.validate()?;
    let frames = all_frames(&dataset::load_dataset(&a.manifest)?);
    let (ids, items) = fit_items(&m, &frames)?;
    let entries = batch_fit(&m, &items, &config);

    let mut csv = header("frame_id", m.expr_dim(), &["objective", "iterations", "converged"]);
    let mut seconds = Vec::new();
    for (id, entry) in ids.iter().zip(entries) {
        match entry.result {
            Ok(r) => {
                let _ = writeln!(
                    csv,
                    "{id},{},{},{},{}",
                    csv_row(r.eta.0.iter().copied()),
                    fmt_num(r.objective),
                    r.iterations,
                    u8::from(r.converged)
                );
                seconds.push(entry.seconds);
            }
            Err(e) => log::warn!("frame {id} skipped: {e}"),
        }
    }
    let mut outputs = Vec::new();
    write_text(ctx.out(&a.out), &csv, &mut outputs)?;
    let table = timing_report(&[("landmark_fit", &seconds)]);
    eprint!("{}", table.to_text());
    write_text(ctx.out(&a.timing), &(serde_json::to_string_pretty(&table)? + "\n"), &mut outputs)?;
    Ok(outputs)
}

/// Reads a `frame_id, values...` CSV into a map.
fn read_keyed_csv(path: &Path) -> Result<BTreeMap<usize, ExpressionCoeffs>> {
    let rows = dataset::parse_csv_numbers(&fsutil::read_to_string(path)?)?;
    let mut out = BTreeMap::new();
    for row in rows {
        let (id, rest) = row.split_first().ok_or_else(|| Error::Parse(format!("{}: empty row", path.display())))?;
        if id.fract() != 0.0 || *id < 0.0 {
            return Err(Error::Parse(format!("{}: bad frame id {id}", path.display())));
        }
        out.insert(*id as usize, ExpressionCoeffs::from_vec(rest.to_vec()));
    }
    Ok(out)
}

fn train_cmd(a: &TrainArgs, ctx: &Context) -> Result<Vec<PathBuf>> {
    if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
        return Err(Error::Validation(format!("val fraction must lie in (0, 1), got {}", a.val_fraction)));
    }
    let frames = all_frames(&dataset::load_dataset(&a.manifest)?);
    let labels = a.labels.as_deref().map(read_keyed_csv).transpose()?;
    let mut pairs = Vec::new();
    for f in &frames {
        let target = match &labels {
            Some(l) => l.get(&f.id).cloned(),
            None => f.eta_true.clone(),
        };
        match target {
            Some(t) => pairs.push((f, t)),
            None => log::warn!("frame {} has no target, left out", f.id),
        }
    }
    if pairs.len() < 2 {
        return Err(Error::Validation(format!("need at least 2 labeled frames, found {}", pairs.len())));
    }
    let m = pairs[0].1.len();

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut crate::seed::derived_rng(ctx.seed, "cli/split", 0));
    let n_val = ((pairs.len() as f64 * a.val_fraction).round() as usize).clamp(1, pairs.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let view = |idx: &[usize]| idx.iter().map(|&i| (&pairs[i].0.image, &pairs[i].0.bbox)).collect::<Vec<_>>();
    let (train_x, mean) = prepare_rasters(&view(train_idx), a.input_side, None)?;
    let (val_x, _) = prepare_rasters(&view(val_idx), a.input_side, Some(&mean))?;
    let train_set: Vec<_> = train_x.into_iter().zip(train_idx.iter().map(|&i| pairs[i].1.clone())).collect();
    let val_set: Vec<_> = val_x.into_iter().zip(val_idx.iter().map(|&i| pairs[i].1.clone())).collect();

    let arch = Architecture { input_side: a.input_side, ..Architecture::default_for(m) };
    let net = RegressorNet::conv_net(&arch, ctx.derived("cli/init"))?;
    let config = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        plateau_patience: a.patience,
        max_epochs: a.epochs,
        seed: ctx.derived("cli/train"),
        ..Default::default()
    };
    let (net, history) = train(net, &train_set, &val_set, &config)?;

    let mut outputs = Vec::new();
    let ck = ctx.out(&a.out);
    save_checkpoint(&net, &ck)?;
    outputs.push(ck.clone());
    write_text(with_suffix(&ck, ".mean.json"), &(serde_json::to_string(&mean)? + "\n"), &mut outputs)?;
    let mut csv = String::from("epoch,train_loss,val_loss,lr\n");
    for h in &history {
        let _ = writeln!(csv, "{},{},{},{}", h.epoch, fmt_num(h.train_loss), fmt_num(h.val_loss), fmt_num(h.lr));
    }
    write_text(ctx.out(&a.history), &csv, &mut outputs)?;
    if let Some(last) = history.last() {
        log::info!("epoch {}: train {:.6} val {:.6}", last.epoch, last.train_loss, last.val_loss);
    }
    Ok(outputs)
}

fn load_net(path: &Path) -> Result<(RegressorNet, DatasetMean)> {
    let net = load_checkpoint(path)?;
    let mean_path = with_suffix(path, ".mean.json");
    let mean = match fsutil::read_to_string(&mean_path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(Error::MissingFile { .. }) => {
            log::warn!("{} missing, using zero input mean", mean_path.display());
            DatasetMean::default()
        }
        Err(e) => return Err(e),
    };
    Ok((net, mean))
}

fn predict(a: &PredictArgs, ctx: &Context) -> Result<Vec<PathBuf>> {
    let (net, mean) = load_net(&a.checkpoint)?;
    let frames = all_frames(&dataset::load_dataset(&a.manifest)?);
    let view: Vec<_> = frames.iter().map(|f| (&f.image, &f.bbox)).collect();
    let (inputs, _) = prepare_rasters(&view, net.input_side, Some(&mean))?;
    let (preds, forward_s) = predict_dataset(&net, &inputs)?;

    let mut csv = header("frame_id", net.output_dim, &[]);
    for (f, eta) in frames.iter().zip(&preds) {
        let _ = writeln!(csv, "{},{}", f.id, csv_row(eta.0.iter().copied()));
    }
    let mut outputs = Vec::new();
    write_text(ctx.out(&a.out), &csv, &mut outputs)?;

    let mut fit_s = Vec::new();
    if let Some(model_path) = &a.model {
        let m = model::io::load_model(model_path)?;
        let (_, items) = fit_items(&m, &frames)?;
        fit_s = batch_fit(&m, &items, &FitterConfig::default()).into_iter().map(|e| e.seconds).collect();
    }
    let table = timing_report(&[("landmark_fit", &fit_s), ("regressor", &forward_s)]);
    eprint!("{}", table.to_text());
    if let Some(t) = &a.timing {
        write_text(ctx.out(t), &table.to_csv(), &mut outputs)?;
    }
    Ok(outputs)
}

fn eval_cmd(a: &EvalArgs, ctx: &Context) -> Result<Vec<PathBuf>> {
    let ds = dataset::load_dataset(&a.manifest)?;
    ds.validate_labeled()?;
    let etas = a.etas.as_deref().map(read_keyed_csv).transpose()?;
    let mut features = Vec::new();
    for clip in &ds.clips {
        let mut per_frame = Vec::new();
        for f in eval::protocol_frames(&clip.frames, ds.protocol) {
            let eta = match &etas {
                Some(e) => e.get(&f.id).cloned(),
                None => f.eta_true.clone(),
            };
            match eta {
                Some(e) => per_frame.push(e),
                None => log::warn!("frame {} has no coefficients", f.id),
            }
        }
        match eval::clip_feature(&per_frame) {
            Ok(feature) => features.push(ClipFeature {
                clip_id: clip.id,
                label: ds.class_index(clip.label.as_deref().unwrap_or_default()).unwrap_or_default(),
                feature,
            }),
            Err(_) => log::warn!("clip {} dropped: no usable frames", clip.id),
        }
    }
    let (accuracy, cm) = eval::leave_one_clip_out(&features, &ds.classes, a.k)?;
    println!("accuracy {accuracy:.4} over {} clips", features.len());

    let mut outputs = Vec::new();
    let prefix = ctx.out(&a.out);
    write_text(with_suffix(&prefix, "_counts.csv"), &cm.counts_csv(), &mut outputs)?;
    write_text(with_suffix(&prefix, "_rates.csv"), &cm.rates_csv(), &mut outputs)?;
    let summary = serde_json::json!({
        "accuracy": accuracy,
        "k": a.k,
        "clips": features.len(),
        "protocol": ds.protocol,
        "classes": ds.classes,
    });
    write_text(with_suffix(&prefix, ".json"), &(serde_json::to_string_pretty(&summary)? + "\n"), &mut outputs)?;
    Ok(outputs)
}

fn sweep(a: &SweepArgs, ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = model::io::load_model(&a.model)?;
    let ds = dataset::load_dataset(&a.manifest)?;
    let config = a.fitter.config();
    config.validate()?;
    let lm = LandmarkFitStrategy { model: &m, config, sigma0: a.sigma0, seed: ctx.derived("cli/sweep-detector") };
    let net = a.checkpoint.as_deref().map(load_net).transpose()?;
    let reg = net.as_ref().map(|(net, mean)| RegressorStrategy { net, mean: mean.clone() });

    let mut strategies: Vec<&dyn ExpressionStrategy> = Vec::new();
    if ds.frames().all(|f| f.eta_true.is_some()) {
        strategies.push(&GroundTruthStrategy);
    }
    strategies.push(&lm);
    if let Some(r) = &reg {
        strategies.push(r);
    }
    let result = eval::scale_sweep(&m, &ds, &strategies, &a.scales, a.k)?;

    let mut outputs = Vec::new();
    let prefix = ctx.out(&a.out);
    write_text(with_suffix(&prefix, ".csv"), &result.to_csv(), &mut outputs)?;
    write_text(with_suffix(&prefix, ".svg"), &result.to_svg(), &mut outputs)?;
    write_text(with_suffix(&prefix, ".json"), &(serde_json::to_string_pretty(&result)? + "\n"), &mut outputs)?;
    Ok(outputs)
}

fn export(a: &ExportArgs, ctx: &Context) -> Result<Vec<PathBuf>> {
    let m = model::io::load_model(&a.model)?;
    let alpha = match &a.alpha {
        Some(p) => ShapeCoeffs(dataset::read_vector_csv(p)?),
        None => ShapeCoeffs::zeros(m.shape_dim()),
    };
    let eta = match &a.eta {
        Some(p) => ExpressionCoeffs(dataset::read_vector_csv(p)?),
        None => ExpressionCoeffs::zeros(m.expr_dim()),
    };
    let path = ctx.out(&a.out);
    obj::export_obj(&m, &alpha, &eta, &path)?;
    Ok(vec![path])
}
