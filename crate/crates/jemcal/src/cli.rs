//! Subcommand definitions and their implementations.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use jemcal_core::calibration::{
    accuracy, apply_calibrator, ece, fit_logistic_scaling, fit_temperature, nll, Calibrator, LogisticVariant,
    PredictionSet,
};
use jemcal_core::data::Split;
use jemcal_core::sgld::{sgld_chain, SgldConfig};
use jemcal_core::training::{predict, train, Mode};
use jemcal_core::{Error as CoreError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DataSpec, ModeKind, RunConfig};
use crate::csvio;
use crate::modelfile::ModelFile;
use crate::report::{self, CalibratorFile, StageMetrics};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "JEMCAL_OUT";
pub const DEFAULT_OUT: &str = "jemcal-out";
/// Bin count of the secondary reliability table written by `eval`.
pub const SECONDARY_BINS: usize = 10;
/// Halvings of the SGLD step size `sample` tries after a divergence.
pub const SAMPLE_RETRIES: usize = 3;

#[derive(Debug, Parser)]
#[command(name = "jemcal", version, about = "Joint energy-based training and calibration analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a softmax or JEM classifier from a run config.
    Train(TrainArgs),
    /// Evaluate a trained model on one split.
    Eval(EvalArgs),
    /// Fit a post-hoc calibrator on the dev split.
    Calibrate(CalibrateArgs),
    /// Draw SGLD samples from a trained model.
    Sample(SampleArgs),
    /// Reliability and histogram tables from a predictions file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Run config; defaults to `config.toml` next to the model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Evaluate every row of this CSV instead of a split of the configured data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Temperature,
    LogisticVector,
    LogisticMatrix,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(short = 'n', long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Elementwise gradient clip; `0` disables clipping.
    #[arg(long)]
    pub clip_grad: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad input or arguments: exit code 2.
    Usage(anyhow::Error),
    /// Failure while running: exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => e,
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        runtime(e)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// `--out`, then the config's `out`, then `$JEMCAL_OUT`, then `jemcal-out`.
pub fn resolve_out(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn create_out(dir: &Path) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Report(a) => cmd_report(a),
    }
}

pub fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = RunConfig::load(&a.config).map_err(usage)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.train.mode = m;
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate().map_err(usage)?;
    let ds = cfg.dataset().map_err(usage)?;
    let tc = cfg.train_config();
    let trained = train(&ds, &tc).map_err(runtime)?;

    let out = create_out(&resolve_out(None, cfg.out.as_deref()))?;
    let text = cfg.to_toml();
    let file = ModelFile {
        model: trained.model,
        mode: tc.mode,
        normalization: ds.normalization().cloned(),
        config_hash: cfg.hash(),
        buffer: trained.buffer,
    };
    file.save(&out.join("model.jem"))
        .with_context(|| format!("cannot write {}", out.join("model.jem").display()))?;
    report::write_trainlog(create(&out.join("trainlog.csv"))?, &text, &trained.log)?;
    write_text(&out.join("config.toml"), &text)?;
    if let Some(r) = trained.log.records.last() {
        println!(
            "epoch {}: test accuracy {:.4}, NLL {:.4}, ECE {:.4}",
            r.epoch, r.test_acc, r.test_nll, r.test_ece
        );
    }
    Ok(())
}

/// A model together with the run config it is evaluated under.
pub struct Loaded {
    pub file: ModelFile,
    pub config: RunConfig,
}

pub fn load_model(model: &Path, config: Option<&Path>) -> CliResult<Loaded> {
    let file = ModelFile::load(model)
        .map_err(|e| usage(anyhow!(e).context(format!("cannot load model {}", model.display()))))?;
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => model.parent().unwrap_or(Path::new(".")).join("config.toml"),
    };
    let config = RunConfig::load(&cfg_path).map_err(usage)?;
    if config.hash() != file.config_hash {
        log::warn!(
            "config {} differs from the one the model was trained with",
            cfg_path.display()
        );
    }
    Ok(Loaded { file, config })
}

/// Model inputs for `split`, normalized with the stored training statistics.
pub fn split_inputs(l: &Loaded, split: Split) -> CliResult<(Tensor, Vec<usize>)> {
    let raw = l.config.raw_dataset().map_err(usage)?;
    let (x, y) = raw.subset(split).map_err(usage)?;
    Ok((normalize(&l.file, &x)?, y))
}

fn normalize(file: &ModelFile, raw: &Tensor) -> CliResult<Tensor> {
    let found = raw.shape()[1];
    let expected = file.normalization.as_ref().map_or(file.model.input_dim(), |n| n.raw_dim);
    if found != expected {
        return Err(usage(anyhow!(
            "dimension mismatch: model expects D={expected} input features, data has D={found}"
        )));
    }
    match &file.normalization {
        Some(n) => Ok(n.apply(raw).map_err(usage)?.0),
        None => Ok(raw.clone()),
    }
}

fn predictions(l: &Loaded, x: &Tensor, y: &[usize]) -> CliResult<PredictionSet> {
    if y.is_empty() {
        return Err(usage(anyhow!("the selected split is empty")));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= l.file.model.num_classes()) {
        return Err(usage(anyhow!(
            "label {bad} is out of range for a {}-class model",
            l.file.model.num_classes()
        )));
    }
    predict(&l.file.model, x, y).map_err(runtime)
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    model: String,
    split: SplitArg,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<String>,
    bins: usize,
    model_config_sha256: String,
    run: &'a RunConfig,
}

pub fn cmd_eval(a: EvalArgs) -> CliResult {
    let l = load_model(&a.model, a.config.as_deref())?;
    let bins = a.bins.unwrap_or(l.config.metrics.bins);
    if bins == 0 {
        return Err(usage(anyhow!("--bins must be positive")));
    }
    let (x, y) = match &a.data {
        Some(path) => {
            let label_column = match &l.config.data {
                DataSpec::Csv { label_column, .. } => *label_column,
                _ => None,
            };
            let ds = csvio::ingest_csv(path, label_column, l.file.model.num_classes()).map_err(usage)?;
            (normalize(&l.file, ds.features())?, ds.labels().to_vec())
        }
        None => split_inputs(&l, a.split.into())?,
    };
    let preds = predictions(&l, &x, &y)?;

    let out = create_out(&resolve_out(a.out.as_deref(), l.config.out.as_deref()))?;
    report::write_metrics(create(&out.join("metrics.csv"))?, &preds, bins)?;
    report::write_predictions(create(&out.join("predictions.csv"))?, &preds)?;
    report::write_reliability(create(&out.join("reliability.csv"))?, &preds, bins)?;
    report::write_histogram(create(&out.join("histogram.csv"))?, &preds, bins)?;
    report::write_reliability(
        create(&out.join(format!("reliability_b{SECONDARY_BINS}.csv")))?,
        &preds,
        SECONDARY_BINS,
    )?;
    let record = EvalRecord {
        model: a.model.display().to_string(),
        split: a.split,
        data: a.data.as_ref().map(|p| p.display().to_string()),
        bins,
        model_config_sha256: hex(&l.file.config_hash),
        run: &l.config,
    };
    write_text(&out.join("eval_config.toml"), &toml::to_string(&record).map_err(runtime)?)?;
    println!(
        "accuracy {:.4}, NLL {:.4}, ECE {:.4} (n={}, B={bins})",
        accuracy(&preds).map_err(runtime)?,
        nll(&preds).map_err(runtime)?,
        ece(&preds, bins).map_err(runtime)?,
        preds.len()
    );
    Ok(())
}

pub fn fit_method(dev: &PredictionSet, method: Method) -> jemcal_core::Result<Calibrator> {
    match method {
        Method::Temperature => Ok(Calibrator::Temperature(fit_temperature(dev)?)),
        Method::LogisticVector => fit_logistic_scaling(dev, LogisticVariant::Vector),
        Method::LogisticMatrix => fit_logistic_scaling(dev, LogisticVariant::Matrix),
    }
}

#[derive(Serialize)]
struct CalibrateRecord<'a> {
    model: String,
    method: Method,
    bins: usize,
    model_config_sha256: String,
    run: &'a RunConfig,
}

pub fn cmd_calibrate(a: CalibrateArgs) -> CliResult {
    let l = load_model(&a.model, a.config.as_deref())?;
    let bins = a.bins.unwrap_or(l.config.metrics.bins);
    if bins == 0 {
        return Err(usage(anyhow!("--bins must be positive")));
    }
    let (dx, dy) = split_inputs(&l, Split::Dev)?;
    if dy.is_empty() {
        return Err(usage(anyhow!("dev split is empty; set split.dev > 0 in the config")));
    }
    let (tx, ty) = split_inputs(&l, Split::Test)?;
    let dev = predictions(&l, &dx, &dy)?;
    let test = predictions(&l, &tx, &ty)?;
    let cal = fit_method(&dev, a.method).map_err(runtime)?;

    let mut rows = Vec::new();
    for (split, preds) in [("dev", &dev), ("test", &test)] {
        let after = apply_calibrator(preds, &cal).map_err(runtime)?;
        for (stage, p) in [("before", preds), ("after", &after)] {
            rows.push(StageMetrics {
                split,
                stage,
                accuracy: accuracy(p).map_err(runtime)?,
                nll: nll(p).map_err(runtime)?,
                ece: ece(p, bins).map_err(runtime)?,
            });
        }
    }
    let out = create_out(&resolve_out(a.out.as_deref(), l.config.out.as_deref()))?;
    let file = CalibratorFile::from(&cal);
    write_text(&out.join("calibrator.toml"), &toml::to_string(&file).map_err(runtime)?)?;
    report::write_calibration(create(&out.join("calibration.csv"))?, &rows)?;
    let record = CalibrateRecord {
        model: a.model.display().to_string(),
        method: a.method,
        bins,
        model_config_sha256: hex(&l.file.config_hash),
        run: &l.config,
    };
    write_text(&out.join("calibrate_config.toml"), &toml::to_string(&record).map_err(runtime)?)?;
    for r in &rows {
        println!("{} {}: accuracy {:.4}, NLL {:.4}, ECE {:.4}", r.split, r.stage, r.accuracy, r.nll, r.ece);
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleRecord {
    model: String,
    n: usize,
    seed: u64,
    steps: usize,
    step_size: f64,
    noise_scale: f64,
    decouple_noise: bool,
    clip_grad: f64,
    box_low: f64,
    box_high: f64,
    retries: usize,
}

/// Fresh chains drawn uniformly from the box. A divergence restarts every
/// chain with half the step size, up to [`SAMPLE_RETRIES`] times.
pub fn draw_samples(
    file: &ModelFile,
    n: usize,
    cfg: &SgldConfig,
    seed: u64,
) -> Result<(Tensor, SgldConfig, usize), CoreError> {
    let d = file.model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = cfg.clone();
    let mut retries = 0;
    loop {
        let x0 = Tensor::new(&[n, d], (0..n * d).map(|_| cfg.bounds.sample(&mut rng)).collect())?;
        match sgld_chain(&file.model, &x0, &cfg, &mut rng) {
            Ok(x) => return Ok((x, cfg, retries)),
            Err(e @ CoreError::Divergence { .. }) if retries < SAMPLE_RETRIES => {
                log::warn!("{e}; retrying with step size {}", cfg.step_size / 2.0);
                cfg.step_size /= 2.0;
                retries += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

pub fn cmd_sample(a: SampleArgs) -> CliResult {
    let l = load_model(&a.model, a.config.as_deref())?;
    if l.file.mode == Mode::Softmax {
        log::warn!("model was trained without the generative term; samples may be poor");
    }
    if a.n == 0 {
        return Err(usage(anyhow!("-n must be positive")));
    }
    let mut cfg = l.config.sgld_config();
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.step_size {
        cfg.step_size = s;
    }
    if let Some(s) = a.noise_scale {
        cfg.noise_scale = s;
    }
    if let Some(c) = a.clip_grad {
        cfg.clip_grad = (c > 0.0).then_some(c);
    }
    if let Some(b) = l.file.normalization.as_ref().and_then(|n| n.clip) {
        cfg.bounds = b;
    }
    cfg.validate().map_err(usage)?;
    let seed = a.seed.unwrap_or(l.config.seed);
    let (x, used, retries) = draw_samples(&l.file, a.n, &cfg, seed)
        .map_err(|e| runtime(anyhow!(e).context(format!("sampling failed after {SAMPLE_RETRIES} retries"))))?;
    let energies = l.file.model.free_energy(&x).map_err(runtime)?;

    let out = create_out(&resolve_out(a.out.as_deref(), l.config.out.as_deref()))?;
    report::write_samples(create(&out.join("samples.csv"))?, &x, &energies)?;
    let record = SampleRecord {
        model: a.model.display().to_string(),
        n: a.n,
        seed,
        steps: used.steps,
        step_size: used.step_size,
        noise_scale: used.noise_scale,
        decouple_noise: used.decouple_noise,
        clip_grad: used.clip_grad.unwrap_or(0.0),
        box_low: used.bounds.low,
        box_high: used.bounds.high,
        retries,
    };
    write_text(&out.join("sample_config.toml"), &toml::to_string(&record).map_err(runtime)?)?;
    let mean = energies.iter().sum::<f64>() / energies.len() as f64;
    println!("{} samples, mean free energy {mean:.4}", a.n);
    Ok(())
}

#[derive(Serialize)]
struct ReportRecord {
    predictions: String,
    bins: usize,
}

pub fn cmd_report(a: ReportArgs) -> CliResult {
    if a.bins == 0 {
        return Err(usage(anyhow!("--bins must be positive")));
    }
    let preds = report::load_predictions(&a.predictions).map_err(usage)?;
    let out = create_out(&resolve_out(a.out.as_deref(), None))?;
    report::write_reliability(create(&out.join("reliability.csv"))?, &preds, a.bins)?;
    report::write_histogram(create(&out.join("histogram.csv"))?, &preds, a.bins)?;
    let record = ReportRecord {
        predictions: a.predictions.display().to_string(),
        bins: a.bins,
    };
    write_text(&out.join("report_config.toml"), &toml::to_string(&record).map_err(runtime)?)?;
    Ok(())
}
