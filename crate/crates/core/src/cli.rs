//! The `edlseg` command line: `gen-data`, `train`, `eval` and `report`.
//!
//! Every command accepts `--config FILE`, a JSON object whose snake_case keys
//! mirror the kebab-case flags. Flags win over the file. Each command writes
//! its fully resolved configuration next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{EdlError, Result};
use crate::io::{self, fmt_sig6, SPLITS};
use crate::losses::{LossConfig, LossKind, DEFAULT_ANNEAL_EPOCHS, DEFAULT_KL_MAX};
use crate::metrics::{evaluate, EvalSettings};
use crate::net::{predict, train, TrainConfig, TrainingSample};
use crate::synthdata::{
    generate_dataset, subregion_labels, Difficulty, Perturbation, Task, IMAGE_SIDE, N_CHANNELS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_BAD_ARGS: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONTRACT: i32 = 4;

pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GEN_CONFIG_FILE: &str = "gen_config.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const EVAL_CONFIG_FILE: &str = "eval_config.json";
pub const REPORT_CONFIG_FILE: &str = "report_config.json";
pub const AGGREGATE_ROW: &str = "mean";

pub const METRIC_COLUMNS: [&str; 4] = ["dice", "ece", "sueo", "bras"];

#[derive(Debug, Parser)]
#[command(
    name = "edlseg",
    version,
    about = "Evidential segmentation with region-based Dice losses"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/val/test dataset.
    GenData(GenDataArgs),
    /// Train a network on the train split.
    Train(TrainArgs),
    /// Evaluate a model on a split, optionally perturbing the inputs.
    Eval(EvalArgs),
    /// Collect evaluation runs into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub difficulty: Option<Difficulty>,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    #[serde(default)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenDataConfig {
    pub out: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub force: bool,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub kl_max: Option<f64>,
    #[arg(long)]
    pub anneal_epochs: Option<u32>,
    /// Model file to write; the trace and resolved config go to its directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub split: String,
    pub task: Task,
    pub loss: LossKind,
    pub epochs: u32,
    pub lr: f64,
    pub seed: u64,
    pub kl_max: f64,
    pub anneal_epochs: u32,
    pub out: PathBuf,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// `none`, `blur:SIGMA`, `noise:VARIANCE` or `gamma:GAMMA`.
    #[arg(long)]
    pub perturb: Option<Perturbation>,
    /// Defaults to the task recorded next to the model.
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Method label used by `report`; defaults to `edl-{loss}-{task}`.
    #[arg(long)]
    pub label: Option<String>,
    /// Seed for noise perturbations.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ece_bins: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub split: String,
    pub perturb: String,
    pub task: Task,
    pub loss: LossKind,
    pub label: String,
    pub seed: u64,
    pub ece_bins: usize,
    pub out: PathBuf,
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Evaluation output directories.
    #[arg(long, num_args = 1..)]
    #[serde(default)]
    pub runs: Vec<PathBuf>,
    /// CSV file to write; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    pub runs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(err: &EdlError) -> i32 {
    match err {
        e if e.is_contract_violation() => EXIT_CONTRACT,
        EdlError::Io(_) | EdlError::Format(_) => EXIT_IO,
        _ => EXIT_BAD_ARGS,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| EdlError::InvalidArgument(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|_| ()),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Report(a) => {
            let csv = cmd_report(a.resolve()?)?;
            if let Some(csv) = csv {
                print!("{csv}");
            }
            Ok(())
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| {
        EdlError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| EdlError::InvalidArgument(format!("config {}: {e}", path.display())))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable config");
    s.push('\n');
    s.into_bytes()
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| EdlError::InvalidArgument(format!("--{flag} is required")))
}

fn check_split(split: &str) -> Result<()> {
    if SPLITS.contains(&split) {
        Ok(())
    } else {
        Err(EdlError::InvalidArgument(format!(
            "unknown split '{split}'"
        )))
    }
}

impl GenDataArgs {
    pub fn resolve(self) -> Result<GenDataConfig> {
        let file: GenDataArgs = load_config(self.config.as_deref())?;
        let cfg = GenDataConfig {
            out: required(self.out.or(file.out), "out")?,
            n_train: self.n_train.or(file.n_train).unwrap_or(50),
            n_val: self.n_val.or(file.n_val).unwrap_or(20),
            n_test: self.n_test.or(file.n_test).unwrap_or(20),
            seed: self.seed.or(file.seed).unwrap_or(7),
            difficulty: self
                .difficulty
                .or(file.difficulty)
                .unwrap_or(Difficulty::Easy),
            force: self.force || file.force,
        };
        if cfg.n_train == 0 {
            return Err(EdlError::InvalidArgument(
                "--n-train must be at least 1".into(),
            ));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Images come from one seeded sequence split by index, so the splits never share an image.
pub fn cmd_gen_data(args: GenDataArgs) -> Result<GenDataConfig> {
    let cfg = args.resolve()?;
    let non_empty = match fs::read_dir(&cfg.out) {
        Ok(mut entries) => entries.next().is_some(),
        Err(_) => false,
    };
    if non_empty {
        if !cfg.force {
            return Err(EdlError::InvalidArgument(format!(
                "{} is not empty; pass --force to overwrite",
                cfg.out.display()
            )));
        }
        for split in SPLITS {
            let dir = cfg.out.join(split);
            if dir.is_dir() {
                fs::remove_dir_all(&dir)?;
            }
        }
    }
    fs::create_dir_all(&cfg.out)?;

    let counts = [cfg.n_train, cfg.n_val, cfg.n_test];
    let images = generate_dataset(counts.iter().sum(), cfg.seed, cfg.difficulty)?;
    let mut images = images.iter();
    for (split, &n) in SPLITS.iter().zip(&counts) {
        let dir = cfg.out.join(split);
        fs::create_dir_all(&dir)?;
        for i in 0..n {
            io::write_sample(&dir, i, images.next().expect("enough images"))?;
        }
    }
    let manifest = Manifest {
        n_train: cfg.n_train,
        n_val: cfg.n_val,
        n_test: cfg.n_test,
        seed: cfg.seed,
        difficulty: cfg.difficulty,
        channels: N_CHANNELS,
        height: IMAGE_SIDE,
        width: IMAGE_SIDE,
    };
    io::write_file(&cfg.out.join(MANIFEST_FILE), &json_bytes(&manifest))?;
    io::write_file(&cfg.out.join(GEN_CONFIG_FILE), &json_bytes(&cfg))?;
    Ok(cfg)
}

impl TrainArgs {
    pub fn resolve(self) -> Result<TrainRunConfig> {
        let file: TrainArgs = load_config(self.config.as_deref())?;
        let defaults = TrainConfig::default();
        let cfg = TrainRunConfig {
            data: required(self.data.or(file.data), "data")?,
            split: self.split.or(file.split).unwrap_or_else(|| "train".into()),
            task: self.task.or(file.task).unwrap_or(Task::Wt),
            loss: self.loss.or(file.loss).unwrap_or(LossKind::Dice),
            epochs: self.epochs.or(file.epochs).unwrap_or(defaults.epochs),
            lr: self.lr.or(file.lr).unwrap_or(defaults.lr),
            seed: self.seed.or(file.seed).unwrap_or(defaults.seed),
            kl_max: self.kl_max.or(file.kl_max).unwrap_or(DEFAULT_KL_MAX),
            anneal_epochs: self
                .anneal_epochs
                .or(file.anneal_epochs)
                .unwrap_or(DEFAULT_ANNEAL_EPOCHS),
            out: required(self.out.or(file.out), "out")?,
        };
        check_split(&cfg.split)?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }
}

impl TrainRunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            seed: self.seed,
            loss: LossConfig {
                kl_max: self.kl_max,
                anneal_epochs: self.anneal_epochs,
                ..LossConfig::new(self.loss)
            },
            ..TrainConfig::default()
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

pub const TRACE_COLUMNS: [&str; 5] = ["epoch", "data_term", "kl_term", "lambda", "total"];

pub fn cmd_train(args: TrainArgs) -> Result<TrainRunConfig> {
    let cfg = args.resolve()?;
    let split_dir = cfg.data.join(&cfg.split);
    let samples = io::read_split(&split_dir)?
        .into_iter()
        .map(|img| {
            Ok(TrainingSample {
                labels: subregion_labels(&img.labels, cfg.task)?,
                image: img.channels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(EdlError::InvalidArgument(format!(
            "no images in {}",
            split_dir.display()
        )));
    }
    let outcome = train(&samples, &cfg.train_config())?;
    io::save_model(&cfg.out, &outcome.params)?;
    let rows: Vec<Vec<String>> = outcome
        .trace
        .iter()
        .enumerate()
        .map(|(epoch, v)| {
            vec![
                epoch.to_string(),
                fmt_sig6(v.data_term),
                fmt_sig6(v.kl_term),
                fmt_sig6(v.lambda),
                fmt_sig6(v.total),
            ]
        })
        .collect();
    let dir = cfg.out_dir();
    io::write_file(
        &dir.join(TRACE_FILE),
        io::csv_text(&TRACE_COLUMNS, &rows).as_bytes(),
    )?;
    io::write_file(&dir.join(TRAIN_CONFIG_FILE), &json_bytes(&cfg))?;
    Ok(cfg)
}

/// The training config written next to a model, if any.
fn sibling_train_config(model: &Path) -> Option<TrainRunConfig> {
    let path = model
        .parent()
        .unwrap_or(Path::new(""))
        .join(TRAIN_CONFIG_FILE);
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn method_label(loss: LossKind, task: Task) -> String {
    format!("edl-{loss}-{task}")
}

impl EvalArgs {
    pub fn resolve(self) -> Result<EvalRunConfig> {
        let file: EvalArgs = load_config(self.config.as_deref())?;
        let model = required(self.model.or(file.model), "model")?;
        let trained = sibling_train_config(&model);
        let task = self.task.or(file.task).or(trained.as_ref().map(|t| t.task));
        let task = task.ok_or_else(|| {
            EdlError::InvalidArgument(
                "--task is required (no train config beside the model)".into(),
            )
        })?;
        let loss = self
            .loss
            .or(file.loss)
            .or(trained.as_ref().map(|t| t.loss))
            .unwrap_or(LossKind::Dice);
        let cfg = EvalRunConfig {
            data: required(self.data.or(file.data), "data")?,
            split: self.split.or(file.split).unwrap_or_else(|| "test".into()),
            perturb: self
                .perturb
                .or(file.perturb)
                .unwrap_or(Perturbation::None)
                .to_string(),
            label: self
                .label
                .or(file.label)
                .unwrap_or_else(|| method_label(loss, task)),
            seed: self.seed.or(file.seed).unwrap_or(0),
            ece_bins: self
                .ece_bins
                .or(file.ece_bins)
                .unwrap_or(crate::metrics::DEFAULT_ECE_BINS),
            out: required(self.out.or(file.out), "out")?,
            model,
            task,
            loss,
        };
        check_split(&cfg.split)?;
        if cfg.ece_bins == 0 {
            return Err(EdlError::InvalidArgument(
                "--ece-bins must be at least 1".into(),
            ));
        }
        if cfg.label.is_empty() || cfg.label.contains([',', '\n', '\r']) {
            return Err(EdlError::InvalidArgument(format!(
                "invalid label '{}'",
                cfg.label
            )));
        }
        Ok(cfg)
    }
}

/// Per-image metric rows as produced by `eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub config: EvalRunConfig,
    /// `(image index, [dice, ece, sueo, bras])`
    pub rows: Vec<(usize, [f64; 4])>,
    pub mean: [f64; 4],
}

pub fn cmd_eval(args: EvalArgs) -> Result<EvalOutcome> {
    let cfg = args.resolve()?;
    let perturb: Perturbation = cfg.perturb.parse()?;
    let params = io::load_model(&cfg.model)?;
    if params.k_classes() != cfg.task.k_classes() {
        return Err(EdlError::ShapeMismatch(format!(
            "model has K = {}, task {} needs K = {}",
            params.k_classes(),
            cfg.task,
            cfg.task.k_classes()
        )));
    }
    let split_dir = cfg.data.join(&cfg.split);
    let indices = io::list_samples(&split_dir)?;
    if indices.is_empty() {
        return Err(EdlError::InvalidArgument(format!(
            "no images in {}",
            split_dir.display()
        )));
    }
    let settings = EvalSettings {
        m_bins: cfg.ece_bins,
        ..EvalSettings::default()
    };
    let regions = cfg.task.eval_regions();
    let k_max = (cfg.task.k_classes() - 1) as f64;
    fs::create_dir_all(&cfg.out)?;

    let mut rows = Vec::with_capacity(indices.len());
    for &idx in &indices {
        let img = io::read_sample(&split_dir, idx)?;
        let gt = subregion_labels(&img.labels, cfg.task)?;
        let input = perturb.apply(&img.channels, cfg.seed ^ idx as u64)?;
        let pred = predict(&params, &input)?;
        let report = evaluate(&pred.labels, &pred.uncertainty, &gt, &regions, &settings)?;
        rows.push((idx, [report.dice, report.ece, report.sueo, report.bras]));

        let error = ndarray::Zip::from(&pred.labels)
            .and(gt.labels())
            .map_collect(|p, g| if p != g { 255u8 } else { 0 });
        let seg = pred
            .labels
            .mapv(|l| (255.0 * f64::from(l) / k_max).round() as u8);
        io::write_pgm(
            &cfg.out.join(format!("unc_{idx:04}.pgm")),
            &io::unit_to_grey(pred.uncertainty.values()),
        )?;
        io::write_pgm(&cfg.out.join(format!("err_{idx:04}.pgm")), &error)?;
        io::write_pgm(&cfg.out.join(format!("seg_{idx:04}.pgm")), &seg)?;
    }
    let mut mean = [0.0; 4];
    for (_, r) in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);

    let format_row = |name: String, r: &[f64; 4]| -> Vec<String> {
        std::iter::once(name)
            .chain(r.iter().map(|&v| fmt_sig6(v)))
            .collect()
    };
    let mut table: Vec<Vec<String>> = rows
        .iter()
        .map(|(i, r)| format_row(format!("{i:04}"), r))
        .collect();
    table.push(format_row(AGGREGATE_ROW.into(), &mean));
    let header = ["image", "dice", "ece", "sueo", "bras"];
    io::write_file(
        &cfg.out.join(METRICS_FILE),
        io::csv_text(&header, &table).as_bytes(),
    )?;
    io::write_file(&cfg.out.join(EVAL_CONFIG_FILE), &json_bytes(&cfg))?;
    Ok(EvalOutcome {
        config: cfg,
        rows,
        mean,
    })
}

impl ReportArgs {
    pub fn resolve(self) -> Result<ReportConfig> {
        let file: ReportArgs = load_config(self.config.as_deref())?;
        let runs = if self.runs.is_empty() {
            file.runs
        } else {
            self.runs
        };
        if runs.is_empty() {
            return Err(EdlError::InvalidArgument(
                "--runs needs at least one evaluation directory".into(),
            ));
        }
        Ok(ReportConfig {
            runs,
            out: self.out.or(file.out),
        })
    }
}

fn run_summary(dir: &Path) -> Result<Vec<String>> {
    let metrics_path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&metrics_path).map_err(|e| {
        EdlError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", metrics_path.display()),
        ))
    })?;
    let (header, rows) = io::parse_csv(&text)?;
    let mean = rows.iter().find(|r| r[0] == AGGREGATE_ROW).ok_or_else(|| {
        EdlError::Format(format!("{} has no aggregate row", metrics_path.display()))
    })?;
    let label = fs::read_to_string(dir.join(EVAL_CONFIG_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<EvalRunConfig>(&t).ok())
        .map(|c| c.label)
        .unwrap_or_else(|| {
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
    let mut row = vec![label];
    for col in METRIC_COLUMNS {
        let pos = header.iter().position(|h| h == col).ok_or_else(|| {
            EdlError::Format(format!("{} lacks column {col}", metrics_path.display()))
        })?;
        row.push(mean[pos].clone());
    }
    Ok(row)
}

/// Builds the comparison CSV; writes it to `out` when set, otherwise returns it.
pub fn cmd_report(cfg: ReportConfig) -> Result<Option<String>> {
    let mut rows = cfg
        .runs
        .iter()
        .map(|d| run_summary(d))
        .collect::<Result<Vec<_>>>()?;
    rows.sort();
    let mut header = vec!["method"];
    header.extend(METRIC_COLUMNS);
    let csv = io::csv_text(&header, &rows);
    match &cfg.out {
        Some(path) => {
            io::write_file(path, csv.as_bytes())?;
            let dir = path.parent().unwrap_or(Path::new(""));
            io::write_file(&dir.join(REPORT_CONFIG_FILE), &json_bytes(&cfg))?;
            Ok(None)
        }
        None => Ok(Some(csv)),
    }
}
