//! `fgs`: every pipeline stage as a subcommand.
//!
//! Each invocation writes its outputs, plus a `run.meta` record of the
//! arguments and seed, into `--out`. Exit status is 0 on success, 2 for
//! invalid flags or configuration, and 1 for failures while running.

mod commands;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fgs_core::dataset::{ClassLabel, LabelSet, Split};
use fgs_core::kv::KvWriter;
use fgs_core::pipeline::DEFAULT_NOISE_SIGMA;
use fgs_core::synthdata::Strategy;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config files or protocols.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] fgs_core::Error),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fgs", version, about = "Defect detection pipeline for powder-bed layer imagery")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// `key = value` settings file; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory for every output, including `run.meta`.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

/// Which manifest entries a command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Train,
    Test,
    Unsplit,
}

impl Subset {
    pub fn split(self) -> Option<Split> {
        match self {
            Subset::All => None,
            Subset::Train => Some(Split::Train),
            Subset::Test => Some(Split::Test),
            Subset::Unsplit => Some(Split::Unsplit),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f32>,
    /// Random rotation/zoom/shift of training images.
    #[arg(long)]
    pub augment: Option<bool>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled tile corpus with defect masks.
    Surrogate {
        #[arg(long)]
        tile_size: Option<usize>,
        /// Tiles of one class, as `class=n`; repeatable. Replaces all counts.
        #[arg(long = "count", value_parser = parse_count)]
        counts: Vec<(ClassLabel, usize)>,
        #[arg(long)]
        label_set: Option<LabelSet>,
    },
    /// Cut labelled tiles out of a build-layer image.
    Tile {
        #[arg(long)]
        layer: PathBuf,
        /// Crop box `x,y,width,height`; repeatable.
        #[arg(long = "box", value_parser = parse_box)]
        boxes: Vec<[usize; 4]>,
        /// File of crop boxes, one `x,y,width,height` per line.
        #[arg(long)]
        boxes_file: Option<PathBuf>,
        #[arg(long)]
        class: ClassLabel,
        #[arg(long)]
        label_set: Option<LabelSet>,
    },
    /// Per-class counts of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Subset::All)]
        split: Subset,
    },
    /// Tag a manifest's entries train/test.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        stratified: bool,
    },
    /// Raise minority classes to a target count.
    Balance {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        /// Class to raise; repeatable. Defaults to every defect class present.
        #[arg(long = "class")]
        classes: Vec<ClassLabel>,
        #[arg(long)]
        target: usize,
        /// Trained generator for the gan strategy, as `class=path`; repeatable.
        #[arg(long = "generator", value_parser = parse_generator)]
        generators: Vec<(ClassLabel, PathBuf)>,
    },
    /// Train the defect classifier.
    TrainCnn {
        #[arg(long)]
        manifest: PathBuf,
        /// Entries to train on; defaults to the train split when present.
        #[arg(long, value_enum)]
        split: Option<Subset>,
        #[command(flatten)]
        train: TrainFlags,
        /// Convolution widths `a,b,c`.
        #[arg(long, value_parser = parse_filters)]
        filters: Option<[usize; 3]>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        dropout: Option<f32>,
    },
    /// Train the denoising autoencoder on noisy copies of clean tiles.
    TrainDae {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        split: Option<Subset>,
        #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
        sigma: f32,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train a generator/discriminator pair on one class.
    TrainGan {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        class: ClassLabel,
        #[arg(long, value_enum)]
        split: Option<Subset>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        /// Generated sample images to write for inspection.
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Reconstruct tiles with a trained autoencoder.
    Denoise {
        #[arg(long)]
        dae: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to the test split when present.
        #[arg(long, value_enum)]
        split: Option<Subset>,
        /// Corrupt the tiles with this much Gaussian noise first and report SSIM.
        #[arg(long)]
        noise: Option<f32>,
        /// Classifier for clean/noisy/reconstructed accuracy (needs --noise).
        #[arg(long)]
        cnn: Option<PathBuf>,
    },
    /// Score a classifier, or a predictions file, against true labels.
    Eval {
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<Subset>,
        /// `path, truth, predicted` table as written by `predict`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Classify PNG files or a manifest's tiles.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dae: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(required_unless_present = "manifest")]
        images: Vec<PathBuf>,
    },
    /// Serve batch predictions over HTTP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dae: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, default_value_t = fgs_service::DEFAULT_MAX_BATCH)]
        max_batch: usize,
    },
    /// Repeated split, balance, train and evaluate runs from a protocol file.
    Experiment {
        #[arg(long)]
        protocol: PathBuf,
        /// Overrides the protocol's dataset manifest.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Overrides the protocol's repetition count.
        #[arg(long)]
        repetitions: Option<usize>,
    },
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::Surrogate { .. } => "surrogate",
            Command::Tile { .. } => "tile",
            Command::Stats { .. } => "stats",
            Command::Split { .. } => "split",
            Command::Balance { .. } => "balance",
            Command::TrainCnn { .. } => "train-cnn",
            Command::TrainDae { .. } => "train-dae",
            Command::TrainGan { .. } => "train-gan",
            Command::Denoise { .. } => "denoise",
            Command::Eval { .. } => "eval",
            Command::Predict { .. } => "predict",
            Command::Serve { .. } => "serve",
            Command::Experiment { .. } => "experiment",
        }
    }
}

fn parse_count(s: &str) -> Result<(ClassLabel, usize), String> {
    let (c, n) = s.split_once('=').ok_or("expected class=count")?;
    Ok((c.trim().parse()?, n.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_generator(s: &str) -> Result<(ClassLabel, PathBuf), String> {
    let (c, p) = s.split_once('=').ok_or("expected class=path")?;
    Ok((c.trim().parse()?, PathBuf::from(p.trim())))
}

fn parse_numbers<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let n = v.len();
    v.try_into().map_err(|_| format!("expected {N} comma-separated numbers, got {n}"))
}

pub(crate) fn parse_box(s: &str) -> Result<[usize; 4], String> {
    parse_numbers::<4>(s)
}

fn parse_filters(s: &str) -> Result<[usize; 3], String> {
    parse_numbers::<3>(s)
}

/// Where a command writes, and what to record about how it was invoked.
pub struct Context {
    pub out: PathBuf,
    pub args: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Context {
    pub fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    /// Creates `--out` and writes `run.meta`.
    pub fn record(&self, verb: &str, seed: u64) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::Runtime(format!("{}: {e}", self.out.display())))?;
        let mut w = KvWriter::new();
        w.comment("fgs reproducibility record")
            .pair("version", env!("CARGO_PKG_VERSION"))
            .pair("command", verb)
            .pair("args", self.args.iter().map(|a| quote(a)).collect::<Vec<_>>().join(" "))
            .pair("seed", seed)
            .pair(
                "config",
                self.config.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            );
        self.write("run.meta", w.finish())
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

fn quote(arg: &str) -> String {
    if !arg.is_empty() && arg.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=,:+".contains(c)) {
        arg.to_string()
    } else {
        format!("'{}'", arg.replace('\'', r"'\''"))
    }
}

/// Parses `args` (program name first), runs the command and maps the
/// outcome to an exit status.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    let ctx = Context {
        out: cli.out.clone(),
        args: args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        config: cli.config.clone(),
        seed: cli.seed,
    };
    match commands::execute(&cli.command, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fgs {}: {}", cli.command.verb(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
