//! `elpower` command line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use elpower::pipeline::Estimator;

#[derive(Parser, Debug)]
#[command(name = "elpower", version, about = "Module detection and power estimation for EL measurements")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Manifest JSONL; relative image paths resolve against its directory.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// JSON run configuration; command line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DetectArgs {
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub min_area_ratio: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GeometryArgs {
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub cell_px: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Svr,
    Area,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Svr => Estimator::Svr,
            EstimatorArg::Area => Estimator::Area,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic module manifest (and optional annotated scenes) under --out.
    Synth {
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Label noise standard deviation in relative power.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        /// Highest inactive fraction drawn per instance.
        #[arg(long, default_value_t = 0.3)]
        max_fraction: f64,
        #[arg(long, default_value_t = 0)]
        scenes: usize,
        #[arg(long, default_value_t = 1024)]
        scene_size: usize,
    },
    /// Detect modules; writes one JSON with the boxes of every image.
    Detect {
        images: Vec<PathBuf>,
        #[command(flatten)]
        params: DetectArgs,
        /// Score against `<image>.json` annotations and write a PR-vs-IoU CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Rectify the modules of one image into `module_<k>.pgm` files under --out.
    Rectify {
        image: PathBuf,
        /// Box `x0,y0,x1,y1`; detection runs when omitted.
        #[arg(long = "box", value_parser = parse_box)]
        bbox: Option<[usize; 4]>,
        #[command(flatten)]
        params: DetectArgs,
        #[command(flatten)]
        geometry: GeometryArgs,
    },
    /// Mean/std feature CSV of every manifest image.
    Features,
    /// Fit a model on every labeled manifest entry.
    FitSvr {
        #[arg(long, value_enum, default_value_t = EstimatorArg::Svr)]
        estimator: EstimatorArg,
        /// Feature CSV replacing the image features.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, requires = "epsilon")]
        c: Option<f64>,
        #[arg(long, requires = "c")]
        epsilon: Option<f64>,
    },
    /// Predict every manifest entry; writes `sample_id,p_rel_hat`.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Cross-validation, or a train/test run across module types.
    Cv {
        #[arg(long, value_enum, default_value_t = EstimatorArg::Area)]
        estimator: EstimatorArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        hpo_budget: Option<usize>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Module types to train on, comma separated.
        #[arg(long, value_delimiter = ',', requires = "test_subset")]
        train_subset: Vec<String>,
        /// Module types to test on, comma separated.
        #[arg(long, value_delimiter = ',', requires = "train_subset")]
        test_subset: Vec<String>,
        /// Score an external `sample_id,p_rel_hat` CSV on the same folds instead of fitting.
        #[arg(long, conflicts_with_all = ["train_subset", "features"])]
        predictions: Option<PathBuf>,
    },
    /// Tune the detector on annotated images (`<image>.pgm` with `<image>.json`).
    TuneDetect {
        /// Directory of annotated images.
        corpus: PathBuf,
        #[arg(long, default_value_t = 30)]
        budget: usize,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        /// PR-vs-IoU CSV of the tuned parameters.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Tune SVR hyperparameters on a stratified split of the manifest.
    TuneSvr {
        #[arg(long)]
        hpo_budget: Option<usize>,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Per-cell power loss in Wp from loss maps, or from an area model and the manifest images.
    CellLoss {
        /// Loss maps (PLM).
        maps: Vec<PathBuf>,
        /// Healthy-module maps for median debiasing.
        #[arg(long, num_args = 1..)]
        healthy: Vec<PathBuf>,
        /// Area model JSON; uses the manifest images instead of maps.
        #[arg(long, conflicts_with = "maps")]
        model: Option<PathBuf>,
        #[arg(long)]
        p_nom: Option<f64>,
        #[command(flatten)]
        geometry: GeometryArgs,
    },
    /// Detect, rectify and estimate every module of each measurement.
    Inspect {
        images: Vec<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        p_nom: Option<f64>,
        #[command(flatten)]
        params: DetectArgs,
        #[command(flatten)]
        geometry: GeometryArgs,
    },
}

fn parse_box(s: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected x0,y0,x1,y1".to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli) {
        Ok(commands::Status::Success) => ExitCode::SUCCESS,
        Ok(commands::Status::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
