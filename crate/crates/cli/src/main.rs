use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

mod commands;
#[cfg(test)]
mod tests;

/// Key-point based fruit orientation estimation.
#[derive(Debug, Parser)]
#[command(name = "berrypose", version, about)]
struct Cli {
    /// Worker threads for per-record work (0 = one per core).
    #[arg(long, global = true, env = "BERRYPOSE_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset with exact orientation ground truth.
    Generate(GenerateArgs),
    /// Write the Gaussian heat map of one key point as PFM.
    Encode(EncodeArgs),
    /// Decode a stack of PFM heat maps into a key point.
    Decode(DecodeArgs),
    /// Estimate phi and theta for every record of a dataset.
    Estimate(EstimateArgs),
    /// Fit the pitch-formula parameters to data with ground truth.
    Calibrate(CalibrateArgs),
    /// Score predictions against a dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of distinct berry shapes.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    berries: u32,
    /// Views rendered per berry.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    views: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the key-point jitter, pixels.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    noise_px: f64,
    /// Pixels per berry length unit.
    #[arg(long, default_value_t = 170.0, value_parser = positive)]
    scale: f64,
    /// Side of the square image grid, pixels.
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(8..=4096))]
    grid: u32,
    /// Also write simulated detector heat maps.
    #[arg(long)]
    heatmaps: bool,
    /// Heat maps per key point when --heatmaps is set.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=8))]
    stages: u32,
    /// Jitter of the simulated detector peak, pixels.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    heatmap_noise_px: f64,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Top,
    Tip,
}

impl From<Kind> for berrypose::KeypointKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Top => berrypose::KeypointKind::Top,
            Kind::Tip => berrypose::KeypointKind::Tip,
        }
    }
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long, allow_negative_numbers = true)]
    x: f64,
    #[arg(long, allow_negative_numbers = true)]
    y: f64,
    #[arg(long, value_enum, default_value_t = Kind::Top)]
    kind: Kind,
    /// Gaussian kernel width, pixels.
    #[arg(long, default_value_t = 2.0, value_parser = positive)]
    sigma: f64,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(8..=4096))]
    width: u32,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(8..=4096))]
    height: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// PFM files forming one stack.
    #[arg(required = true)]
    maps: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Kind::Top)]
    kind: Kind,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Shape parameters; defaults to <data>/params.json, then to the built-in
    /// constants.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Predictions, one JSON line per record.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["data", "samples"])))]
struct CalibrateArgs {
    /// Dataset directory with orientation ground truth.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pre-measured calibration samples (JSON lines).
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Maximum number of objective evaluations.
    #[arg(long, default_value_t = 20_000, value_parser = clap::value_parser!(u64).range(1..))]
    budget: u64,
    /// Fitted parameters.
    #[arg(long)]
    out: PathBuf,
    /// Text report; printed to standard output when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Fraction of records (by id order, taken from the end) held out and
    /// scored after fitting.
    #[arg(long, default_value_t = 0.0, value_parser = fraction)]
    test_fraction: f64,
    /// Also write the measured samples as JSON lines.
    #[arg(long)]
    export_samples: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Predictions as written by `estimate`.
    #[arg(long)]
    pred: PathBuf,
    /// Theta bin width, degrees.
    #[arg(long, default_value_t = 10.0, value_parser = bin_width)]
    bins: f64,
    /// Prefix for <P>summary.txt, <P><metric>.csv and <P>records.jsonl.
    #[arg(long)]
    out_prefix: String,
    /// Also summarize each of K id-ordered folds.
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
    folds: Option<u32>,
    /// Fail when records lack orientation ground truth.
    #[arg(long)]
    require_orientation: bool,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if v >= 0.0 {
            Ok(v)
        } else {
            Err("must be >= 0".into())
        }
    })
}

fn positive(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if v > 0.0 {
            Ok(v)
        } else {
            Err("must be > 0".into())
        }
    })
}

fn fraction(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if (0.0..1.0).contains(&v) {
            Ok(v)
        } else {
            Err("must lie in [0, 1)".into())
        }
    })
}

fn bin_width(s: &str) -> Result<f64, String> {
    parse_f64(s).and_then(|v| {
        if v > 0.0 && v <= 90.0 {
            Ok(v)
        } else {
            Err("must lie in (0, 90]".into())
        }
    })
}

fn run(command: Command) -> Result<(), String> {
    match command {
        Command::Generate(a) => commands::generate(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Evaluate(a) => commands::evaluate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("warning: could not configure {} threads: {e}", cli.threads);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
