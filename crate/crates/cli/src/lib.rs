//! Command-line front end: `gen`, `estimate`, `train`, `eval` and `plot`.
//!
//! Every command is deterministic given its inputs, configuration and seed,
//! and writes its artifacts atomically.

mod commands;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use homoscale::estimator::{EstimatorConfig, OptimizerConfig};
use homoscale::objective::{LambdaW, LossConfig};
use homoscale::synthesis::ChainConfig;
use homoscale::{Error, Result};

pub use commands::{pair_file_name, EstimateRecord, ErrorRecord, TrainRecord};

/// Seed used when neither the flags nor the config file give one.
pub const DEFAULT_SEED: u64 = 0x5EED;
/// Worker cap environment variable.
pub const THREADS_ENV: &str = "HOMOSCALE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "homoscale", version, about = "Large-baseline homography estimation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file for `plot`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of intermediate images per chain.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Largest non-overlap rate of an intermediate hop.
    #[arg(long, global = true)]
    pub max_overlap_rate: Option<f64>,
    /// Working resolution, `N` or `WxH`.
    #[arg(long, global = true, value_parser = parse_dims)]
    pub resize: Option<(usize, usize)>,
    /// Crop size of generated chains, `N` or `WxH`.
    #[arg(long, global = true, value_parser = parse_dims)]
    pub crop: Option<(usize, usize)>,
    /// Local correlation radius in cells.
    #[arg(long, global = true)]
    pub radius: Option<usize>,
    /// Descriptor ratio-test threshold.
    #[arg(long, global = true)]
    pub ratio: Option<f64>,
    /// `auto` or a fixed non-negative weight.
    #[arg(long, global = true, value_parser = parse_lambda_w)]
    pub lambda_w: Option<LambdaW>,
    /// Anchor weight of the direct optimizer.
    #[arg(long, global = true)]
    pub mu: Option<f64>,
    /// Optimizer iteration budget.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate synthetic chains and their manifest.
    Gen {
        /// Number of chains.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Source image; a procedural texture per chain when omitted.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Estimate the homography of every manifest pair.
    Estimate {
        #[arg(long)]
        manifest: PathBuf,
        /// Estimate through the generated chain (hops, then the bridge).
        #[arg(long)]
        progressive: bool,
    },
    /// Run the direct identity-loss optimizer on every generated chain.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Also write one JSON loss report per iteration.
        #[arg(long)]
        log: bool,
    },
    /// Score homographies against the manifest labels.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory of `estimate`; the recorded ground truths when omitted.
        #[arg(long)]
        estimates: Option<PathBuf>,
        /// Row label of the report.
        #[arg(long)]
        method: Option<String>,
    },
    /// Render robustness-curve CSVs as an SVG plot.
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

/// Contents of a `--config` file. Missing sections keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub chain: ChainConfig,
    pub estimator: EstimatorConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

/// Fully resolved configuration of one invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    #[serde(skip)]
    pub command: Command,
    /// Not serialized, so artifacts do not depend on where they are written.
    #[serde(skip)]
    pub out: PathBuf,
    pub seed: u64,
    pub chain: ChainConfig,
    pub estimator: EstimatorConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((w, h)) => Ok((parse(w)?, parse(h)?)),
        None => {
            let v = parse(s)?;
            Ok((v, v))
        }
    }
}

fn parse_lambda_w(s: &str) -> std::result::Result<LambdaW, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(LambdaW::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(LambdaW::Fixed(v)),
        _ => Err(format!("expected `auto` or a non-negative number, got {s:?}")),
    }
}

impl RunConfig {
    /// Defaults, then the config file, then the flags.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let c = &cli.common;
        let file = match &c.config {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingFile(p.display().to_string()));
                }
                let text = fs::read_to_string(p)?;
                serde_json::from_str::<FileConfig>(&text).map_err(|e| Error::Parse {
                    context: format!("{}:{}:{}", p.display(), e.line(), e.column()),
                    message: e.to_string(),
                })?
            }
            None => FileConfig::default(),
        };
        let mut cfg = RunConfig {
            command: cli.command.clone(),
            out: c.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            seed: c.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            chain: file.chain,
            estimator: file.estimator,
            optimizer: file.optimizer,
            loss: file.loss,
        };
        cfg.chain.seed = cfg.seed;
        if let Some(n) = c.n {
            cfg.chain.n = n;
        }
        if let Some(r) = c.max_overlap_rate {
            cfg.chain.max_rate = r;
        }
        if let Some((w, h)) = c.resize {
            cfg.chain.resize_width = w;
            cfg.chain.resize_height = h;
            cfg.estimator.resize_width = w;
            cfg.estimator.resize_height = h;
        }
        if let Some((w, h)) = c.crop {
            cfg.chain.crop_width = w;
            cfg.chain.crop_height = h;
        }
        if let Some(r) = c.radius {
            cfg.estimator.radius = r;
        }
        if let Some(r) = c.ratio {
            cfg.estimator.ratio = r;
        }
        if let Some(l) = c.lambda_w {
            cfg.loss.lambda_w = l;
        }
        if let Some(m) = c.mu {
            cfg.optimizer.mu = m;
        }
        if let Some(i) = c.iters {
            cfg.optimizer.iterations = i;
        }
        cfg.chain.validate()?;
        cfg.estimator.validate()?;
        cfg.optimizer.validate()?;
        cfg.loss.validate()?;
        Ok(cfg)
    }
}

/// Messages of one command, printed in order by the caller.
#[derive(Debug, Default)]
pub struct Outcome {
    pub log: Vec<String>,
    /// Files written, in order.
    pub artifacts: Vec<PathBuf>,
}

/// Runs a resolved configuration on a pool capped by `HOMOSCALE_THREADS`.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| commands::dispatch(cfg))
}

/// One-line JSON error record.
pub fn error_record(e: &Error) -> String {
    serde_json::to_string(&ErrorRecord::from(e)).unwrap_or_else(|_| format!("{{\"code\":\"{}\"}}", e.code()))
}

/// Entry point of the binary; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match RunConfig::resolve(&cli).and_then(|cfg| run(&cfg)) {
        Ok(outcome) => {
            for line in outcome.log {
                eprintln!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            1
        }
    }
}

pub(crate) fn resolve_against(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("homoscale").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn dims_and_lambda_parse() {
        assert_eq!(parse_dims("128").unwrap(), (128, 128));
        assert_eq!(parse_dims("480x320").unwrap(), (480, 320));
        assert!(parse_dims("x3").is_err());
        assert_eq!(parse_lambda_w("auto").unwrap(), LambdaW::Auto);
        assert_eq!(parse_lambda_w("0.5").unwrap(), LambdaW::Fixed(0.5));
        assert!(parse_lambda_w("-1").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        fs::write(&p, r#"{"seed": 7, "optimizer": {"mu": 0.5, "iterations": 10}, "estimator": {"radius": 3}}"#).unwrap();
        let c = cli(&["gen", "--config", p.to_str().unwrap(), "--iters", "20"]);
        let cfg = RunConfig::resolve(&c).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.chain.seed, 7);
        assert_eq!(cfg.optimizer.mu, 0.5);
        assert_eq!(cfg.optimizer.iterations, 20);
        assert_eq!(cfg.estimator.radius, 3);
        let c = cli(&["gen", "--config", p.to_str().unwrap(), "--seed", "9", "--radius", "2"]);
        let cfg = RunConfig::resolve(&c).unwrap();
        assert_eq!((cfg.seed, cfg.estimator.radius), (9, 2));
    }

    #[test]
    fn defaults_and_invalid_values() {
        let cfg = RunConfig::resolve(&cli(&["gen"])).unwrap();
        assert_eq!(cfg.seed, DEFAULT_SEED);
        assert_eq!(cfg.out, PathBuf::from("out"));
        let err = RunConfig::resolve(&cli(&["gen", "--ratio", "1.5"])).unwrap_err();
        assert_eq!(err.code(), "E_INVALID_CONFIG");
        let err = RunConfig::resolve(&cli(&["gen", "--config", "/nonexistent/cfg.json"])).unwrap_err();
        assert_eq!(err.code(), "E_MISSING_FILE");
    }
}
