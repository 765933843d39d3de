use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use nmsparse::optim::Variant;
use nmsparse::train::{DataSource, SnapshotCadence, TrainConfig};
use nmsparse::SparsityPattern;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "nmsparse", version, about = "Train N:M structured sparse networks and analyse their mask dynamics")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,

    /// Directory holding the four MNIST IDX files.
    #[arg(long, global = true, default_value = "data/mnist")]
    pub data_dir: PathBuf,

    /// JSON training config, or a run manifest written by `train`. Flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Fixed-order reductions. Every kernel already reduces in a fixed order, so
    /// runs are reproducible either way; the flag is accepted for scripts.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download MNIST and verify its SHA-256 digests.
    Fetch(FetchArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Train several variants and seeds from identical initialisations.
    Compare(CompareArgs),
    /// SAD_{0:t} of sparse-forward (S) vs dense-forward (D) training.
    SadAnalysis(SadArgs),
    /// Project an NMSP matrix onto an N:M pattern and write NMSP + NMCX files.
    Project(ProjectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FetchArgs {
    /// Base URL (or local directory) holding `<name>.gz` or `<name>` files.
    #[arg(long, default_value = crate::fetch::DEFAULT_MIRROR)]
    pub mirror: String,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// dense | ste | sr-ste | sign-refined | grad-refined, optionally `:<lambda>`.
    #[arg(long)]
    pub variant: Option<String>,

    /// N:M pattern for every layer but the classifier, or `none`.
    #[arg(long)]
    pub pattern: Option<String>,

    #[arg(long, allow_negative_numbers = true)]
    pub lambda_w: Option<f64>,

    #[arg(long, allow_negative_numbers = true)]
    pub lambda_c: Option<f64>,

    #[arg(long, allow_negative_numbers = true)]
    pub lambda_g: Option<f64>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub lr_peak: Option<f64>,

    #[arg(long)]
    pub warmup_epochs: Option<usize>,

    /// Fixed learning rate instead of warmup + cosine.
    #[arg(long)]
    pub lr_constant: Option<f64>,

    #[arg(long)]
    pub momentum: Option<f64>,

    #[arg(long)]
    pub weight_decay: Option<f64>,

    /// mnist | blobs | xor
    #[arg(long)]
    pub data: Option<String>,

    /// Comma-separated hidden widths, e.g. `256,128`.
    #[arg(long)]
    pub hidden: Option<String>,

    #[arg(long)]
    pub train_limit: Option<usize>,

    #[arg(long)]
    pub test_limit: Option<usize>,

    #[arg(long)]
    pub synthetic_train: Option<usize>,

    #[arg(long)]
    pub synthetic_test: Option<usize>,

    #[arg(long)]
    pub synthetic_dims: Option<usize>,

    /// `epoch` or `iter:K`.
    #[arg(long)]
    pub snapshot: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub train: TrainArgs,

    /// Comma-separated variants, e.g. `dense,ste,sr-ste`.
    #[arg(long, default_value = "dense,ste,sr-ste")]
    pub variants: String,

    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,

    /// `lambda-grid` replaces the variant list with SR-STE at every ablation λ_W.
    #[arg(long)]
    pub preset: Option<String>,

    /// Concurrent runs. Each owns its state, so outputs do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SadArgs {
    #[command(flatten)]
    pub train: TrainArgs,

    /// Iteration counts t for SAD_{0:t}.
    #[arg(long, default_value = "1,10")]
    pub iters: String,

    /// Constant learning rate for both schemes (defaults to the peak rate).
    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
}

#[derive(Debug, Clone, Args)]
pub struct ProjectArgs {
    /// Input NMSP matrix.
    pub input: PathBuf,

    #[arg(long, default_value = "2:4")]
    pub pattern: String,

    /// Output file stem inside `--out` (default: input stem).
    #[arg(long)]
    pub out_prefix: Option<String>,
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    let items: Result<Vec<T>, _> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("bad {what} list {s:?}"))),
    }
}

fn parse_pattern(s: &str) -> CliResult<Option<SparsityPattern>> {
    match s {
        "none" | "dense" => Ok(None),
        _ => Ok(Some(s.parse()?)),
    }
}

/// Reads `--config`: a bare config object, or a manifest with a `config` field.
pub fn load_config_file(path: &Path) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(inner) = value.get_mut("config") {
        value = inner.take();
    }
    Ok(serde_json::from_value(value)?)
}

impl TrainArgs {
    /// Variant parsed from `spec`, with `--lambda-*` applied unless `spec` names its own λ.
    pub fn variant_with_lambdas(&self, spec: &str) -> CliResult<Variant> {
        let variant: Variant = spec.parse()?;
        Ok(if spec.contains(':') { variant } else { self.apply_lambdas(variant)? })
    }

    fn apply_lambdas(&self, variant: Variant) -> CliResult<Variant> {
        let flag = match variant {
            Variant::SrSte { .. } => self.lambda_w,
            Variant::SignRefined { .. } => self.lambda_c,
            Variant::GradRefined { .. } => self.lambda_g,
            Variant::Dense | Variant::Ste => None,
        };
        Ok(flag.map_or(variant, |l| variant.with_lambda(l)))
    }

    /// Merges the flags over `base`.
    pub fn apply(&self, mut config: TrainConfig) -> CliResult<TrainConfig> {
        if let Some(v) = &self.variant {
            config.variant = self.variant_with_lambdas(v)?;
        } else {
            config.variant = self.apply_lambdas(config.variant)?;
        }
        if let Some(p) = &self.pattern {
            config.pattern = parse_pattern(p)?;
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { config.$field = v; })*
            };
        }
        set!(epochs, batch_size, lr_peak, warmup_epochs, momentum, weight_decay, synthetic_train, synthetic_test, synthetic_dims);
        if self.lr_constant.is_some() {
            config.lr_constant = self.lr_constant;
        }
        if self.train_limit.is_some() {
            config.train_limit = self.train_limit;
        }
        if self.test_limit.is_some() {
            config.test_limit = self.test_limit;
        }
        if let Some(d) = &self.data {
            config.data = d.parse::<DataSource>()?;
        }
        if let Some(h) = &self.hidden {
            config.hidden = parse_list(h, "hidden width")?;
        }
        if let Some(s) = &self.snapshot {
            config.snapshot = s.parse::<SnapshotCadence>()?;
        }
        Ok(config)
    }
}

/// Config file (if any), then flags, then the global seed; validated.
pub fn resolve_config(global: &GlobalArgs, args: &TrainArgs) -> CliResult<TrainConfig> {
    let base = match &global.config {
        Some(path) => load_config_file(path)?,
        None => TrainConfig::default(),
    };
    let mut config = args.apply(base)?;
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("nmsparse").chain(args.iter().copied())).unwrap()
    }

    fn train_config(args: &[&str]) -> CliResult<TrainConfig> {
        let c = cli(args);
        match &c.command {
            Command::Train(t) => resolve_config(&c.global, t),
            _ => unreachable!(),
        }
    }

    #[test]
    fn train_flags_override_defaults() {
        let c = train_config(&["train", "--variant", "sr-ste", "--pattern", "2:4", "--lambda-w", "0.0002", "--epochs", "20", "--seed", "1", "--data", "mnist"]).unwrap();
        assert_eq!(c.variant, Variant::SrSte { lambda_w: 0.0002 });
        assert_eq!(c.epochs, 20);
        let c = train_config(&["train", "--variant", "sr-ste", "--lambda-w", "-0.00002"]).unwrap();
        assert_eq!(c.variant, Variant::SrSte { lambda_w: -0.00002 });
        let c = train_config(&["--seed", "9", "train", "--pattern", "4:4", "--hidden", "64,32"]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.hidden, vec![64, 32]);
        assert!(c.pattern.unwrap().is_dense());
    }

    #[test]
    fn indivisible_hidden_width_is_usage_error() {
        let err = train_config(&["train", "--pattern", "3:8", "--hidden", "100"]).unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_USAGE);
    }

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"config": {"epochs": 3, "batch_size": 64}, "inputs": []}"#).unwrap();
        let p = path.to_str().unwrap();
        let c = train_config(&["--config", p, "train", "--epochs", "7"]).unwrap();
        assert_eq!((c.epochs, c.batch_size), (7, 64));
        std::fs::write(&path, r#"{"epochs": 8}"#).unwrap();
        assert_eq!(train_config(&["--config", p, "train"]).unwrap().epochs, 8);
    }

    #[test]
    fn deterministic_flag_takes_a_value() {
        assert!(cli(&["train"]).global.deterministic);
        assert!(!cli(&["--deterministic", "false", "train"]).global.deterministic);
    }
}
