use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{apply_overrides, read_document, set_key, ExperimentConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "hcl", version, about = "Train and analyze networks with hidden classification layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run directory's checkpoint if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
    /// Per-layer GDV of a saved model.
    Gdv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = GdvSplit::Both)]
        split: GdvSplit,
        /// Skip the per-dimension normalization.
        #[arg(long)]
        raw: bool,
    },
    /// Train vanilla and HCL variants with the same seed and compare them.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Grid search over learning rate and λ.
    Grid {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GdvSplit {
    Train,
    Test,
    Both,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Comma-separated head weights; a single value applies to every head.
    #[arg(long)]
    pub lambdas: Option<String>,
    /// Override any config key, e.g. `--set train.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    /// Applies flags on top of a config document.
    pub fn apply(&self, doc: &mut toml::Table) -> CliResult<()> {
        apply_overrides(doc, &self.set)?;
        let path = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned());
        if let Some(p) = &self.data_dir {
            set_key(doc, "data_dir", path(p))?;
        }
        if let Some(p) = &self.out_dir {
            set_key(doc, "out_dir", path(p))?;
        }
        let int = |v: u64| -> CliResult<toml::Value> {
            i64::try_from(v)
                .map(toml::Value::Integer)
                .map_err(|_| CliError::Config(format!("{v} is too large")))
        };
        if let Some(s) = self.seed {
            set_key(doc, "train.seed", int(s)?)?;
        }
        if let Some(n) = self.train_limit {
            set_key(doc, "train_limit", int(n as u64)?)?;
        }
        if let Some(n) = self.test_limit {
            set_key(doc, "test_limit", int(n as u64)?)?;
        }
        if let Some(l) = &self.lambdas {
            let values = l
                .split(',')
                .map(|v| v.trim().parse::<f64>().map(toml::Value::Float))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Config(format!("--lambdas `{l}`: {e}")))?;
            set_key(doc, "train.lambdas", toml::Value::Array(values))?;
        }
        Ok(())
    }

    /// The config file (or defaults) with flags applied.
    pub fn load(&self) -> CliResult<ExperimentConfig> {
        let mut doc = read_document(self.config.as_deref())?;
        self.apply(&mut doc)?;
        ExperimentConfig::from_document(doc)
    }

    /// A config embedded in a checkpoint, with flags applied.
    pub fn load_embedded(&self, text: &str) -> CliResult<ExperimentConfig> {
        if self.config.is_some() {
            return Err(CliError::Config("--config conflicts with the checkpoint's embedded config".into()));
        }
        let mut doc = crate::config::parse_document(text)?;
        self.apply(&mut doc)?;
        ExperimentConfig::from_document(doc)
    }
}
