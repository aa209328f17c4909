//! Experiment runner: configuration handling, pipeline stages, the ablation
//! report and figures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use densetrf::pipeline::ExperimentConfig;
use densetrf::Error;

pub mod ablation;
pub mod plots;
pub mod stages;

/// File the resolved configuration is echoed to.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("plotting {}: {message}", path.display())]
    Plot { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 2 config, 3 missing prerequisite, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::Parse(_)
                | Error::DegenerateSpec(_)
                | Error::IncompatibleClasses { .. }
                | Error::OutputExists(_) => 2,
                Error::MissingPrerequisite(_) | Error::MissingMask(_) => 3,
                e if e.is_numerical() => 4,
                _ => 1,
            },
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "densetrf", version, about = "Slot-attention dense prediction with dual-branch adaptation")]
pub struct Cli {
    /// Experiment configuration (TOML). Omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    /// Runs a single seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub overwrite: bool,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Write the synthetic shift benchmark to `<output_dir>/data`.
    Generate,
    /// Reconstruction pretraining of the base parameters.
    PretrainBase,
    /// Alternating base/target rounds with periodic merging.
    Adapt,
    /// Three-phase supervised training of the dense head.
    TrainHead,
    /// Test-set metrics, predictions and figures.
    Evaluate {
        /// Target-test samples per seed whose predictions and slot masks are exported.
        #[arg(long, default_value_t = 4)]
        export: usize,
    },
    /// All four variants over all seeds, with the comparison table.
    Ablate,
}

/// Resolved configuration plus run-wide switches.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
    pub deterministic: bool,
    pub overwrite: bool,
}

impl Context {
    pub fn resolve(cli: &Cli) -> CliResult<Self> {
        let mut config = match &cli.config {
            Some(path) if !path.exists() => {
                return Err(Error::Config(format!("config file {} not found", path.display())).into())
            }
            Some(path) => ExperimentConfig::read(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(dir) = &cli.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(seed) = cli.seed {
            config.seeds = vec![seed];
        }
        if cli.deterministic {
            config.round.concurrent = false;
        }
        config.validate()?;
        let hash = config.hash();
        Ok(Self {
            out: config.output_dir.clone(),
            config,
            hash,
            deterministic: cli.deterministic,
            overwrite: cli.overwrite,
        })
    }

    /// Creates the output directory and echoes the resolved config into it.
    pub fn prepare(&self) -> CliResult<()> {
        create_dir(&self.out)?;
        let path = self.out.join(RESOLVED_CONFIG);
        if let Ok(previous) = fs::read_to_string(&path) {
            if !previous.contains(&self.hash) {
                log::warn!("{} was written by a different configuration; replacing it", path.display());
            }
        }
        let text = format!("# config_hash = \"{}\"\n{}", self.hash, self.config.to_toml());
        fs::write(&path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed_{seed}"))
    }

    /// Fails when `path` exists and overwriting was not requested.
    pub fn check_writable(&self, path: &Path) -> CliResult<()> {
        if path.exists() && !self.overwrite {
            return Err(Error::OutputExists(path.to_path_buf()).into());
        }
        Ok(())
    }

    pub fn short_hash(&self) -> &str {
        &self.hash[..12]
    }
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let ctx = Context::resolve(cli)?;
    ctx.prepare()?;
    log::info!("config hash {}", ctx.hash);
    match cli.command {
        Command::Generate => stages::generate(&ctx).map(|_| ()),
        Command::PretrainBase => stages::pretrain_base(&ctx),
        Command::Adapt => stages::adapt(&ctx),
        Command::TrainHead => stages::train_head(&ctx),
        Command::Evaluate { export } => stages::evaluate(&ctx, export),
        Command::Ablate => ablation::ablate(&ctx).map(|_| ()),
    }
}

/// Runs `f` for every seed, on separate threads unless deterministic.
pub(crate) fn for_each_seed<T, F>(ctx: &Context, f: F) -> CliResult<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> CliResult<T> + Sync,
{
    let seeds = &ctx.config.seeds;
    if ctx.deterministic || seeds.len() == 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || f(s))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("densetrf").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn global_flags_apply_after_the_subcommand() {
        let cli = parse(&["adapt", "--seed", "3", "--deterministic", "--output-dir", "/tmp/x"]);
        let ctx = Context::resolve(&cli).unwrap();
        assert_eq!(ctx.config.seeds, vec![3]);
        assert!(!ctx.config.round.concurrent);
        assert_eq!(ctx.out, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn missing_config_is_a_config_error() {
        let cli = parse(&["generate", "--config", "/nonexistent/densetrf.toml"]);
        assert_eq!(Context::resolve(&cli).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn exit_codes() {
        let code = |e: Error| CliError::from(e).exit_code();
        assert_eq!(code(Error::Config("x".into())), 2);
        assert_eq!(code(Error::MissingPrerequisite("a".into())), 3);
        assert_eq!(code(Error::NonFinite("x".into())), 4);
        assert_eq!(code(Error::Empty("x".into())), 1);
    }

    #[test]
    fn overrides_change_the_hash() {
        let a = Context::resolve(&parse(&["generate"])).unwrap();
        let b = Context::resolve(&parse(&["generate", "--seed", "9"])).unwrap();
        assert_ne!(a.hash, b.hash);
        assert_eq!(a.hash, Context::resolve(&parse(&["generate"])).unwrap().hash);
    }
}
