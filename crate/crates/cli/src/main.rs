use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use navpetl::trainer::gradcheck::GRAD_TOLERANCE;
use navpetl::world::Split;
use navpetl::Method;
use navpetl_cli::{ablate, count_params, eval_run, format_counts, gen_world, grad_check, train_run, Ablation, RunConfig};

#[derive(Parser)]
#[command(name = "navpetl", version, about = "Train and score parameter-efficient tuning methods on a synthetic navigation world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn method_names() -> PossibleValuesParser {
    PossibleValuesParser::new(Method::ALL.map(Method::name))
}

/// Settings shared by every command; flags override the config file.
#[derive(Args)]
struct Common {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = method_names())]
    method: Option<String>,
    /// World grid, e.g. 6x6
    #[arg(long, value_name = "WxH")]
    grid: Option<String>,
    /// Episodes for the seen split
    #[arg(long)]
    episodes: Option<usize>,
    /// Set any config key
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        if let Some(v) = self.seed {
            cfg.set("seed", &v.to_string())?;
        }
        if let Some(v) = &self.method {
            cfg.set("method", v)?;
        }
        if let Some(v) = &self.grid {
            cfg.set("grid", v)?;
        }
        if let Some(v) = self.episodes {
            cfg.set("episodes", &v.to_string())?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Seen,
    Unseen,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Seen => Split::Seen,
            SplitArg::Unseen => Split::Unseen,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Components,
    Gates,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and write an episode file
    GenWorld {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "seen")]
        split: SplitArg,
        /// Episode file to write
        #[arg(long, default_value = "episodes.tsv")]
        out: PathBuf,
    },
    /// Train a method and write config, checkpoint, log and held-out metrics
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding run directories
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run directory name, default the method name
        #[arg(long)]
        name: Option<String>,
    },
    /// Score a checkpoint on one split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "unseen")]
        split: SplitArg,
        /// Checkpoint to load, default <out>/<name>/checkpoint.vlnp
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Follow shortest paths instead of a model
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trainable parameter share of every method
    CountParams {
        #[command(flatten)]
        common: Common,
    },
    /// Audit analytic gradients against central differences
    GradCheck {
        #[arg(long, value_parser = method_names(), default_value = "vln-petl")]
        method: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Sampled coordinates per tensor
        #[arg(long, default_value_t = 16)]
        coords: usize,
    },
    /// Component or gate ablation over full vln-petl trainings
    Ablate {
        #[arg(value_enum)]
        which: AblationArg,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn with_out(cfg: &mut RunConfig, out: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = out {
        cfg.set("out", &p.to_string_lossy())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenWorld { common, split, out } => {
            let n = gen_world(&common.resolve()?, split.into(), &out)?;
            println!("{n}");
        }
        Command::Train { common, out, name } => {
            let mut cfg = common.resolve()?;
            with_out(&mut cfg, &out)?;
            if let Some(n) = name {
                cfg.set("name", &n)?;
            }
            let outcome = train_run(&cfg, |line| eprintln!("{line}"))?;
            print!("{}", outcome.metrics.to_tsv());
            eprintln!("wrote {}", outcome.run_dir.display());
        }
        Command::Eval { common, split, ckpt, oracle, out } => {
            let mut cfg = common.resolve()?;
            with_out(&mut cfg, &out)?;
            print!("{}", eval_run(&cfg, split.into(), ckpt.as_deref(), oracle)?.to_tsv());
        }
        Command::CountParams { common } => {
            let cfg = common.resolve()?;
            if cfg.get("model") == "hamt-proxy" {
                println!("# hamt-proxy layer counts and widths are assumptions");
            }
            print!("{}", format_counts(&count_params(&cfg)?));
        }
        Command::GradCheck { method, seed, coords } => {
            let report = grad_check(method.parse()?, seed, coords)?;
            print!("{}", report.to_tsv(GRAD_TOLERANCE));
            return Ok(report.passes(GRAD_TOLERANCE));
        }
        Command::Ablate { which, common, out } => {
            let mut cfg = common.resolve()?;
            with_out(&mut cfg, &out)?;
            let which = match which {
                AblationArg::Components => Ablation::Components,
                AblationArg::Gates => Ablation::Gates,
            };
            print!("{}", ablate(&cfg, which)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
