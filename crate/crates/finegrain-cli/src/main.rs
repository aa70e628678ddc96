use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use finegrain_cli::commands::{self, CliError, CliResult};
use finegrain_cli::config::RunConfig;

/// Discover fine-grained classes inside coarsely labeled data.
#[derive(Parser)]
#[command(name = "finegrain", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical dataset (CSV + taxonomy file).
    Generate(GenerateArgs),
    /// Train the classifier and infer class relations on one or more datasets.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint against fine labels and a reference taxonomy.
    Eval(EvalArgs),
    /// Solve the class-relation objective for a cost matrix CSV.
    Solve(SolveArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (required here or in the config file)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path).map_err(CliError::Usage)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = Some(seed);
        }
        if let Some(out) = &self.out {
            config.output.dir = out.display().to_string();
        }
        Ok(config)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    num_samples: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    num_coarse: Option<usize>,
    #[arg(long)]
    num_fine: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    within_separation: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Dataset CSV; repeat for multi-dataset training
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Number of fine-grained classes to discover
    #[arg(long)]
    num_fine: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Epochs at which the learning rate decays, e.g. --milestones 70,90
    #[arg(long, value_delimiter = ',')]
    milestones: Option<Vec<usize>>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    lambda_m: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    ema_gamma: Option<f64>,
    /// Neighbors per sample in the consistency loss
    #[arg(long)]
    neighbors: Option<usize>,
    /// Steps between relation re-solves
    #[arg(long)]
    update_period: Option<usize>,
    #[arg(long)]
    gather_multiplier: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    #[arg(long)]
    hidden_units: Option<usize>,
    /// Ablation: drop the coarse supervision term (and with it the target
    /// confidence term)
    #[arg(long)]
    disable_coarse: bool,
    /// Ablation: drop the neighbor-consistency and confidence terms
    #[arg(long)]
    disable_fine: bool,
    /// Ablation: drop the entropy regularizer
    #[arg(long)]
    disable_reg: bool,
    /// Feed raw features to the classifier instead of standardized ones
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV with fine labels
    #[arg(long)]
    data: PathBuf,
    /// Learned relation file written by `train`
    #[arg(long)]
    relations: PathBuf,
    /// Reference taxonomy file (same format as relation files)
    #[arg(long)]
    reference: PathBuf,
    /// Also write the metrics JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    /// Cost matrix CSV, one row per coarse class
    #[arg(long)]
    cost: PathBuf,
    /// Balance weight in the objective
    #[arg(long, default_value_t = 0.1)]
    lambda_m: f64,
    /// Sample count normalizing the linear term; defaults to the total mass
    #[arg(long)]
    n: Option<f64>,
    /// Use exhaustive enumeration instead of the flow solver
    #[arg(long)]
    oracle: bool,
    /// Write the solved relation file here
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate(args) => {
            let mut config = args.common.load()?;
            let section = &mut config.generate;
            if let Some(v) = args.num_samples {
                section.num_samples = v;
            }
            if let Some(v) = args.dim {
                section.dim = v;
            }
            if let Some(v) = args.num_coarse {
                section.num_coarse = v;
            }
            if let Some(v) = args.num_fine {
                section.num_fine = v;
                section.assignment = None;
            }
            if let Some(v) = args.separation {
                section.separation = v;
            }
            if let Some(v) = args.within_separation {
                section.within_separation = v;
            }
            commands::cmd_generate(&config)
        }
        Command::Train(args) => {
            let mut config = args.common.load()?;
            if let Some(v) = args.num_fine {
                config.model.num_fine = Some(v);
            }
            if let Some(v) = args.hidden_layers {
                config.model.hidden_layers = v;
            }
            if let Some(v) = args.hidden_units {
                config.model.hidden_units = v;
            }
            if let Some(v) = args.epochs {
                config.train.epochs = v;
            }
            if let Some(v) = args.batch_size {
                config.train.batch_size = v;
            }
            if let Some(v) = args.learning_rate {
                config.train.learning_rate = v;
            }
            if let Some(v) = args.momentum {
                config.train.momentum = v;
            }
            if let Some(v) = args.milestones {
                config.train.milestones = v;
            }
            if let Some(v) = args.lr_decay {
                config.train.lr_decay = v;
            }
            if let Some(v) = args.warmup_epochs {
                config.train.warmup_epochs = v;
            }
            if let Some(v) = args.gather_multiplier {
                config.train.gather_multiplier = v;
            }
            if let Some(v) = args.lambda1 {
                config.loss.lambda1 = v;
            }
            if let Some(v) = args.lambda2 {
                config.loss.lambda2 = v;
            }
            if let Some(v) = args.lambda3 {
                config.loss.lambda3 = v;
            }
            if let Some(v) = args.lambda_m {
                config.loss.lambda_m = v;
            }
            if let Some(v) = args.temperature {
                config.loss.temperature = v;
            }
            if let Some(v) = args.ema_gamma {
                config.loss.ema_gamma = v;
            }
            if let Some(v) = args.neighbors {
                config.loss.neighbors = v;
            }
            if let Some(v) = args.update_period {
                config.loss.update_period = v;
            }
            if args.disable_coarse {
                config.train.enable_coarse = false;
            }
            if args.disable_fine {
                config.train.enable_fine = false;
            }
            if args.disable_reg {
                config.train.enable_reg = false;
            }
            if args.no_standardize {
                config.train.standardize = false;
            }
            commands::cmd_train(&config, &args.data)
        }
        Command::Eval(args) => commands::cmd_eval(
            &args.checkpoint,
            &args.data,
            &args.relations,
            &args.reference,
            args.out.as_deref(),
        ),
        Command::Solve(args) => commands::cmd_solve(
            &args.cost,
            args.lambda_m,
            args.n,
            args.oracle,
            args.out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
