use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "rigid", version, about = "Recurrent video inversion and editing on synthetic faces")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (and RIGID_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic episode dataset.
    Synth,
    /// Fit and freeze the visibility net on a dataset.
    TrainVisnet {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit the base encoder, train the recurrent encoder and learn
    /// attribute directions.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Visibility net checkpoint; required when lambda3 > 0.
        #[arg(long)]
        visnet: Option<PathBuf>,
    },
    /// Invert a video (episode directory or PNG directory).
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Invert and edit a video along a direction.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        strength: f64,
    },
    /// Score outputs against references and write a metric report.
    Eval {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        references: PathBuf,
    },
    /// Train and score every ablation variant over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        visnet: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let global = commands::Global {
        config: cli.config,
        seed: cli.seed,
        force: cli.force,
        out: cli.out,
    };
    let result = match cli.command {
        Command::Synth => commands::synth(&global),
        Command::TrainVisnet { data } => commands::train_visnet(&global, &data),
        Command::Train { data, visnet } => commands::train(&global, &data, visnet.as_deref()),
        Command::Invert { checkpoint, input } => commands::invert(&global, &checkpoint, &input, None),
        Command::Edit {
            checkpoint,
            input,
            direction,
            strength,
        } => commands::invert(&global, &checkpoint, &input, Some((&direction, strength))),
        Command::Eval { outputs, references } => commands::eval(&global, &outputs, &references),
        Command::Ablate { data, visnet } => commands::ablate(&global, &data, &visnet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
