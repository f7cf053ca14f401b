use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use klmpc::pipeline::Pipeline;
use klmpc::Error;

#[derive(Parser)]
#[command(name = "klmpc", version, about = "Koopman bilinear identification and Lyapunov-based MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the unforced plant and write snapshots.csv.
    GenData(StageArgs),
    /// Fit the bilinear model from snapshots.csv and write model.json.
    Identify(StageArgs),
    /// Synthesize the CLF and its level sets from model.json and write clf.json.
    SynthesizeClf(StageArgs),
    /// Run the closed-loop experiments and write one CSV per run.
    Simulate(StageArgs),
    /// Summarize the artifacts into report.json.
    Report(StageArgs),
    /// All stages in order.
    Run(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, args) = match &cli.command {
        Command::GenData(a) => ("gen-data", a),
        Command::Identify(a) => ("identify", a),
        Command::SynthesizeClf(a) => ("synthesize-clf", a),
        Command::Simulate(a) => ("simulate", a),
        Command::Report(a) => ("report", a),
        Command::Run(a) => ("run", a),
    };
    match run(&cli.command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "stage": stage,
                "kind": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(command: &Command, args: &StageArgs) -> Result<(), Error> {
    let pipeline = Pipeline::from_path(&args.config, args.out.clone())?;
    match command {
        Command::GenData(_) => pipeline.gen_data().map(drop),
        Command::Identify(_) => pipeline.identify().map(drop),
        Command::SynthesizeClf(_) => pipeline.synthesize_clf().map(drop),
        Command::Simulate(_) => pipeline.simulate().map(drop),
        Command::Report(_) => pipeline.report().map(drop),
        Command::Run(_) => pipeline.run().map(drop),
    }
}
