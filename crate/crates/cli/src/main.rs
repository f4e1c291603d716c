use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixrec_cli::pipeline::Pipeline;
use mixrec_cli::synth::make_synthetic_corpus;
use mixrec_cli::{CliResult, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "mixrec", version, about = "Adapter mixture-of-experts sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize the catalog and index interactions
    Ingest(Common),
    /// Mine hard negatives per item
    HardSamples(Common),
    /// Pre-train the collaborative embeddings
    TrainCf(Common),
    /// Search adapter placements
    Search(Common),
    /// Train with the searched genome
    Train(Common),
    /// Rank test targets and write metrics
    Eval(Common),
    /// Summarize artifacts in the output directory
    Report(Common),
    /// Run several stages in order
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ingest,hard-samples,search,train,eval")]
        stages: String,
    },
    /// Write a synthetic catalog and interaction log
    Synth {
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn pipeline(common: &Common) -> CliResult<Pipeline> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(Pipeline::new(cfg, &common.out))
}

fn synth(items: usize, users: usize, seed: u64, out: &Path) -> CliResult<()> {
    make_synthetic_corpus(items, users, seed)?.write(out)?;
    println!("wrote {} items and {} users to {}", items, users, out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let single = |common: &Common, stage: Stage| pipeline(common)?.run(&[stage]);
    match cli.command {
        Command::Ingest(c) => single(&c, Stage::Ingest),
        Command::HardSamples(c) => single(&c, Stage::HardSamples),
        Command::TrainCf(c) => single(&c, Stage::TrainCf),
        Command::Search(c) => single(&c, Stage::Search),
        Command::Train(c) => single(&c, Stage::Train),
        Command::Eval(c) => {
            single(&c, Stage::Eval)?;
            print!("{}", pipeline(&c)?.report()?);
            Ok(())
        }
        Command::Report(c) => {
            print!("{}", pipeline(&c)?.report()?);
            Ok(())
        }
        Command::Run { common, stages } => pipeline(&common)?.run(&Stage::parse_list(&stages)?),
        Command::Synth { items, users, seed, out } => synth(items, users, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
