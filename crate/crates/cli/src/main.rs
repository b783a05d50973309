mod cache;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;
use pipeline::{tag, Ctx, StageError};

#[derive(Parser)]
#[command(name = "mobs", version, about = "Model observers for search tasks in simulated volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/test phantoms.
    Generate(Common),
    /// Train templates (or calibrate cnn_post thresholds).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        observer: Option<String>,
    },
    /// Search scores on the test split.
    Score(Common),
    /// AUC against the number of searched locations.
    Lke {
        #[command(flatten)]
        common: Common,
        /// Comma-separated N grid, e.g. 1,128,1000.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
    },
    /// Bootstrap AUC comparisons.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Pairs `a:b`; repeatable.
        #[arg(long)]
        compare: Option<Vec<String>>,
    },
    /// Overlap of model response maps with reader time.
    Gaze(Common),
    /// Every stage, then summary.json.
    Run(Common),
}

fn context(c: &Common) -> Result<Ctx, StageError> {
    if let Some(n) = c.jobs {
        tag(
            "setup",
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads"),
        )?;
    }
    let mut cfg = tag("config", RunConfig::load(&c.config))?;
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    Ok(Ctx::new(cfg, c.out.clone()))
}

fn print<T: Serialize>(stage: &'static str, value: &T) -> Result<(), StageError> {
    let text = tag(stage, serde_json::to_string_pretty(value).map_err(Into::into))?;
    println!("{text}");
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), StageError> {
    match cmd {
        Command::Generate(c) => {
            let ctx = context(&c)?;
            print("dataset", &tag("dataset", ctx.generate())?)
        }
        Command::Train { common, observer } => {
            let ctx = context(&common)?;
            print("train", &tag("train", ctx.train(observer.as_deref()))?)
        }
        Command::Score(c) => {
            let ctx = context(&c)?;
            let table = tag("score", ctx.score())?;
            println!("{} scores written", table.rows.len());
            Ok(())
        }
        Command::Lke { common, n } => {
            let ctx = context(&common)?;
            print("lke", &tag("lke", ctx.lke(n))?)
        }
        Command::Stats { common, compare } => {
            let ctx = context(&common)?;
            print("stats", &tag("stats", ctx.stats(compare))?)
        }
        Command::Gaze(c) => {
            let ctx = context(&c)?;
            print("gaze", &tag("gaze", ctx.gaze())?)
        }
        Command::Run(c) => {
            let ctx = context(&c)?;
            pipeline::run_all(&ctx)?;
            println!("summary written to {}", ctx.out.join("summary.json").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {:#}", e.stage, e.source);
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
