//! `crssim`: run the corpus, simulation, dialogue and evaluation stages from
//! a config file.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use crssim::Error;

use config::LmMode;
use pipeline::{Command, Pipeline};

#[derive(Debug, Parser)]
#[command(name = "crssim", version, about = "Conversational recommender simulation pipeline")]
struct Cli {
    /// Stage to run.
    #[arg(value_enum)]
    command: Command,

    /// TOML config file, or a manifest.json from an earlier run.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set agent.max_turns=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Generate a synthetic corpus at the configured data paths first.
    #[arg(long)]
    synthetic: bool,

    /// Worker threads.
    #[arg(long)]
    parallelism: Option<usize>,

    #[arg(long, value_enum)]
    lm: Option<LmMode>,

    #[arg(long)]
    seed: Option<u64>,

    /// Users to simulate and evaluate.
    #[arg(long)]
    users: Option<usize>,

    /// Dialogue prefix lengths to evaluate, `a..b` or `n`.
    #[arg(long)]
    turns: Option<String>,

    /// NDCG relevance mode: `graded` or `binary`.
    #[arg(long)]
    relevance: Option<String>,
}

impl Cli {
    /// Named flags become overrides so that they land in the manifest.
    fn flag_overrides(&self) -> Result<Vec<String>, Error> {
        let mut out = Vec::new();
        if let Some(p) = self.parallelism {
            out.push(format!("parallelism={p}"));
        }
        if let Some(lm) = self.lm {
            let name = match lm {
                LmMode::Mock => "mock",
                LmMode::Oracle => "oracle",
                LmMode::Http => "http",
            };
            out.push(format!("lm.mode=\"{name}\""));
        }
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let Some(u) = self.users {
            out.push(format!("simulation.users={u}"));
            out.push(format!("eval.users={u}"));
        }
        if let Some(t) = &self.turns {
            out.push(format!("eval.turns=\"{t}\""));
        }
        if let Some(r) = &self.relevance {
            match r.as_str() {
                "graded" | "binary" => out.push(format!("eval.relevance={{mode=\"{r}\"}}")),
                _ => return Err(Error::Config(format!("--relevance: expected graded or binary, found `{r}`"))),
            }
        }
        Ok(out)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Lm(_) => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut table = match &cli.config {
        Some(path) => config::load_table(path)?,
        None => toml::Table::new(),
    };
    for o in cli.overrides.iter().cloned().chain(cli.flag_overrides()?) {
        config::apply_override(&mut table, &o)?;
    }
    let config = config::resolve(table)?;
    let pipeline = Pipeline::new(config, cli.synthetic);
    for name in pipeline.run(cli.command)? {
        println!("{}", pipeline.config.paths.out_dir.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crssim {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
