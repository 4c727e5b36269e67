//! `dgrade`: one entry point for every stage of the grading pipeline.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 when a stage
//! runs before the stage it depends on, 4 for runtime failures.

mod args;
mod failure;
mod session;
mod stages;
mod toy;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use serde_json::{json, Value};

use args::{Cli, Command};
use failure::Result;
use session::Session;

/// What a subcommand prints: text for people, JSON with `--json`.
pub struct Output {
    pub text: String,
    pub json: Value,
}

impl Output {
    pub fn new(text: impl Into<String>, json: Value) -> Self {
        Output {
            text: text.into(),
            json,
        }
    }

    pub fn plan(steps: Vec<String>) -> Self {
        let text = steps
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{:>3}. {s}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        Output {
            text: format!("plan:\n{text}"),
            json: json!({"dry_run": true, "plan": steps}),
        }
    }
}

/// Writes a line to stdout, ignoring a closed pipe.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn run(cli: &Cli) -> Result<Output> {
    match &cli.command {
        Command::Synth(a) => stages::synth(cli, a),
        Command::Prep(a) => stages::prep(&Session::load(cli)?, a),
        Command::Eval(a) => stages::eval(&Session::load(cli)?, a),
        Command::Select(a) => stages::select(&Session::load(cli)?, a),
        Command::Genqa(a) => stages::genqa(&Session::load(cli)?, a),
        Command::Review(a) => stages::review(&Session::load(cli)?, a),
        Command::Export(a) => stages::export(&Session::load(cli)?, a),
        Command::Report(a) => stages::report(&Session::load(cli)?, a),
        Command::TrainToy(a) => toy::train_toy(&Session::load_or_default(cli)?, a),
        Command::Gradecheck(a) => toy::gradecheck(&Session::load_or_default(cli)?, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            if cli.json {
                emit(&out.json.to_string());
            } else if !out.text.is_empty() {
                emit(&out.text);
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            if cli.json {
                emit(
                    &json!({"error": format!("{:#}", f.error), "kind": f.kind.name(), "exit_code": f.kind.code()})
                        .to_string(),
                );
            }
            f.exit_code()
        }
    }
}
