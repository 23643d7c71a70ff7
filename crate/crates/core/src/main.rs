use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use lstmn::config::RunConfig;
use lstmn::train::{dump_attention, load_model, run_eval, train};
use lstmn::{Error, Result};

const USAGE: &str = "usage:
  lstmn train [--config PATH] [--out DIR] [--seed N] [--KEY VALUE ...]
  lstmn eval --checkpoint PATH [--config PATH] [--KEY VALUE ...]
  lstmn dump-attention --checkpoint PATH (--input TEXT | --input-file PATH) [--out PATH]";

#[derive(Debug, Default)]
struct Args {
    command: String,
    config: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    input: Option<String>,
    input_file: Option<PathBuf>,
    overrides: BTreeMap<String, String>,
}

fn parse_args(raw: &[String]) -> Result<Args> {
    let mut it = raw.iter();
    let command = it
        .next()
        .ok_or_else(|| Error::config("command", "missing command"))?
        .clone();
    let mut args = Args {
        command,
        ..Args::default()
    };
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            return Err(Error::config(flag.as_str(), "expected a --flag"));
        };
        let value = it
            .next()
            .ok_or_else(|| Error::config(key, "missing value"))?
            .clone();
        match key {
            "config" => args.config = Some(value.into()),
            "checkpoint" => args.checkpoint = Some(value.into()),
            "out" => args.out = Some(value.into()),
            "input" => args.input = Some(value),
            "input-file" => args.input_file = Some(value.into()),
            other => {
                args.overrides.insert(other.replace('-', "_"), value);
            }
        }
    }
    Ok(args)
}

/// The config file named on the command line, else the one saved beside
/// the checkpoint.
fn config_for(args: &Args) -> Result<RunConfig> {
    let beside = args
        .checkpoint
        .as_deref()
        .map(|c| c.parent().unwrap_or(Path::new(".")).join("config.txt"))
        .filter(|p| p.exists());
    let path = args.config.clone().or(beside);
    RunConfig::load(path.as_deref(), &args.overrides)
}

fn require_checkpoint(args: &Args) -> Result<&Path> {
    args.checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("checkpoint", "--checkpoint is required"))
}

fn run(args: &Args) -> Result<()> {
    match args.command.as_str() {
        "train" => {
            let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("run"));
            let (_, report) = train(&cfg, Some(&out))?;
            if let Some(best) = report.best {
                println!("{}", best.record(&cfg.task.to_string(), "valid"));
            }
            if let Some(test) = report.test {
                println!("{}", test.record(&cfg.task.to_string(), "test"));
            }
            println!("checkpoint={}", out.join("checkpoint.json").display());
            Ok(())
        }
        "eval" => {
            let checkpoint = require_checkpoint(args)?;
            let cfg = config_for(args)?;
            let metrics = run_eval(&cfg, checkpoint)?;
            println!("{}", metrics.record(&cfg.task.to_string(), &cfg.eval_split));
            Ok(())
        }
        "dump-attention" => {
            let checkpoint = require_checkpoint(args)?;
            let cfg = config_for(args)?;
            let text = match (&args.input, &args.input_file) {
                (Some(t), _) => t.clone(),
                (None, Some(path)) => {
                    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?
                }
                (None, None) => {
                    return Err(Error::config(
                        "input",
                        "--input or --input-file is required",
                    ))
                }
            };
            let (model, vocab) = load_model(&cfg, checkpoint)?;
            let dump = dump_attention(&cfg, &model, &vocab, text.trim_end_matches('\n'))?;
            match &args.out {
                Some(path) => std::fs::write(path, dump).map_err(|e| Error::io(path, e))?,
                None => print!("{dump}"),
            }
            Ok(())
        }
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(Error::config(
            "command",
            format!("unknown command `{other}`"),
        )),
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    match parse_args(&raw).and_then(|a| run(&a)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
