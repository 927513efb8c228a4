//! `mpa`: synthesize scenes, train, infer, evaluate and run the aggregation ablation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use commands::CliError;
use config::RunConfig;

const SUBCOMMANDS: [(&str, &str); 5] = [
    ("synth", "Generate the synthetic train and val scene sets"),
    ("train", "Train a model on the train split"),
    ("infer", "Write per-scene predictions for a split"),
    ("eval", "Score written predictions against ground truth"),
    ("ablate", "Compare NMS and aggregation modes on a split"),
];

/// Every configuration key becomes a `--kebab-case <value>` flag.
fn config_keys() -> Vec<String> {
    let value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    value.as_object().expect("config is an object").keys().filter(|k| *k != "force").cloned().collect()
}

fn cli(keys: &[String]) -> Command {
    let mut cmd = Command::new("mpa")
        .about("Multi-proposal aggregation for 3D instance segmentation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("config").long("config").global(true).value_name("PATH").help("JSON configuration file"))
        .arg(
            Arg::new("force")
                .long("force")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("Overwrite existing outputs"),
        );
    for key in keys {
        let flag = key.replace('_', "-");
        cmd = cmd.arg(Arg::new(key.clone()).long(flag).global(true).value_name("VALUE").hide_short_help(true));
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd
}

fn run(matches: &ArgMatches, keys: &[String]) -> Result<(), CliError> {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let mut flags: Vec<(String, String)> = keys
        .iter()
        .filter_map(|k| sub.get_one::<String>(k).map(|v| (k.clone(), v.clone())))
        .collect();
    if sub.get_flag("force") {
        flags.push(("force".into(), "true".into()));
    }
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let config = config::resolve(file.as_deref(), &flags).map_err(CliError::Usage)?;
    if config.jobs == 0 {
        return Err(CliError::Usage("jobs must be at least 1".into()));
    }
    match name {
        "synth" => commands::synth(&config),
        "train" => commands::train_cmd(&config),
        "infer" => commands::infer_cmd(&config),
        "eval" => commands::eval_cmd(&config),
        "ablate" => commands::ablate_cmd(&config),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MPA_LOG", "info")).init();
    let keys = config_keys();
    let matches = match cli(&keys).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&matches, &keys) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
