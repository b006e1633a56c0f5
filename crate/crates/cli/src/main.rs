mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{RawConfig, UsageError, KEYS};

const AFTER_HELP: &str = "\
Every option is also a key of the flat `key = value` config file given by
--config; command-line flags take precedence over the file. The effective
configuration is written to <out>/config.txt and can be passed back with
--config to repeat a run.

Exit status: 0 on success, 1 on usage or configuration errors, 2 when the
command fails while running.";

fn cli() -> Command {
    let mut root = Command::new("ttarag")
        .about("Retrieval-augmented QA with per-query test-time adaptation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(AFTER_HELP)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .global(true)
                .help("config file of `key = value` lines"),
        );
    for k in KEYS {
        let mut arg = Arg::new(k.name)
            .long(k.name.replace('_', "-"))
            .value_name("VALUE")
            .global(true)
            .action(ArgAction::Set)
            .help(if k.default.is_empty() {
                k.help.to_string()
            } else {
                format!("{} [default: {}]", k.help, k.default)
            });
        if let Some(a) = k.alias {
            arg = arg.visible_alias(a);
        }
        root = root.arg(arg);
    }
    root.subcommands([
        Command::new("gen-bench").about("write the synthetic benchmark: corpus, questions, pretraining texts"),
        Command::new("pretrain").about("build the vocabulary and pretrain a model checkpoint"),
        Command::new("index").about("build the BM25 index of a corpus"),
        Command::new("run").about("answer a dataset in one mode and report accuracy"),
        Command::new("sweep").about("accuracy over a learning-rate or pair-count grid"),
        Command::new("ablate").about("TTARAG against whole-passage adaptation"),
        Command::new("report").about("compare two run reports, per domain"),
    ])
}

fn configure(m: &ArgMatches) -> Result<RawConfig> {
    let mut raw = RawConfig::default();
    if let Some(f) = m.get_one::<String>("config") {
        config::load_file(&mut raw, &PathBuf::from(f))?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            raw.set(k.name, v)?;
        }
    }
    Ok(raw)
}

fn dispatch(name: &str, sub: &ArgMatches) -> Result<()> {
    let raw = configure(sub)?;
    let s = raw.resolve()?;
    match name {
        "gen-bench" => commands::gen_bench(&raw, &s),
        "pretrain" => commands::pretrain_cmd(&raw, &s),
        "index" => commands::index_cmd(&raw, &s),
        "run" => commands::run_cmd(&raw, &s),
        "sweep" => commands::sweep_cmd(&raw, &s),
        "ablate" => commands::ablate_cmd(&raw, &s),
        "report" => commands::report_cmd(&raw, &s),
        _ => unreachable!("clap only accepts registered subcommands"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    ExitCode::from(1)
                }
                _ => {
                    let msg = e.to_string();
                    let line = msg.lines().next().unwrap_or("invalid arguments");
                    eprintln!("{}", line.trim());
                    ExitCode::from(1)
                }
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.conf");
        std::fs::write(&f, "pair_budget = 2\ntop_k = 4\n").unwrap();
        let m = cli()
            .try_get_matches_from(["ttarag", "run", "--config", f.to_str().unwrap(), "--pair-budget", "0", "--lr", "0"])
            .unwrap();
        let raw = configure(m.subcommand().unwrap().1).unwrap();
        assert_eq!(raw.get("pair_budget"), "0");
        assert_eq!(raw.get("top_k"), "4");
        assert_eq!(raw.get("learning_rate"), "0");
    }
}
