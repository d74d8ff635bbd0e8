//! Argument parsing. Every configuration key is a global flag, so
//! `mp3 pretrain --eta 0.5` and `eta = 0.5` under `[train]` are equivalent;
//! flags win over the `--config` file.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches};

use crate::commands::{run, Command};
use crate::config::{RunConfig, KEYS};
use crate::error::Result;

pub const THREADS_ENV: &str = "MP3_THREADS";

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

pub fn command() -> clap::Command {
    let mut app = clap::Command::new("mp3")
        .about("Masked position prediction pretraining for vision transformers")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(format!(
            "Set {THREADS_ENV} to cap the matmul worker threads."
        ))
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("sectioned key = value file applied before the flags"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .global(true)
                .value_name("DIR")
                .default_value("out")
                .value_parser(clap::value_parser!(PathBuf))
                .help("output directory"),
        );
    let defaults = RunConfig::default();
    for (section, key, help) in KEYS {
        let default = defaults.get(key).unwrap_or_default();
        let help = if default.is_empty() {
            help.to_string()
        } else {
            format!("{help} [default: {default}]")
        };
        app = app.arg(
            Arg::new(key.to_string())
                .long(flag(key))
                .global(true)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help_heading(format!("[{section}]"))
                .help(help),
        );
    }
    for c in Command::ALL {
        app = app.subcommand(clap::Command::new(c.name()).about(c.about()));
    }
    app
}

/// Configuration from `--config` and the key flags of one subcommand's matches.
pub fn resolve(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (_, key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn execute(cmd: Command, m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m)?;
    let out = m
        .get_one::<PathBuf>("out")
        .cloned()
        .unwrap_or_else(|| PathBuf::from("out"));
    let report = run(cmd, &cfg, &out)?;
    for line in &report.summary {
        println!("{line}");
    }
    println!(
        "wrote {} files to {}",
        report.outputs.len() + 1,
        out.display()
    );
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.trim().parse::<usize>() {
            Ok(n) => mp3_core::set_max_threads(n),
            Err(_) => {
                eprintln!("error: {THREADS_ENV} must be a whole number, got {v:?}");
                return 2;
            }
        }
    }
    let Some((name, sub)) = matches.subcommand() else {
        return 2;
    };
    let cmd = Command::parse(name).expect("subcommands come from Command::ALL");
    match execute(cmd, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn flags_override_config_keys() {
        let m = command()
            .try_get_matches_from(["mp3", "pretrain", "--eta", "0.5", "--hint-fraction", "0.1"])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let cfg = resolve(sub).unwrap();
        assert_eq!((cfg.eta, cfg.hint_fraction), (0.5, 0.1));
    }
}
