//! Command-line front end: argument parsing, config resolution, manifests
//! and metrics files.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod synth;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands::{run_command, Failure, COMMANDS};
use crate::config::{ConfigError, RunConfig, KEYS};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_STAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

fn about(name: &str) -> &'static str {
    match name {
        "pretrain" => "Pre-train the encoder on both tables",
        "block" => "Build kNN candidate pairs with a pre-trained encoder",
        "pseudolabel" => "Pseudo-label candidate pairs and merge them with manual labels",
        "finetune" => "Fine-tune the pairwise matcher",
        "predict" => "Predict matches over the candidate pairs",
        "em" => "Run the whole entity matching pipeline",
        "clean" => "Select corrections for dirty cells",
        "colmatch" => "Cluster columns by predicted matches",
        "eval" => "Score existing outputs against the available truth",
        _ => "",
    }
}

fn flag(name: &str) -> String {
    name.replace('_', "-")
}

fn cli() -> Command {
    let mut root = Command::new("contramatch")
        .version(VERSION)
        .about("Contrastive embeddings for entity matching, error correction and column matching")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for name in COMMANDS {
        let mut sub = Command::new(name).about(about(name)).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value config file (a manifest also works)"),
        );
        for spec in KEYS {
            sub = sub.arg(
                Arg::new(spec.name)
                    .long(flag(spec.name))
                    .value_name("VALUE")
                    .help(format!("{} [default: {}]", spec.help, display_default(spec.default)))
                    .action(ArgAction::Set),
            );
        }
        root = root.subcommand(sub);
    }
    root.subcommand(synth::command())
}

fn display_default(d: &str) -> &str {
    if d.is_empty() {
        "unset"
    } else {
        d
    }
}

/// Defaults, then `--config`, then the environment, then flags.
pub fn resolve(
    matches: &ArgMatches,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        cfg.merge_file(Path::new(path))?;
    }
    cfg.merge_env(env)?;
    for spec in KEYS {
        if let Some(v) = matches.get_one::<String>(spec.name) {
            cfg.set(spec.name, v, &format!("--{}", flag(spec.name)))?;
        }
    }
    Ok(cfg)
}

pub fn manifest_text(command: &str, cfg: &RunConfig) -> String {
    format!(
        "# contramatch {VERSION}\n# command = {command}\n# config_sha256 = {}\n# seed = {}\n{}",
        cfg.sha256(),
        cfg.seed(),
        cfg.render()
    )
}

pub fn manifest_path(cfg: &RunConfig, command: &str) -> PathBuf {
    cfg.out_dir().join(format!("{command}.manifest"))
}

pub fn metrics_path(cfg: &RunConfig, command: &str) -> PathBuf {
    cfg.out_dir().join(format!("{command}.metrics"))
}

fn execute(command: &str, cfg: &RunConfig) -> Result<(), Failure> {
    let threads = cfg.usize("threads");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ConfigError::invalid("threads", cfg.get("threads"), e.to_string()))?;
    let metrics = pool.install(|| run_command(command, cfg))?;
    let io_fail = |e: std::io::Error| Failure::Stage {
        stage: "write".into(),
        error: e.into(),
    };
    std::fs::write(manifest_path(cfg, command), manifest_text(command, cfg)).map_err(io_fail)?;
    metrics.write(&metrics_path(cfg, command)).map_err(io_fail)?;
    print!("{}", metrics.render());
    Ok(())
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I, env: impl IntoIterator<Item = (String, String)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    if name == synth::NAME {
        return synth::run(sub);
    }
    let cfg = match resolve(sub, env) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match execute(name, &cfg) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(f) => {
            eprintln!("error: {f}");
            EXIT_STAGE
        }
    }
}
