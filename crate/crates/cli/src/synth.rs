//! `synth`: write planted-truth fixtures plus a ready-to-run config.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use clap::{Arg, ArgMatches, Command};
use contramatch::tasks::cleaning::{write_candidates, write_corrections, write_dirty_table};
use contramatch::tasks::columns::{write_column_types, write_columns, ColumnItem};
use contramatch::tasks::synthetic::{generate_cleaning, generate_columns, generate_em, SyntheticEmConfig};

use crate::{EXIT_CONFIG, EXIT_OK, EXIT_STAGE};

pub const NAME: &str = "synth";

pub fn command() -> Command {
    Command::new(NAME)
        .about("Write a synthetic fixture and a matching run.cfg")
        .arg(
            Arg::new("kind")
                .long("kind")
                .value_parser(["em", "clean", "columns"])
                .default_value("em"),
        )
        .arg(Arg::new("out_dir").long("out-dir").value_name("DIR").required(true))
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_parser(clap::value_parser!(u64))
                .default_value("0"),
        )
}

fn write_fixture(kind: &str, dir: &Path, seed: u64) -> contramatch::Result<String> {
    std::fs::create_dir_all(dir)?;
    let d = |f: &str| dir.join(f).display().to_string();
    let out = d("out");
    Ok(match kind {
        "em" => {
            let s = generate_em(&SyntheticEmConfig {
                seed,
                ..Default::default()
            });
            s.dataset.save(&dir.join("data"))?;
            format!(
                "data_dir = {}\nout_dir = {out}\nk = 5\nrho = 0.6\nseed = {seed}\n",
                d("data")
            )
        }
        "clean" => {
            let inst = generate_cleaning(200, 0.2, 2, seed);
            write_dirty_table(&dir.join("dirty.csv"), &inst.rows)?;
            write_candidates(BufWriter::new(File::create(dir.join("candidates.csv"))?), &inst.cells)?;
            write_corrections(
                BufWriter::new(File::create(dir.join("truth.csv"))?),
                inst.truth.as_deref().unwrap_or_default(),
            )?;
            format!(
                "dirty_table = {}\ncleaning_candidates = {}\ncleaning_truth = {}\nout_dir = {out}\nseed = {seed}\n",
                d("dirty.csv"),
                d("candidates.csv"),
                d("truth.csv")
            )
        }
        _ => {
            let cols = generate_columns(6, 10, 20, seed);
            let items: Vec<ColumnItem> = cols
                .iter()
                .map(|c| ColumnItem {
                    id: c.id.clone(),
                    values: c.values.clone(),
                })
                .collect();
            write_columns(BufWriter::new(File::create(dir.join("columns.csv"))?), &items)?;
            let types: Vec<(String, String)> = cols.iter().map(|c| (c.id.clone(), c.semantic_type.clone())).collect();
            write_column_types(BufWriter::new(File::create(dir.join("types.csv"))?), &types)?;
            format!(
                "columns = {}\ncolumn_types = {}\nda = cell_shuffle\nout_dir = {out}\nseed = {seed}\n",
                d("columns.csv"),
                d("types.csv")
            )
        }
    })
}

pub fn run(m: &ArgMatches) -> i32 {
    let kind = m.get_one::<String>("kind").expect("defaulted");
    let dir = Path::new(m.get_one::<String>("out_dir").expect("required"));
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    match write_fixture(kind, dir, seed) {
        Ok(cfg) => match std::fs::write(dir.join("run.cfg"), cfg) {
            Ok(()) => {
                println!("{}", dir.join("run.cfg").display());
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: stage `synth` failed: {e}");
                EXIT_STAGE
            }
        },
        Err(contramatch::Error::InvalidArgument(msg)) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: stage `synth` failed: {e}");
            EXIT_STAGE
        }
    }
}
