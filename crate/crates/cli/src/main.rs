//! `passport-forge`: train passport-protected models, attack them, and
//! aggregate the runs into report tables.
//!
//! Every subcommand accepts `--config FILE` plus one `--<key> VALUE` flag
//! per configuration key (underscores written as dashes); flags override the
//! file. Usage errors exit with status 2, run failures with status 1.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Arg, ArgMatches, Command};
use forge_core::harness::{self, ExperimentConfig, Table, KEYS};

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("train-baseline", "Train an unprotected model"),
    ("train-protected", "Train a passport-protected model; writes checkpoint.bin and passport.bin"),
    ("verify", "Check a checkpoint against a passport file"),
    ("attack", "Forge substitute affine factors for a released checkpoint"),
    ("sweep-signs", "Flip authorized scale signs, retrain, and record accuracy and sign agreement"),
    ("wm-embed", "Train a model carrying a weight watermark; writes checkpoint.bin and key.bin"),
    ("wm-attack", "Forge a new watermark into a watermarked checkpoint"),
    ("eval", "Test accuracy of a checkpoint"),
    ("report", "Aggregate run directories into a CSV table"),
];

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut cmd = Command::new("passport-forge")
        .about("Passport-layer protection experiments and substitution attacks")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config").long("config").value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help("key = value configuration file"),
        );
        for k in KEYS {
            let help = if k.default.is_empty() { k.help.to_string() } else { format!("{} [default: {}]", k.help, k.default) };
            sub = sub.arg(Arg::new(k.name).long(flag(k.name)).value_name("VALUE").help(help));
        }
        if name == "report" {
            sub = sub
                .arg(Arg::new("table").long("table").value_name("NAME").default_value("runs").help("runs, table1, table2 or ablation"))
                .arg(Arg::new("root").long("root").value_name("DIR").value_parser(clap::value_parser!(PathBuf)).help("directory of run families [default: the `out` key]"))
                .arg(Arg::new("output").long("output").value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help("write the table here instead of stdout"));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn resolve(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v).with_context(|| format!("--{}", flag(k.name)))?;
        }
    }
    Ok(cfg)
}

fn print_runs(runs: &[harness::RunSummary]) {
    for r in runs {
        match r.bdr {
            Some(b) => println!("seed {}: acc {:.4} bdr {:.4} -> {}", r.seed, r.acc, b, r.dir.display()),
            None => println!("seed {}: acc {:.4} -> {}", r.seed, r.acc, r.dir.display()),
        }
    }
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m)?;
    match name {
        "train-baseline" => print_runs(&harness::run_train_baseline(&cfg)?),
        "train-protected" => print_runs(&harness::run_train_protected(&cfg)?),
        "attack" => print_runs(&harness::run_attack(&cfg)?),
        "verify" => {
            let v = harness::verify_files(&cfg)?;
            println!("pass={} acc={:.4} sign_match={:.4}", v.pass, v.acc, v.sign_match);
        }
        "sweep-signs" => {
            for (dir, points) in harness::run_sweep(&cfg)? {
                for p in points {
                    println!("seed {}: flips {} acc {:.4} coincidence {:.4}", dir.seed, p.flips, p.acc, p.coincidence);
                }
                println!("-> {}", dir.path.display());
            }
        }
        "wm-embed" => print_runs(&harness::run_wm_embed(&cfg)?),
        "wm-attack" => {
            for (dir, r) in harness::run_wm_attack(&cfg)? {
                println!(
                    "seed {}: acc {:.4} sdr_new {:.4} bdr_original {:.4} audit_passed={} -> {}",
                    dir.seed,
                    r.acc,
                    r.sdr_new,
                    r.bdr_original,
                    r.audit_passed,
                    dir.path.display()
                );
            }
        }
        "eval" => println!("acc={:.4}", harness::eval_file(&cfg)?),
        "report" => {
            let table: Table = m.get_one::<String>("table").expect("has default").parse()?;
            let root = m.get_one::<PathBuf>("root").cloned().unwrap_or_else(|| PathBuf::from(cfg.get("out")));
            let csv = harness::report(&root, table).with_context(|| format!("reading runs under {}", root.display()))?;
            match m.get_one::<PathBuf>("output") {
                Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        other => unreachable!("subcommand {other} is not registered"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
