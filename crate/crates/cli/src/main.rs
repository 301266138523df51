use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nelson_core::io::{self, ExperimentKind};
use nelson_core::Error;

/// Stochastic-quantization experiment runner.
#[derive(Parser)]
#[command(name = "nelsonlab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run any spec file.
    Run(RunArgs),
    /// Single runs: simulate, ou, node_crossing (default simulate).
    Simulate(RunArgs),
    /// Parameter sweeps: beta_sweep, velocity_profiles (default beta_sweep).
    Sweep(RunArgs),
    /// Measurements and correlations: two_time, decoupling (default two_time).
    Measure(RunArgs),
    /// Scalar field checks.
    Field(RunArgs),
    /// Matter and potential spectra.
    Spectrum(RunArgs),
    /// List states, processes and experiment kinds.
    Catalog {
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Check that all outputs under a directory carry their spec hash.
    Trace { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Spec file (TOML). Without one the subcommand's default kind is used.
    spec: Option<PathBuf>,
    /// Override a spec key, e.g. --set constants.omega=2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate and print the resolved spec without running.
    #[arg(long)]
    dry_run: bool,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

fn run(args: RunArgs, allowed: &[ExperimentKind]) -> Result<(), Error> {
    let text = match &args.spec {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut sets = args.set;
    let doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Parse(e.message().to_string()))?;
    let has_kind = doc.contains_key("kind") || sets.iter().any(|s| s.trim_start().starts_with("kind="));
    if !has_kind {
        let first = allowed.first().ok_or_else(|| Error::config("spec needs a 'kind'"))?;
        sets.insert(0, format!("kind=\"{}\"", first.name()));
    }
    if let Some(t) = args.threads {
        sets.push(format!("threads={t}"));
    }
    if let Some(o) = &args.out {
        sets.push(format!("output_dir={}", toml::Value::String(o.display().to_string())));
    }
    let spec = io::parse_spec_with(&text, &sets)?;
    if !allowed.is_empty() && !allowed.contains(&spec.kind) {
        let names: Vec<&str> = allowed.iter().map(|k| k.name()).collect();
        return Err(Error::config(format!(
            "kind '{}' is not handled by this subcommand (expected one of {})",
            spec.kind.name(),
            names.join(", ")
        )));
    }
    if args.dry_run {
        print!("{}", spec.to_toml()?);
        println!("# spec_hash = {}", spec.hash());
        return Ok(());
    }
    let out = io::run_experiment(&spec)?;
    println!("{}", out.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    use ExperimentKind as K;
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Run(a) => run(a, &[]),
        Cmd::Simulate(a) => run(a, &[K::Simulate, K::Ou, K::NodeCrossing]),
        Cmd::Sweep(a) => run(a, &[K::BetaSweep, K::VelocityProfiles]),
        Cmd::Measure(a) => run(a, &[K::TwoTime, K::Decoupling]),
        Cmd::Field(a) => run(a, &[K::Field]),
        Cmd::Spectrum(a) => run(a, &[K::Spectrum]),
        Cmd::Catalog { json } => {
            let cat = io::list_catalog();
            if json {
                println!("{}", serde_json::to_string_pretty(&cat).expect("catalog serializes"));
            } else {
                for e in &cat {
                    println!("{:<22} {:<10} {}", e.name, e.category, e.doc);
                    for p in &e.params {
                        println!("    {:<26} {:<12} default {}  {}", p.name, p.kind, p.default, p.doc);
                    }
                }
            }
            Ok(())
        }
        Cmd::Trace { dir } => io::trace(&dir).and_then(|rep| {
            for m in &rep.mismatches {
                eprintln!("mismatch: {m}");
            }
            println!("{} run directories, {} files checked, {} mismatches", rep.run_dirs, rep.files_checked, rep.mismatches.len());
            if rep.mismatches.is_empty() {
                Ok(())
            } else {
                Err(Error::Trace(format!("{} mismatched files", rep.mismatches.len())))
            }
        }),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
