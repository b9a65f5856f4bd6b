use std::path::PathBuf;
use std::process::ExitCode;

use calibre_core::config::{parse_config, parse_override};
use calibre_core::experiment::execute;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "calibre", version, about = "Personalized federated SSL simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Replace the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dot-path override, e.g. `training.rounds=5`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Regularizers to keep: any of `ln`, `lp`, comma separated, or `none`.
        #[arg(long)]
        ablation: Option<String>,
    },
}

fn ablation_overrides(spec: &str) -> Result<Vec<(String, String)>, String> {
    let mut ln = false;
    let mut lp = false;
    for term in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match term {
            "ln" => ln = true,
            "lp" => lp = true,
            "none" => {}
            other => return Err(format!("unknown ablation term `{other}` (expected ln, lp or none)")),
        }
    }
    Ok(vec![
        ("calibre.use_ln".into(), ln.to_string()),
        ("calibre.use_lp".into(), lp.to_string()),
    ])
}

fn main() -> ExitCode {
    let Command::Run { config, seed, overrides, ablation } = Cli::parse().command;
    let mut pairs = Vec::new();
    for raw in &overrides {
        match parse_override(raw) {
            Ok(p) => pairs.push(p),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    if let Some(spec) = ablation {
        match ablation_overrides(&spec) {
            Ok(p) => pairs.extend(p),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    if let Some(s) = seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    let cfg = match parse_config(&config, &pairs) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&cfg) {
        Ok(outcome) => {
            let p = &outcome.metrics.personalization;
            if let Some(s) = p.combined {
                println!(
                    "{} clients: mean accuracy {:.4}, variance {:.6}",
                    p.clients.len(),
                    s.mean,
                    s.variance
                );
            }
            println!("reports written to {}", cfg.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
