use clap::{Parser, Subcommand};
use moerl::cli::gradcheck::{gradcheck_suite, GRADCHECK_TOL};
use moerl::cli::{exit_code, load_config, parse_seeds, render_text, run_experiment, summarize, worker_threads};
use moerl::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "moerl", version, about = "MoE PPO agents on MinAtar games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration over a set of seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `0..9` (inclusive), `0..=9`, `3` or `1,4,7`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Named configuration the file is layered on.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Final-window score tables from metrics CSVs.
    Summarize {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        iqm: bool,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seeds,
            out,
            preset,
        } => {
            let mut cfg = load_config(&config, preset.as_deref())?;
            if let Some(s) = seeds {
                cfg.seeds = parse_seeds(&s)?;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            let name = match &cfg.preset {
                Some(p) => p.clone(),
                None => config
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".into()),
            };
            let paths = run_experiment(&cfg, &name, worker_threads()?)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Summarize { csv, iqm, json } => {
            let groups = summarize(&csv, iqm)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&groups)?);
            } else {
                print!("{}", render_text(&groups));
            }
        }
        Command::Gradcheck => {
            let start = std::time::Instant::now();
            let mut failed = Vec::new();
            for (name, r) in gradcheck_suite()? {
                let ok = r.max_rel_err < GRADCHECK_TOL;
                println!(
                    "{} {name}: max rel err {:.3e} over {} coordinates (worst {})",
                    if ok { "PASS" } else { "FAIL" },
                    r.max_rel_err,
                    r.checked,
                    r.worst
                );
                if !ok {
                    failed.push(name);
                }
            }
            println!("{:.1}s", start.elapsed().as_secs_f64());
            if !failed.is_empty() {
                return Err(Error::Runtime(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // bad arguments count as a config error
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("moerl: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
