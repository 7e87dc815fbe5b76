//! Config loading, multi-seed orchestration, summaries and the gradient
//! suite behind the `moerl` binary.

mod config;
pub mod gradcheck;
mod presets;
mod summary;

pub use config::{load_config, parse_seeds, resolve, ExperimentConfig};
pub use presets::{preset, preset_names, PRESET_ROUTER_ENTROPY};
pub use summary::{final_window, mean_stderr, render_text, segment_rows, summarize, GroupSummary, ScoreLine, FINAL_WINDOW};

use crate::error::{Error, Result};
use crate::harness::{run, RunOptions};
use crate::metrics::MetricsSink;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Worker count from `MOERL_THREADS`, else the machine's parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("MOERL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!("MOERL_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn csv_path(out: &Path, name: &str, seed: u64) -> PathBuf {
    out.join(format!("{name}_{seed}.csv"))
}

/// Writes `manifest.json` then runs every seed on at most `threads`
/// workers. Returns the CSV paths in seed order.
pub fn run_experiment(cfg: &ExperimentConfig, name: &str, threads: usize) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut manifest = cfg.clone();
    manifest.code_version = Some(CODE_VERSION.to_string());
    std::fs::write(
        cfg.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;

    let run_cfg = cfg.run_config();
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let workers = threads.clamp(1, cfg.seeds.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = cfg.seeds.get(i) else { break };
                let path = csv_path(&cfg.out, name, seed);
                log::info!("{name} seed {seed}: writing {}", path.display());
                let result = MetricsSink::create(&path)
                    .and_then(|mut sink| run(&run_cfg, seed, Some(&mut sink), &RunOptions::default()));
                if let Err(e) = &result {
                    log::error!("{name} seed {seed}: {e}");
                    failures
                        .lock().expect("no worker panics while holding the lock").push(format!("seed {seed}: {e}"));
                }
            });
        }
    });
    let failures = failures.into_inner().expect("workers joined");
    if !failures.is_empty() {
        return Err(Error::Runtime(failures.join("; ")));
    }
    Ok(cfg.seeds.iter().map(|&s| csv_path(&cfg.out, name, s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn tiny(out: &Path) -> ExperimentConfig {
        resolve(
            json!({
                "preset": "crl-big-softmoe",
                "seeds": "0..1",
                "out": out,
                "ppo": {"num_envs": 4, "rollout_steps": 8, "num_minibatches": 2, "update_epochs": 1, "total_timesteps": 192},
                "network": {"layer_size": 8}
            }),
            None,
        )
        .unwrap()
    }

    #[test]
    fn writes_csvs_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let paths = run_experiment(&cfg, "crl-big-softmoe", 2).unwrap();
        assert_eq!(paths.len(), 2);
        for p in &paths {
            assert_eq!(crate::metrics::read_rows(p).unwrap().len(), 6);
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["code_version"], CODE_VERSION);
        // a manifest is itself a valid config that resolves to the same run
        let again = resolve(manifest, None).unwrap();
        assert_eq!(again.run_config(), cfg.run_config());
        assert_eq!(again.seeds, cfg.seeds);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), 1);
        assert_eq!(exit_code(&Error::Runtime("x".into())), 2);
    }
}
