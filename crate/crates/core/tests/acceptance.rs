//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Long training runs happen here, so this is a plain binary rather
//! than a libtest harness; the lines stay visible under `cargo test`.

use moerl::cli::gradcheck::{gradcheck_suite, GRADCHECK_TOL};
use moerl::cli::{final_window, preset, resolve, run_experiment, segment_rows, worker_threads};
use moerl::envs::{GameId, UnifiedAction, VecEnv, A_MAX};
use moerl::harness::{run, RunConfig, RunOptions, RunOutcome};
use moerl::metrics::{dormant_fraction, iqm, normalize_score, MetricsRow, ScoreTable};
use moerl::moe::softmoe_forward;
use moerl::ppo::{compute_gae, gae_bruteforce};
use moerl::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

const SEEDS: [u64; 3] = [0, 1, 2];
const SANITY_STEPS: u64 = 500_000;
const SANITY_FACTOR: f64 = 3.0;
const SANITY_BUDGET: Duration = Duration::from_secs(30 * 60);
const CRL_STEPS: u64 = 1_200_000;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const SUM_TOL: f64 = 1e-9;
const COLLAPSE_TOL: f64 = 1e-10;
const GAE_TOL: f64 = 1e-12;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let reports = gradcheck_suite().unwrap();
    let took = start.elapsed();
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let all = reports.iter().all(|(_, r)| r.max_rel_err < GRADCHECK_TOL);
    let names: Vec<String> = reports.iter().map(|(n, r)| format!("{n} {:.1e}", r.max_rel_err)).collect();
    verdict(
        all && took < GRADCHECK_BUDGET,
        format!("{} (worst {worst:.2e}, {:.1}s)", names.join(", "), took.as_secs_f64()),
    )
}

fn softmoe_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=6);
        let d = rng.random_range(1..=5);
        let n = rng.random_range(1..=4);
        let p = rng.random_range(1..=3);
        let x = random_tensor(&mut rng, &[m, d], 3.0);
        let phi = random_tensor(&mut rng, &[d, n * p], 3.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let pv = tape.constant(phi);
        let out = softmoe_forward(&mut tape, xv, xv, pv, p, |_, _, s| Ok(s)).unwrap();
        let dsp = tape.value(out.dispatch);
        let cmb = tape.value(out.combine);
        for j in 0..n * p {
            let s: f64 = (0..m).map(|i| dsp.at(i, j)).sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        for i in 0..m {
            let s: f64 = (0..n * p).map(|j| cmb.at(i, j)).sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
    }

    // single token, one slot per expert, linear experts
    let mut worst_collapse: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(1..=5);
        let o = rng.random_range(1..=4);
        let n = rng.random_range(1..=4);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let phi: Vec<f64> = (0..d * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ws: Vec<Vec<f64>> = (0..n).map(|_| (0..d * o).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();

        let logits: Vec<f64> = (0..n).map(|j| (0..d).map(|k| x[k] * phi[k * n + j]).sum()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let want: Vec<f64> = (0..o)
            .map(|c| {
                (0..n)
                    .map(|j| (logits[j] - max).exp() / z * (0..d).map(|k| x[k] * ws[j][k * o + c]).sum::<f64>())
                    .sum()
            })
            .collect();

        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, d], x.clone()).unwrap());
        let pv = tape.constant(Tensor::new(vec![d, n], phi).unwrap());
        let wv: Vec<_> = ws.iter().map(|w| tape.constant(Tensor::new(vec![d, o], w.clone()).unwrap())).collect();
        let out = softmoe_forward(&mut tape, xv, xv, pv, 1, |t, j, s| t.matmul(s, wv[j])).unwrap();
        for (a, b) in tape.value(out.y).data().iter().zip(&want) {
            worst_collapse = worst_collapse.max((a - b).abs());
        }
    }
    verdict(
        worst_sum < SUM_TOL && worst_collapse < COLLAPSE_TOL,
        format!("max |sum-1| {worst_sum:.1e}, collapse abs err {worst_collapse:.1e} over 1000 instances each"),
    )
}

fn gae_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (gamma, lambda) = (0.99, 0.7);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for len in 1..=6usize {
        for pattern in 0..(1u32 << len) {
            let dones: Vec<bool> = (0..len).map(|t| pattern >> t & 1 == 1).collect();
            let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let boot = rng.random_range(-1.0..1.0);
            let (adv, _) = compute_gae(&rewards, &values, &dones, &[boot], len, 1, gamma, lambda).unwrap();
            let want = gae_bruteforce(&rewards, &values, &dones, boot, gamma, lambda);
            for (a, b) in adv.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
            cases += 1;
        }
    }
    verdict(worst < GAE_TOL, format!("{cases} trajectories, max abs err {worst:.1e}"))
}

fn metrics_units() -> Verdict {
    let act = Tensor::from_rows(&[vec![0.0, 1.0, 2.0], vec![0.0, -1.0, 4.0]]).unwrap();
    let frac = dormant_fraction(&[act], 0.025).unwrap();
    let q = iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    let table = ScoreTable::default();
    let norm = normalize_score(table.reference[&GameId::Breakout], GameId::Breakout, &table).unwrap();
    verdict(
        frac == 1.0 / 3.0 && q == 2.5 && norm == 1.0,
        format!("dormant {frac}, iqm {q}, normalize(reference) {norm}"),
    )
}

fn determinism() -> Verdict {
    let doc = serde_json::json!({
        "preset": "crl-big-softmoe",
        "ppo": {"num_envs": 16, "rollout_steps": 32, "total_timesteps": 16 * 32 * 6},
    });
    let bytes = |dir: &std::path::Path| {
        let mut cfg = resolve(doc.clone(), None).unwrap();
        cfg.out = dir.to_path_buf();
        cfg.seeds = vec![5];
        let paths = run_experiment(&cfg, "det", 1).unwrap();
        std::fs::read(&paths[0]).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (bytes(a.path()), bytes(b.path()));
    let rows = x.iter().filter(|&&c| c == b'\n').count() - 1;
    verdict(x == y && rows == 6, format!("{} bytes, {rows} rows, identical: {}", x.len(), x == y))
}

/// Mean episodic return of a uniform policy over `actions` unified actions.
fn random_policy_return(game: GameId, actions: usize, episodes: usize) -> f64 {
    let mut env = VecEnv::new(game, 99, 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut rets = Vec::new();
    while rets.len() < episodes {
        let acts: Vec<UnifiedAction> = (0..env.len())
            .map(|_| UnifiedAction::new(rng.random_range(0..actions)).unwrap())
            .collect();
        rets.extend(env.batch_step(&acts).unwrap().finished.into_iter().map(|e| e.ret));
    }
    rets.iter().sum::<f64>() / rets.len() as f64
}

fn final_raw(rows: &[MetricsRow]) -> f64 {
    let refs: Vec<&MetricsRow> = rows.iter().collect();
    final_window(&refs).1
}

fn learning_sanity() -> Verdict {
    // the stricter of a uniform policy over the agent's actions and over
    // the game's own minimal set
    let native = GameId::Breakout.native_actions().len();
    let random = random_policy_return(GameId::Breakout, A_MAX, 2000).max(random_policy_return(GameId::Breakout, native, 2000));
    let mut cfg = preset("single-baseline").unwrap();
    cfg.ppo.total_timesteps = SANITY_STEPS;
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in SEEDS {
        let start = Instant::now();
        let out = run(&cfg, seed, None, &RunOptions::default()).unwrap();
        let took = start.elapsed();
        let ret = final_raw(&out.rows);
        pass &= ret >= SANITY_FACTOR * random && took <= SANITY_BUDGET;
        lines.push(format!("seed {seed}: {ret:.2} in {:.0}s", took.as_secs_f64()));
        eprintln!("  learning sanity {}", lines.last().unwrap());
    }
    verdict(pass, format!("random {random:.3}, need >= {:.3}; {}", SANITY_FACTOR * random, lines.join(", ")))
}

/// Shortened continual runs, keyed by preset.
struct CrlRuns {
    runs: BTreeMap<&'static str, Vec<RunOutcome>>,
}

const CRL_PRESETS: [&str; 3] = ["crl-baseline", "crl-big-hardcoded", "crl-big-softmoe"];

fn crl_config(name: &str) -> RunConfig {
    let mut cfg = preset(name).unwrap();
    cfg.ppo.total_timesteps = CRL_STEPS;
    cfg
}

fn crl_runs() -> CrlRuns {
    let jobs: Vec<(&'static str, u64)> = CRL_PRESETS.iter().flat_map(|&p| SEEDS.map(|s| (p, s))).collect();
    let results: Mutex<BTreeMap<(&'static str, u64), RunOutcome>> = Mutex::new(BTreeMap::new());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let workers = worker_threads().unwrap().min(jobs.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&(name, seed)) = jobs.get(i) else { break };
                let start = Instant::now();
                let opts = RunOptions {
                    record_params: name == "crl-big-hardcoded",
                };
                let out = run(&crl_config(name), seed, None, &opts).unwrap();
                eprintln!("  {name} seed {seed}: {} updates in {:.0}s", out.rows.len(), start.elapsed().as_secs_f64());
                results.lock().unwrap().insert((name, seed), out);
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    let runs = CRL_PRESETS
        .iter()
        .map(|&p| (p, SEEDS.iter().map(|&s| results.remove(&(p, s)).unwrap()).collect()))
        .collect();
    CrlRuns { runs }
}

fn hardcoded_isolation(crl: &CrlRuns) -> Verdict {
    let cfg = crl_config("crl-big-hardcoded");
    let segments = cfg.schedule.segments(cfg.ppo.num_updates());
    let tasks = cfg.schedule.tasks();
    let mut frozen = 0;
    let mut moved = Vec::new();
    let mut trained = true;
    for (seed, out) in SEEDS.iter().zip(&crl.runs["crl-big-hardcoded"]) {
        for (k, seg) in segments.iter().enumerate() {
            let active = tasks.iter().position(|&g| g == seg.game).unwrap();
            let (before, after) = (&out.boundary_params[k], &out.boundary_params[k + 1]);
            for (name, value) in after {
                let Some(j) = name.split('.').find_map(|p| p.strip_prefix("expert")) else { continue };
                let j: usize = j.parse().unwrap();
                if j == active {
                    trained &= before[name] != *value;
                } else if before[name] == *value {
                    frozen += 1;
                } else {
                    moved.push(format!("seed {seed} segment {} {name}", k + 1));
                }
            }
        }
    }
    verdict(
        moved.is_empty() && trained && frozen > 0,
        format!("{frozen} inactive tensors unchanged, {} moved, active experts trained: {trained}", moved.len()),
    )
}

/// Mean over segments of the final-window normalized return.
fn normalized_total(rows: &[MetricsRow]) -> f64 {
    let segs = segment_rows(rows);
    let vals: Vec<f64> = segs.iter().map(|(_, s)| final_window(s).0).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn crl_direction(crl: &CrlRuns) -> Verdict {
    let base: Vec<f64> = crl.runs["crl-baseline"].iter().map(|o| normalized_total(&o.rows)).collect();
    let hard: Vec<f64> = crl.runs["crl-big-hardcoded"].iter().map(|o| normalized_total(&o.rows)).collect();
    let wins = base.iter().zip(&hard).filter(|(b, h)| h >= b).count();
    verdict(
        wins >= 2,
        format!("Big-Hardcoded {hard:.3?} vs Baseline {base:.3?}; wins {wins}/3"),
    )
}

fn mean_dormant(rows: &[MetricsRow]) -> f64 {
    rows.iter().map(|r| 0.5 * (r.dormant_actor + r.dormant_critic)).sum::<f64>() / rows.len() as f64
}

fn dormancy_direction(crl: &CrlRuns) -> Verdict {
    let base: Vec<f64> = crl.runs["crl-baseline"].iter().map(|o| mean_dormant(&o.rows)).collect();
    let soft: Vec<f64> = crl.runs["crl-big-softmoe"].iter().map(|o| mean_dormant(&o.rows)).collect();
    let wins = base.iter().zip(&soft).filter(|(b, s)| s < b).count();
    verdict(
        wins >= 2,
        format!("Big-SoftMoE {soft:.4?} vs Baseline {base:.4?}; wins {wins}/3"),
    )
}

fn similarity_split(out: &RunOutcome) -> (f64, f64, usize, usize) {
    let (cross, within): (Vec<_>, Vec<_>) = out.similarities.iter().partition(|e| e.straddles);
    let mean = |v: &[&moerl::harness::SimilarityEvent]| v.iter().map(|e| e.similarity).sum::<f64>() / v.len() as f64;
    (mean(&cross), mean(&within), cross.len(), within.len())
}

fn similarity_signature(crl: &CrlRuns) -> Verdict {
    let mut pass = true;
    let mut lines = Vec::new();
    for (seed, out) in SEEDS.iter().zip(&crl.runs["crl-baseline"]) {
        let (c, w, nc, nw) = similarity_split(out);
        pass &= nc > 0 && nw > 0 && c < w;
        lines.push(format!("seed {seed}: straddling {c:.3} (n={nc}) vs within {w:.3} (n={nw})"));
    }
    for name in ["crl-big-hardcoded", "crl-big-softmoe"] {
        let per: Vec<String> = crl.runs[name]
            .iter()
            .map(|o| {
                let (c, w, _, _) = similarity_split(o);
                format!("{c:.3}/{w:.3}")
            })
            .collect();
        eprintln!("  similarity {name} (straddling/within per seed): {}", per.join(", "));
    }
    verdict(pass, format!("Baseline {}", lines.join("; ")))
}

fn main() {
    // libtest flags such as --nocapture or a name filter arrive here too
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));

    let mut failed = 0;
    let mut report = |name: &str, v: Verdict| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    };

    let quick: [(&str, fn() -> Verdict); 6] = [
        ("gradient suite", gradient_suite),
        ("softmoe algebra", softmoe_algebra),
        ("gae oracle", gae_oracle),
        ("metrics units", metrics_units),
        ("determinism", determinism),
        ("learning sanity", learning_sanity),
    ];
    for (name, f) in quick {
        if wanted(name) {
            report(name, f());
        }
    }

    let slow: [(&str, fn(&CrlRuns) -> Verdict); 4] = [
        ("hardcoded isolation", hardcoded_isolation),
        ("crl direction", crl_direction),
        ("dormancy direction", dormancy_direction),
        ("similarity signature", similarity_signature),
    ];
    if slow.iter().any(|(n, _)| wanted(n)) {
        let start = Instant::now();
        let crl = crl_runs();
        eprintln!("  shortened continual runs took {:.0}s", start.elapsed().as_secs_f64());
        for (name, f) in slow {
            if wanted(name) {
                report(name, f(&crl));
            }
        }
    }

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
