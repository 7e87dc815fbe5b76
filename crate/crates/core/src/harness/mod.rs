//! Single-environment, multi-task round-robin and continual schedules.

mod schedule;

pub use schedule::{Mode, Segment, TaskSchedule};

use crate::envs::{mix_seed, GameId, VecEnv, A_MAX, OBS_DIM};
use crate::error::{Error, Result};
use crate::metrics::{
    dormant_fraction, normalize_score, GradientBuckets, MetricsRow, MetricsSink, ScoreTable, DEFAULT_TAU,
};
use crate::moe::{build_actor_critic, ActorCritic, GradSwitch, MoENetworkConfig, RouteCtx};
use crate::ppo::{collect_rollout, update, PPOConfig, Trajectory};
use crate::tensor::{linear_anneal, AdamConfig, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const SALT_ENV: u64 = 0xE57;
const SALT_AGENT: u64 = 0xA6E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Dormancy threshold.
    pub tau: f64,
    /// Most recent observations used for the dormancy probe.
    pub probe_size: usize,
    /// Updates per gradient bucket; derived from the schedule when absent.
    pub bucket_capacity: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            probe_size: 1024,
            bucket_capacity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: TaskSchedule,
    pub network: MoENetworkConfig,
    pub ppo: PPOConfig,
    pub metrics: MetricsConfig,
    pub scores: ScoreTable,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.network.validate()?;
        self.ppo.validate()?;
        if self.metrics.tau.is_nan() || self.metrics.tau < 0.0 {
            return Err(Error::config(format!("metrics.tau must be >= 0, got {}", self.metrics.tau)));
        }
        if self.metrics.probe_size == 0 || self.metrics.bucket_capacity == Some(0) {
            return Err(Error::config("metrics.probe_size and metrics.bucket_capacity must be > 0"));
        }
        let updates = self.ppo.num_updates();
        let needed = self.schedule.min_updates();
        if updates < needed {
            return Err(Error::config(format!(
                "ppo.total_timesteps gives {updates} updates, the schedule needs at least {needed}"
            )));
        }
        self.scores.validate_for(&self.schedule.tasks())?;
        let tasks = self.schedule.tasks().len();
        if self.network.uses(crate::moe::RouterKind::Hardcoded) && tasks > self.network.num_experts {
            return Err(Error::config(format!(
                "network.routers: Hardcoded needs one expert per task ({tasks} tasks, {} experts)",
                self.network.num_experts
            )));
        }
        Ok(())
    }

    pub fn bucket_capacity(&self) -> usize {
        self.metrics
            .bucket_capacity
            .unwrap_or_else(|| self.schedule.updates_per_segment(self.ppo.num_updates()).div_ceil(5).max(1))
    }
}

/// Index of `game` in the schedule's deduplicated task list.
pub fn provide_task_id(schedule: &TaskSchedule, game: GameId) -> Result<usize> {
    schedule
        .tasks()
        .iter()
        .position(|&g| g == game)
        .ok_or_else(|| Error::contract(format!("{game} is not in the schedule")))
}

/// One completed-bucket similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityEvent {
    /// Update that completed the bucket.
    pub update: usize,
    pub similarity: f64,
    /// First update of the earlier bucket in the pair.
    pub first_update: usize,
    /// Whether the compared pair spans a task switch.
    pub straddles: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord {
    pub game: GameId,
    pub task_id: usize,
    /// Segment index (CRL), round index (MTRL) or 0.
    pub segment: usize,
    /// Environment steps taken on this update's task so far.
    pub task_steps: u64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep a copy of every parameter at each CRL boundary.
    pub record_params: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub rows: Vec<MetricsRow>,
    pub updates: Vec<UpdateRecord>,
    pub similarities: Vec<SimilarityEvent>,
    /// Parameters before the first segment and after every segment, when
    /// requested.
    pub boundary_params: Vec<BTreeMap<String, Tensor>>,
    pub final_params: ParamStore,
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    net: ActorCritic,
    store: ParamStore,
    adam: AdamConfig,
    rng: ChaCha8Rng,
    total_updates: usize,
    done_updates: usize,
    env_steps: u64,
    buckets: GradientBuckets,
    bucket_start: usize,
    prev_bucket_start: Option<usize>,
    switch: GradSwitch,
    grad_sim: Option<f64>,
    sink: Option<&'a mut MetricsSink>,
    out: RunOutcome,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig, seed: u64, sink: Option<&'a mut MetricsSink>) -> Result<Self> {
        cfg.validate()?;
        let tasks = cfg.schedule.tasks().len();
        let (net, store) = build_actor_critic(&cfg.network, OBS_DIM, A_MAX, tasks, seed)?;
        Ok(Self {
            cfg,
            seed,
            net,
            store,
            adam: AdamConfig::default(),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_AGENT)),
            total_updates: cfg.ppo.num_updates(),
            done_updates: 0,
            env_steps: 0,
            buckets: GradientBuckets::new(cfg.bucket_capacity())?,
            bucket_start: 0,
            prev_bucket_start: None,
            switch: GradSwitch::new(cfg.network.num_experts, cfg.network.switch_threshold)?,
            grad_sim: None,
            sink,
            out: RunOutcome::default(),
        })
    }

    fn env(&self, stream: u64, game: GameId) -> Result<VecEnv> {
        VecEnv::new(game, mix_seed(mix_seed(self.seed, SALT_ENV), stream), self.cfg.ppo.num_envs)
    }

    fn ctx(&self, task_id: usize) -> RouteCtx {
        RouteCtx {
            task_id,
            num_tasks: self.cfg.schedule.tasks().len(),
            grad_sim: self.grad_sim.unwrap_or(0.0),
            switch_index: self.switch.index(),
        }
    }

    fn snapshot(&mut self) {
        let params = self.store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        self.out.boundary_params.push(params);
    }

    fn dormancy(&self, traj: &Trajectory, ctx: &RouteCtx) -> Result<(f64, f64)> {
        let n = traj.len().min(self.cfg.metrics.probe_size);
        let start = (traj.len() - n) * traj.obs_dim;
        let probe = Tensor::new(vec![n, traj.obs_dim], traj.obs[start..].to_vec())?;
        let mut tape = Tape::new();
        let x = tape.constant(probe);
        let mut frac = |tower: &crate::moe::Tower| -> Result<f64> {
            let out = tower.forward(&mut tape, &self.store, x, ctx, true)?;
            let hidden: Vec<Tensor> = out.hidden.iter().map(|&h| tape.value(h).clone()).collect();
            dormant_fraction(&hidden, self.cfg.metrics.tau)
        };
        Ok((frac(&self.net.actor)?, frac(&self.net.critic)?))
    }

    /// One rollout plus one PPO update on `env`.
    fn step(&mut self, env: &mut VecEnv, task_id: usize, segment: usize, task_steps: u64, segment_of: &dyn Fn(usize) -> usize) -> Result<()> {
        let game = env.game();
        let ctx = self.ctx(task_id);
        let roll = collect_rollout(&self.net, &self.store, env, self.cfg.ppo.rollout_steps, &ctx, &mut self.rng)?;
        let lr = if self.cfg.ppo.anneal {
            linear_anneal(self.cfg.ppo.lr, self.done_updates, self.total_updates)?
        } else {
            self.cfg.ppo.lr
        };
        let stats = update(&self.net, &mut self.store, &roll.traj, &self.cfg.ppo, &ctx, lr, &self.adam, &mut self.rng)?;
        let u = self.done_updates;
        self.done_updates += 1;
        self.env_steps += roll.traj.len() as u64;

        let (dormant_actor, dormant_critic) = self.dormancy(&roll.traj, &ctx)?;

        if self.buckets.fill() == 0 {
            self.bucket_start = u;
        }
        if let Some(sim) = self.buckets.push(&stats.mean_grad)? {
            let first = self.prev_bucket_start.expect("a similarity implies an earlier bucket");
            self.out.similarities.push(SimilarityEvent {
                update: u,
                similarity: sim,
                first_update: first,
                straddles: segment_of(first) != segment_of(u),
            });
            self.grad_sim = Some(sim);
            self.switch.observe(sim);
        }
        if self.buckets.fill() == 0 {
            self.prev_bucket_start = Some(self.bucket_start);
        }

        let return_raw = if roll.episodes.is_empty() {
            f64::NAN
        } else {
            roll.episodes.iter().map(|e| e.ret).sum::<f64>() / roll.episodes.len() as f64
        };
        let return_norm = if return_raw.is_nan() { f64::NAN } else { normalize_score(return_raw, game, &self.cfg.scores)? };
        let mut expert_probs = roll.actor_usage;
        expert_probs.extend(roll.critic_usage);
        let row = MetricsRow {
            step: self.env_steps,
            task: game.short_name().to_string(),
            seed: self.seed,
            return_raw,
            return_norm,
            dormant_actor,
            dormant_critic,
            grad_sim: self.grad_sim.unwrap_or(f64::NAN),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            grad_norm: stats.grad_norm,
            expert_probs,
        };
        log::debug!(
            "update {}/{} {game}: return {return_raw:.2}, policy {:.4}, value {:.4}",
            self.done_updates,
            self.total_updates,
            stats.policy_loss,
            stats.value_loss
        );
        if let Some(sink) = self.sink.as_deref_mut() {
            sink.emit_row(&row)?;
        }
        self.out.rows.push(row);
        self.out.updates.push(UpdateRecord {
            game,
            task_id,
            segment,
            task_steps: task_steps + roll.traj.len() as u64,
        });
        Ok(())
    }

    fn finish(mut self) -> RunOutcome {
        self.out.final_params = self.store;
        self.out
    }
}

/// Runs `cfg.schedule` for one seed, streaming rows to `sink` when given.
pub fn run(cfg: &RunConfig, seed: u64, sink: Option<&mut MetricsSink>, opts: &RunOptions) -> Result<RunOutcome> {
    match cfg.schedule.mode {
        Mode::Single => run_single(cfg, seed, sink),
        Mode::MTRL => run_mtrl(cfg, seed, sink),
        Mode::CRL => run_crl(cfg, seed, sink, opts),
    }
}

pub fn run_single(cfg: &RunConfig, seed: u64, sink: Option<&mut MetricsSink>) -> Result<RunOutcome> {
    if cfg.schedule.mode != Mode::Single {
        return Err(Error::contract("run_single needs a Single schedule"));
    }
    let mut t = Trainer::new(cfg, seed, sink)?;
    let game = cfg.schedule.order[0];
    let mut env = t.env(0, game)?;
    let mut steps = 0;
    for _ in 0..t.total_updates {
        t.step(&mut env, 0, 0, steps, &|_| 0)?;
        steps = t.out.updates.last().map_or(0, |r| r.task_steps);
    }
    Ok(t.finish())
}

/// Round-robin: each round performs one update per task; every task keeps
/// its own lanes across rounds.
pub fn run_mtrl(cfg: &RunConfig, seed: u64, sink: Option<&mut MetricsSink>) -> Result<RunOutcome> {
    if cfg.schedule.mode != Mode::MTRL {
        return Err(Error::contract("run_mtrl needs an MTRL schedule"));
    }
    let mut t = Trainer::new(cfg, seed, sink)?;
    let order = cfg.schedule.order.clone();
    let mut envs = order
        .iter()
        .enumerate()
        .map(|(i, &g)| t.env(i as u64, g))
        .collect::<Result<Vec<_>>>()?;
    let mut steps = vec![0u64; order.len()];
    let rounds = t.total_updates / order.len();
    // with one update per task per round, a bucket never sits inside a
    // single task; treat every update as its own segment
    for round in 0..rounds {
        for (i, &game) in order.iter().enumerate() {
            let task_id = provide_task_id(&cfg.schedule, game)?;
            t.step(&mut envs[i], task_id, round, steps[i], &|u| u)?;
            steps[i] = t.out.updates.last().map_or(0, |r| r.task_steps);
        }
    }
    Ok(t.finish())
}

/// Segments in order with fresh lanes at each boundary; parameters and
/// optimizer state carry over.
pub fn run_crl(cfg: &RunConfig, seed: u64, sink: Option<&mut MetricsSink>, opts: &RunOptions) -> Result<RunOutcome> {
    if cfg.schedule.mode != Mode::CRL {
        return Err(Error::contract("run_crl needs a CRL schedule"));
    }
    let mut t = Trainer::new(cfg, seed, sink)?;
    let segments = cfg.schedule.segments(t.total_updates);
    let bounds: Vec<usize> = segments.iter().map(|s| s.end).collect();
    let segment_of = move |u: usize| bounds.iter().position(|&e| u < e).unwrap_or(bounds.len());
    if opts.record_params {
        t.snapshot();
    }
    let mut steps: BTreeMap<GameId, u64> = BTreeMap::new();
    for (k, seg) in segments.iter().enumerate() {
        log::info!("seed {seed}: segment {} ({}) updates {}..{}", k + 1, seg.game, seg.start, seg.end);
        let mut env = t.env(k as u64, seg.game)?;
        let task_id = provide_task_id(&cfg.schedule, seg.game)?;
        for _ in seg.start..seg.end {
            let s = steps.get(&seg.game).copied().unwrap_or(0);
            t.step(&mut env, task_id, k, s, &segment_of)?;
            steps.insert(seg.game, t.out.updates.last().map_or(0, |r| r.task_steps));
        }
        if opts.record_params {
            t.snapshot();
        }
    }
    Ok(t.finish())
}
