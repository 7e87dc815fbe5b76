//! Acting in vectorised environments and storing the transitions.

use crate::envs::{FinishedEpisode, UnifiedAction, VecEnv, OBS_DIM};
use crate::error::{Error, Result};
use crate::moe::{ActorCritic, LayerRouting, RouteCtx};
use crate::tensor::{ParamStore, Tape, Tensor};
use rand::Rng;

/// Transitions stored `t·lanes + l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: usize,
    pub lanes: usize,
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Critic value of the observation after the last step, per lane.
    pub last_values: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps * self.lanes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Index drawn by inverting the CDF of `probs` at `u ∈ [0, 1)`.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // round-off left u above the total mass: take the last nonzero entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn batch_mean_rows(tape: &Tape, routing: &[LayerRouting]) -> Vec<Vec<f64>> {
    routing
        .iter()
        .map(|r| {
            let t = tape.value(r.probs);
            let (b, n) = t.dims2().expect("routing probs are a matrix");
            let mut mean = vec![0.0; n];
            for row in t.data().chunks(n) {
                mean.iter_mut().zip(row).for_each(|(m, p)| *m += p);
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            mean
        })
        .collect()
}

/// Actions, log-probs and values for one batch of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPolicy {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Batch-mean routing distribution per MoE layer.
    pub actor_routing: Vec<Vec<f64>>,
    pub critic_routing: Vec<Vec<f64>>,
}

impl StepPolicy {
    pub fn act<R: Rng>(net: &ActorCritic, store: &ParamStore, obs: &Tensor, ctx: &RouteCtx, rng: &mut R) -> Result<Self> {
        let mut tape = Tape::new();
        let x = tape.constant(obs.clone());
        let actor = net.actor.forward(&mut tape, store, x, ctx, false)?;
        let critic = net.critic.forward(&mut tape, store, x, ctx, false)?;
        let logp = tape.value(actor.out).clone();
        let (b, a) = logp.dims2()?;
        let mut lp = vec![0.0; b * a];
        let logits = logp.data();
        let mut actions = Vec::with_capacity(b);
        let mut log_probs = Vec::with_capacity(b);
        for r in 0..b {
            let row = &logits[r * a..(r + 1) * a];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let out = &mut lp[r * a..(r + 1) * a];
            out.iter_mut().zip(row).for_each(|(o, v)| *o = v - lse);
            let probs: Vec<f64> = out.iter().map(|v| v.exp()).collect();
            let k = sample_categorical(&probs, rng.random::<f64>());
            actions.push(k);
            log_probs.push(out[k]);
        }
        if log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action log-probabilities".into()));
        }
        Ok(Self {
            actions,
            log_probs,
            values: tape.value(critic.out).data().to_vec(),
            actor_routing: batch_mean_rows(&tape, &actor.routing),
            critic_routing: batch_mean_rows(&tape, &critic.routing),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub traj: Trajectory,
    /// Episodes that finished during the rollout.
    pub episodes: Vec<FinishedEpisode>,
    /// Mean routing distribution per MoE layer over all steps.
    pub actor_usage: Vec<Vec<f64>>,
    pub critic_usage: Vec<Vec<f64>>,
}

fn accumulate(acc: &mut Vec<Vec<f64>>, x: &[Vec<f64>]) {
    if acc.is_empty() {
        *acc = x.to_vec();
    } else {
        for (a, b) in acc.iter_mut().zip(x) {
            a.iter_mut().zip(b).for_each(|(p, q)| *p += q);
        }
    }
}

/// Acts for `steps` steps in every lane of `env`.
pub fn collect_rollout<R: Rng>(
    net: &ActorCritic,
    store: &ParamStore,
    env: &mut VecEnv,
    steps: usize,
    ctx: &RouteCtx,
    rng: &mut R,
) -> Result<Rollout> {
    let lanes = env.len();
    let n = steps * lanes;
    let mut traj = Trajectory {
        steps,
        lanes,
        obs_dim: OBS_DIM,
        obs: Vec::with_capacity(n * OBS_DIM),
        actions: Vec::with_capacity(n),
        log_probs: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        dones: Vec::with_capacity(n),
        last_values: Vec::new(),
    };
    let mut episodes = Vec::new();
    let mut actor_usage = Vec::new();
    let mut critic_usage = Vec::new();
    for _ in 0..steps {
        let obs = Tensor::new(vec![lanes, OBS_DIM], env.observations().to_vec())?;
        let p = StepPolicy::act(net, store, &obs, ctx, rng)?;
        let actions = p.actions.iter().map(|&a| UnifiedAction::new(a)).collect::<Result<Vec<_>>>()?;
        let res = env.batch_step(&actions)?;
        traj.obs.extend_from_slice(obs.data());
        traj.actions.extend_from_slice(&p.actions);
        traj.log_probs.extend_from_slice(&p.log_probs);
        traj.values.extend_from_slice(&p.values);
        traj.rewards.extend_from_slice(&res.rewards);
        traj.dones.extend_from_slice(&res.dones);
        episodes.extend(res.finished);
        accumulate(&mut actor_usage, &p.actor_routing);
        accumulate(&mut critic_usage, &p.critic_routing);
    }
    let obs = Tensor::new(vec![lanes, OBS_DIM], env.observations().to_vec())?;
    let mut tape = Tape::new();
    let x = tape.constant(obs);
    let critic = net.critic.forward(&mut tape, store, x, ctx, false)?;
    traj.last_values = tape.value(critic.out).data().to_vec();
    for u in actor_usage.iter_mut().chain(critic_usage.iter_mut()) {
        u.iter_mut().for_each(|p| *p /= steps as f64);
    }
    Ok(Rollout {
        traj,
        episodes,
        actor_usage,
        critic_usage,
    })
}
