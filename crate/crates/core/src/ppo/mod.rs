//! PPO with GAE, clipped surrogate and value losses, minibatched epochs and
//! global-norm gradient clipping.

mod gae;
mod loss;
mod rollout;

pub use gae::{compute_gae, gae_bruteforce};
pub use loss::{ppo_loss, standardize, LossParts, Minibatch};
pub use rollout::{collect_rollout, sample_categorical, Rollout, StepPolicy, Trajectory};

use crate::error::{Error, Result};
use crate::moe::{ActorCritic, RouteCtx};
use crate::tensor::{clip_global_norm, AdamConfig, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PPOConfig {
    pub num_envs: usize,
    pub rollout_steps: usize,
    pub total_timesteps: u64,
    pub update_epochs: usize,
    pub num_minibatches: usize,
    pub gae_gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub lr: f64,
    pub anneal: bool,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            num_envs: 128,
            rollout_steps: 64,
            total_timesteps: 10_000_000,
            update_epochs: 10,
            num_minibatches: 8,
            gae_gamma: 0.99,
            gae_lambda: 0.7,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 1.9,
            lr: 9e-4,
            anneal: true,
        }
    }
}

impl PPOConfig {
    pub fn batch_size(&self) -> usize {
        self.num_envs * self.rollout_steps
    }

    pub fn minibatch_size(&self) -> usize {
        self.batch_size() / self.num_minibatches
    }

    /// Number of whole updates that fit in `total_timesteps`.
    pub fn num_updates(&self) -> usize {
        (self.total_timesteps / self.batch_size() as u64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("ppo.num_envs", self.num_envs),
            ("ppo.rollout_steps", self.rollout_steps),
            ("ppo.update_epochs", self.update_epochs),
            ("ppo.num_minibatches", self.num_minibatches),
        ];
        for (k, v) in pos {
            if v == 0 {
                return Err(Error::config(format!("{k} must be > 0")));
            }
        }
        if !self.batch_size().is_multiple_of(self.num_minibatches) {
            return Err(Error::config(format!(
                "ppo.num_minibatches: {} does not divide the batch of {}×{} = {}",
                self.num_minibatches,
                self.num_envs,
                self.rollout_steps,
                self.batch_size()
            )));
        }
        let unit = [("ppo.gae_gamma", self.gae_gamma), ("ppo.gae_lambda", self.gae_lambda)];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        let nonneg = [
            ("ppo.clip_eps", self.clip_eps),
            ("ppo.entropy_coef", self.entropy_coef),
            ("ppo.vf_coef", self.vf_coef),
            ("ppo.lr", self.lr),
        ];
        for (k, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{k} must be >= 0, got {v}")));
            }
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return Err(Error::config("ppo.max_grad_norm must be > 0"));
        }
        if self.num_updates() == 0 {
            return Err(Error::config(format!(
                "ppo.total_timesteps {} is smaller than one batch of {}",
                self.total_timesteps,
                self.batch_size()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    /// Mean pre-clip global gradient norm over minibatches.
    pub grad_norm: f64,
    /// Mean pre-clip gradient over all minibatches, flattened in parameter
    /// name order.
    pub mean_grad: Vec<f64>,
    pub minibatches: usize,
}

/// Runs `update_epochs` passes of shuffled minibatch PPO steps over `traj`.
#[allow(clippy::too_many_arguments)]
pub fn update<R: Rng>(
    net: &ActorCritic,
    store: &mut ParamStore,
    traj: &Trajectory,
    cfg: &PPOConfig,
    router_ctx: &RouteCtx,
    lr: f64,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let n = traj.len();
    if !n.is_multiple_of(cfg.num_minibatches) {
        return Err(Error::contract(format!("{n} samples do not split into {} minibatches", cfg.num_minibatches)));
    }
    let (adv, ret) = compute_gae(
        &traj.rewards,
        &traj.values,
        &traj.dones,
        &traj.last_values,
        traj.steps,
        traj.lanes,
        cfg.gae_gamma,
        cfg.gae_lambda,
    )?;
    let mb = n / cfg.num_minibatches;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut grad_sum: Vec<f64> = Vec::new();
    for _ in 0..cfg.update_epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(mb) {
            let batch = Minibatch::gather(traj, &adv, &ret, chunk)?;
            let mut tape = Tape::new();
            let parts = ppo_loss(&mut tape, store, net, &batch, cfg, router_ctx)?;
            let mut grads = tape.backward(parts.loss, store)?;
            let flat = grads.flatten();
            if grad_sum.is_empty() {
                grad_sum = flat;
            } else {
                grad_sum.iter_mut().zip(&flat).for_each(|(a, b)| *a += b);
            }
            let norm = clip_global_norm(&mut grads, cfg.max_grad_norm)?;
            store.adam_step(&grads, lr, adam)?;

            stats.policy_loss += parts.policy_loss;
            stats.value_loss += parts.value_loss;
            stats.entropy += parts.entropy;
            stats.approx_kl += parts.approx_kl;
            stats.clip_frac += parts.clip_frac;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_frac /= k;
    stats.grad_norm /= k;
    grad_sum.iter_mut().for_each(|g| *g /= k);
    stats.mean_grad = grad_sum;
    Ok(stats)
}
