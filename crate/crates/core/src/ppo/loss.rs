//! Clipped PPO objective.

use super::{PPOConfig, Trajectory};
use crate::error::{Error, Result};
use crate::moe::{ActorCritic, RouteCtx, Tower};
use crate::tensor::{Tape, Tensor, Var};

/// Samples for one gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    /// `M × obs_dim`
    pub obs: Tensor,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub old_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn gather(traj: &Trajectory, adv: &[f64], ret: &[f64], idx: &[usize]) -> Result<Self> {
        let d = traj.obs_dim;
        let mut obs = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= traj.len() {
                return Err(Error::contract(format!("sample {i} outside trajectory of {}", traj.len())));
            }
            obs.extend_from_slice(&traj.obs[i * d..(i + 1) * d]);
        }
        let pick = |xs: &[f64]| idx.iter().map(|&i| xs[i]).collect::<Vec<_>>();
        Ok(Self {
            obs: Tensor::new(vec![idx.len(), d], obs)?,
            actions: idx.iter().map(|&i| traj.actions[i]).collect(),
            old_log_probs: pick(&traj.log_probs),
            old_values: pick(&traj.values),
            advantages: pick(adv),
            returns: pick(ret),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// `(x − mean) / (std + 1e-8)` with the population standard deviation.
pub fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    x.iter().map(|v| (v - mean) / denom).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub loss: Var,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub router_entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

fn column(tape: &mut Tape, xs: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::new(vec![xs.len(), 1], xs.to_vec())?))
}

/// Builds the scalar loss
/// `−E[min(ρA, clip(ρ)A)] + c_v·0.5·E[max((V−R)², (V_clip−R)²)] − c_e·H(π) − Σ router bonus`
/// on `tape`, with advantages standardized over this minibatch.
pub fn ppo_loss(
    tape: &mut Tape,
    store: &crate::tensor::ParamStore,
    net: &ActorCritic,
    mb: &Minibatch,
    cfg: &PPOConfig,
    ctx: &RouteCtx,
) -> Result<LossParts> {
    let m = mb.len();
    if m == 0 {
        return Err(Error::contract("empty minibatch"));
    }
    let eps = cfg.clip_eps;
    let x = tape.constant(mb.obs.clone());
    let actor = net.actor.forward(tape, store, x, ctx, false)?;
    let critic = net.critic.forward(tape, store, x, ctx, false)?;

    // policy
    let logp_all = tape.log_softmax(actor.out, 1)?;
    let logp = tape.gather_cols(logp_all, &mb.actions)?;
    let old = column(tape, &mb.old_log_probs)?;
    let log_ratio = tape.sub(logp, old)?;
    let ratio = tape.exp(log_ratio)?;
    let adv = column(tape, &standardize(&mb.advantages))?;
    let pg1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps)?;
    let pg2 = tape.mul(clipped, adv)?;
    let surrogate = tape.minimum(pg1, pg2)?;
    let surrogate = tape.mean(surrogate)?;
    let policy_loss = tape.neg(surrogate)?;

    let probs = tape.softmax(actor.out, 1)?;
    let ent = tape.entropy_rows(probs)?;
    let entropy = tape.mean(ent)?;

    // value
    let v = critic.out;
    let old_v = column(tape, &mb.old_values)?;
    let ret = column(tape, &mb.returns)?;
    let dv = tape.sub(v, old_v)?;
    let dv = tape.clamp(dv, -eps, eps)?;
    let v_clip = tape.add(old_v, dv)?;
    let e1 = tape.sub(v, ret)?;
    let e1 = tape.square(e1)?;
    let e2 = tape.sub(v_clip, ret)?;
    let e2 = tape.square(e2)?;
    let vl = tape.maximum(e1, e2)?;
    let vl = tape.mean(vl)?;
    let value_loss = tape.scale(vl, 0.5)?;

    let weighted_v = tape.scale(value_loss, cfg.vf_coef)?;
    let mut loss = tape.add(policy_loss, weighted_v)?;
    let ent_term = tape.scale(entropy, cfg.entropy_coef)?;
    loss = tape.sub(loss, ent_term)?;

    let mut routing = actor.routing.clone();
    routing.extend(critic.routing.iter().copied());
    let mut router_entropy = 0.0;
    if let Some(bonus) = Tower::entropy_bonus(tape, &routing)? {
        router_entropy = tape.value(bonus).item()?;
        loss = tape.sub(loss, bonus)?;
    }

    let ratios = tape.value(ratio).data();
    let logr = tape.value(log_ratio).data();
    let clip_frac = ratios.iter().filter(|r| (*r - 1.0).abs() > eps).count() as f64 / m as f64;
    let approx_kl = ratios.iter().zip(logr).map(|(r, l)| (r - 1.0) - l).sum::<f64>() / m as f64;

    Ok(LossParts {
        loss,
        policy_loss: tape.value(policy_loss).item()?,
        value_loss: tape.value(value_loss).item()?,
        entropy: tape.value(entropy).item()?,
        router_entropy,
        approx_kl,
        clip_frac,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{build_actor_critic, Architecture, MoENetworkConfig, RouterKind, RouterSpec};
    use crate::tensor::gradcheck::check_param_gradients;

    fn batch(obs_dim: usize, m: usize) -> Minibatch {
        let obs = (0..m * obs_dim).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
        Minibatch {
            obs: Tensor::new(vec![m, obs_dim], obs).unwrap(),
            actions: (0..m).map(|i| i % 3).collect(),
            old_log_probs: (0..m).map(|i| -1.0 - 0.1 * i as f64).collect(),
            old_values: (0..m).map(|i| 0.05 * i as f64).collect(),
            advantages: (0..m).map(|i| (i as f64 - 1.5) * 0.7).collect(),
            returns: (0..m).map(|i| 0.3 - 0.1 * i as f64).collect(),
        }
    }

    #[test]
    fn standardize_moments() {
        let z = standardize(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f64 = z.iter().sum::<f64>() / 4.0;
        let var: f64 = z.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-7);
        assert_eq!(standardize(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn unit_ratio_policy_term_is_zero() {
        let (net, store) = build_actor_critic(&MoENetworkConfig::default(), 4, 3, 1, 0).unwrap();
        let mut mb = batch(4, 6);
        // evaluate the current policy to make ρ = 1
        let mut tape = Tape::new();
        let x = tape.constant(mb.obs.clone());
        let out = net.actor.forward(&mut tape, &store, x, &RouteCtx::task(0, 1), false).unwrap();
        let lp = tape.log_softmax(out.out, 1).unwrap();
        let lp = tape.gather_cols(lp, &mb.actions).unwrap();
        mb.old_log_probs = tape.value(lp).data().to_vec();

        let mut tape = Tape::new();
        let parts = ppo_loss(&mut tape, &store, &net, &mb, &PPOConfig::default(), &RouteCtx::task(0, 1)).unwrap();
        assert!(parts.policy_loss.abs() < 1e-12);
        assert_eq!(parts.clip_frac, 0.0);
        assert!(parts.approx_kl.abs() < 1e-15);
    }

    #[test]
    fn clipped_branch_caps_positive_advantage() {
        // ρ = 2, A > 0: min(2A, 1.2A) = 1.2A
        let mut tape = Tape::new();
        let ratio = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let adv = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let pg1 = tape.mul(ratio, adv).unwrap();
        let c = tape.clamp(ratio, 0.8, 1.2).unwrap();
        let pg2 = tape.mul(c, adv).unwrap();
        let s = tape.minimum(pg1, pg2).unwrap();
        assert!((tape.value(s).item().unwrap() - 0.6).abs() < 1e-15);
        let s = tape.sum(s).unwrap();
        // clipped branch: no gradient to the ratio
        assert_eq!(tape.grad_wrt(s, &[ratio]).unwrap()[0].data(), &[0.0]);
    }

    #[test]
    fn full_loss_gradcheck_four_samples() {
        for arch in [
            MoENetworkConfig::default(),
            MoENetworkConfig::new(Architecture::Middle, vec![RouterSpec::new(RouterKind::SoftMoE).with_entropy(0.01)]),
        ] {
            let mut cfg = arch;
            cfg.layer_size = 6;
            let (net, store) = build_actor_critic(&cfg, 5, 3, 1, 4).unwrap();
            let mb = batch(5, 4);
            let ppo = PPOConfig::default();
            let report = check_param_gradients(&store, 1e-5, |tape, s| {
                Ok(ppo_loss(tape, s, &net, &mb, &ppo, &RouteCtx::task(0, 1))?.loss)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "{report:?}");
        }
    }
}
