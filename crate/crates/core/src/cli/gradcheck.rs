//! Finite-difference suite behind `moerl gradcheck`.

use crate::error::Result;
use crate::moe::{build_actor_critic, softmoe_forward, Architecture, MoENetworkConfig, RouteCtx, RouterKind, RouterSpec};
use crate::ppo::{ppo_loss, Minibatch, PPOConfig};
use crate::tensor::gradcheck::{check_leaf_gradients, check_param_gradients, GradReport};
use crate::tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Soft MoE over 4 tokens, 3 experts, 2 slots each; gradients with respect
/// to tokens, Φ and the expert weights.
pub fn check_softmoe() -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, d, n, p) = (4, 3, 3, 2);
    let mut inputs = vec![random(&mut rng, &[m, d]), random(&mut rng, &[d, n * p])];
    for _ in 0..n {
        inputs.push(random(&mut rng, &[d, d]));
    }
    let probe = random(&mut rng, &[m, d]);
    check_leaf_gradients(&inputs, GRADCHECK_STEP, |tape, v| {
        let experts = v[2..].to_vec();
        let out = softmoe_forward(tape, v[0], v[0], v[1], p, |tape, j, s| {
            let h = tape.matmul(s, experts[j])?;
            tape.exp(h)
        })?;
        let w = tape.constant(probe.clone());
        let y = tape.mul(out.y, w)?;
        tape.sum(y)
    })
}

/// Zero biases put ReLU inputs exactly on the kink whenever the layer
/// below outputs a zero row; move them off it.
fn jitter_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".b")).map(str::to_string).collect();
    for n in names {
        let shape = store.get(&n).expect("listed name").shape().to_vec();
        store.set(&n, random(rng, &shape))?;
    }
    Ok(())
}

fn tower_check(kind: RouterKind) -> Result<GradReport> {
    let mut cfg = MoENetworkConfig::new(Architecture::Middle, vec![RouterSpec::new(kind)]);
    cfg.layer_size = 5;
    let (net, mut store) = build_actor_critic(&cfg, 4, 3, 1, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    jitter_biases(&mut store, &mut rng)?;
    let x = random(&mut rng, &[6, 4]);
    let w = random(&mut rng, &[6, 3]);
    let ctx = RouteCtx::task(0, 1);
    check_param_gradients(&store, GRADCHECK_STEP, |tape, s| {
        let xv = tape.constant(x.clone());
        let out = net.actor.forward(tape, s, xv, &ctx, false)?;
        let wv = tape.constant(w.clone());
        let y = tape.mul(out.out, wv)?;
        tape.sum(y)
    })
}

/// Top-1 routing inside a tower; the router only learns through the gate.
pub fn check_topk() -> Result<GradReport> {
    tower_check(RouterKind::TopK)
}

/// Full PPO loss of a Middle-SoftMoE network with a routing-entropy bonus.
pub fn check_ppo_loss() -> Result<GradReport> {
    let mut cfg = MoENetworkConfig::new(
        Architecture::Middle,
        vec![RouterSpec::new(RouterKind::SoftMoE).with_entropy(0.01)],
    );
    cfg.layer_size = 6;
    let (net, mut store) = build_actor_critic(&cfg, 5, 3, 1, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    jitter_biases(&mut store, &mut rng)?;
    let m = 4;
    let mb = Minibatch {
        obs: random(&mut rng, &[m, 5]),
        actions: (0..m).map(|i| i % 3).collect(),
        old_log_probs: (0..m).map(|_| rng.random_range(-1.5..-0.8)).collect(),
        old_values: (0..m).map(|_| rng.random_range(-0.1..0.1)).collect(),
        advantages: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        returns: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let ppo = PPOConfig::default();
    let ctx = RouteCtx::task(0, 1);
    check_param_gradients(&store, GRADCHECK_STEP, |tape, s| Ok(ppo_loss(tape, s, &net, &mb, &ppo, &ctx)?.loss))
}

/// Every check, named.
pub fn gradcheck_suite() -> Result<Vec<(&'static str, GradReport)>> {
    Ok(vec![
        ("softmoe_forward", check_softmoe()?),
        ("topk_forward", check_topk()?),
        ("ppo_loss", check_ppo_loss()?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for (name, r) in gradcheck_suite().unwrap() {
            assert!(r.max_rel_err < GRADCHECK_TOL, "{name}: {r:?}");
            assert!(r.checked > 0);
        }
    }
}
