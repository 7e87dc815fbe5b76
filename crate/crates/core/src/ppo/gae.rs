//! Generalised advantage estimation over `[steps × lanes]` buffers.

use crate::error::{Error, Result};

/// Returns `(advantages, returns)`, both indexed `t·lanes + l`.
///
/// `last_values` bootstraps the state after the final step of each lane.
#[allow(clippy::too_many_arguments)]
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_values: &[f64],
    steps: usize,
    lanes: usize,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = steps * lanes;
    if rewards.len() != n || values.len() != n || dones.len() != n || last_values.len() != lanes {
        return Err(Error::shape(
            "compute_gae",
            format!(
                "{steps}×{lanes}: rewards {}, values {}, dones {}, bootstrap {}",
                rewards.len(),
                values.len(),
                dones.len(),
                last_values.len()
            ),
        ));
    }
    let mut adv = vec![0.0; n];
    for l in 0..lanes {
        let mut next_adv = 0.0;
        let mut next_value = last_values[l];
        for t in (0..steps).rev() {
            let i = t * lanes + l;
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_value * live - values[i];
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[i] = next_adv;
            next_value = values[i];
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Single-lane reference: `A_t = Σ_l (γλ)^l δ_{t+l}`, truncated at the first
/// done.
pub fn gae_bruteforce(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let next_v = |t: usize| if t + 1 < n { values[t + 1] } else { bootstrap };
    let delta = |t: usize| {
        let live = if dones[t] { 0.0 } else { 1.0 };
        rewards[t] + gamma * next_v(t) * live - values[t]
    };
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut w = 1.0;
            for k in t..n {
                total += w * delta(k);
                if dones[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            total
        })
        .collect()
}
