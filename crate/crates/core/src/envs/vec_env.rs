//! Lanes of one game stepped together, with auto-reset.

use super::{lane_seed, reset, EnvState, GameId, Observation, UnifiedAction, OBS_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FinishedEpisode {
    pub lane: usize,
    pub ret: f64,
    pub length: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStep {
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Episodes that ended on this step, in lane order.
    pub finished: Vec<FinishedEpisode>,
}

#[derive(Debug, Clone)]
struct Lane {
    state: EnvState,
    obs: Observation,
    episode: u64,
    ret: f64,
}

/// Each lane's episode `k` is seeded from `(base_seed, lane, k)`.
#[derive(Debug, Clone)]
pub struct VecEnv {
    game: GameId,
    base_seed: u64,
    lanes: Vec<Lane>,
    flat: Vec<f64>,
}

impl VecEnv {
    pub fn new(game: GameId, base_seed: u64, num_lanes: usize) -> Result<Self> {
        if num_lanes == 0 {
            return Err(Error::contract("VecEnv needs at least one lane"));
        }
        let lanes: Vec<Lane> = (0..num_lanes)
            .map(|i| {
                let (state, obs) = reset(game, lane_seed(base_seed, i as u64, 0));
                Lane {
                    state,
                    obs,
                    episode: 0,
                    ret: 0.0,
                }
            })
            .collect();
        let mut flat = vec![0.0; num_lanes * OBS_DIM];
        for (i, lane) in lanes.iter().enumerate() {
            lane.obs.write_padded(&mut flat[i * OBS_DIM..(i + 1) * OBS_DIM]);
        }
        Ok(Self {
            game,
            base_seed,
            lanes,
            flat,
        })
    }

    pub fn game(&self) -> GameId {
        self.game
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    /// Current padded observations, `len() × OBS_DIM` row-major.
    pub fn observations(&self) -> &[f64] {
        &self.flat
    }

    pub fn lane_observation(&self, lane: usize) -> &Observation {
        &self.lanes[lane].obs
    }

    pub fn batch_step(&mut self, actions: &[UnifiedAction]) -> Result<BatchStep> {
        if actions.len() != self.lanes.len() {
            return Err(Error::contract(format!(
                "{} actions for {} lanes",
                actions.len(),
                self.lanes.len()
            )));
        }
        let n = self.lanes.len();
        let mut out = BatchStep {
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            finished: Vec::new(),
        };
        for (i, (lane, &a)) in self.lanes.iter_mut().zip(actions).enumerate() {
            let r = lane.state.step(a)?;
            lane.ret += r.reward;
            out.rewards.push(r.reward);
            out.dones.push(r.done);
            if r.done {
                out.finished.push(FinishedEpisode {
                    lane: i,
                    ret: lane.ret,
                    length: lane.state.steps(),
                    truncated: r.truncated,
                });
                lane.episode += 1;
                let (state, obs) = reset(self.game, lane_seed(self.base_seed, i as u64, lane.episode));
                lane.state = state;
                lane.obs = obs;
                lane.ret = 0.0;
            } else {
                lane.obs = r.observation;
            }
            lane.obs.write_padded(&mut self.flat[i * OBS_DIM..(i + 1) * OBS_DIM]);
        }
        Ok(out)
    }
}
