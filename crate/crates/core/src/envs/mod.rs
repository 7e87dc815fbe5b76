//! MinAtar SpaceInvaders, Breakout and Asterix on a 10×10 binary grid.
//!
//! Rules follow the MinAtar reference games with sticky actions and
//! difficulty ramping disabled. All three games share a padded observation
//! layout and a unified action index so one policy can act in any of them.

mod asterix;
mod breakout;
mod space_invaders;
mod vec_env;

pub use vec_env::{BatchStep, FinishedEpisode, VecEnv};

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const GRID: usize = 10;
/// Channel count after padding (SpaceInvaders has the most).
pub const C_MAX: usize = 6;
/// Flattened padded observation length.
pub const OBS_DIM: usize = GRID * GRID * C_MAX;
/// Size of the unified action space (Asterix's minimal set).
pub const A_MAX: usize = 5;
/// Episodes are cut at this many steps and flagged as truncated.
pub const MAX_EPISODE_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GameId {
    #[serde(alias = "SI")]
    SpaceInvaders,
    #[serde(alias = "BO")]
    Breakout,
    #[serde(alias = "Ast")]
    Asterix,
}

impl GameId {
    pub const ALL: [GameId; 3] = [GameId::SpaceInvaders, GameId::Breakout, GameId::Asterix];

    pub fn channels(self) -> usize {
        match self {
            GameId::SpaceInvaders => 6,
            GameId::Breakout | GameId::Asterix => 4,
        }
    }

    /// Minimal native action set, in MinAtar order.
    pub fn native_actions(self) -> &'static [NativeAction] {
        use NativeAction::*;
        match self {
            GameId::SpaceInvaders => &[Noop, Left, Right, Fire],
            GameId::Breakout => &[Noop, Left, Right],
            GameId::Asterix => &[Noop, Left, Up, Right, Down],
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            GameId::SpaceInvaders => "SI",
            GameId::Breakout => "BO",
            GameId::Asterix => "Ast",
        }
    }
}

impl fmt::Display for GameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for GameId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "si" | "spaceinvaders" | "space_invaders" => Ok(GameId::SpaceInvaders),
            "bo" | "breakout" => Ok(GameId::Breakout),
            "ast" | "asterix" => Ok(GameId::Asterix),
            _ => Err(Error::config(format!("unknown game `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NativeAction {
    Noop,
    Left,
    Up,
    Right,
    Down,
    Fire,
}

/// Index into the shared action space `0..A_MAX`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UnifiedAction(usize);

impl UnifiedAction {
    pub fn new(index: usize) -> Result<Self> {
        if index >= A_MAX {
            return Err(Error::contract(format!("action {index} outside 0..{A_MAX}")));
        }
        Ok(Self(index))
    }

    pub fn index(self) -> usize {
        self.0
    }

    /// Native action for `game`; indices past the game's set are no-ops.
    pub fn native(self, game: GameId) -> NativeAction {
        game.native_actions().get(self.0).copied().unwrap_or(NativeAction::Noop)
    }
}

/// A 10×10×C binary grid, stored cell-major: index `(y·10 + x)·C + c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    channels: usize,
    data: Vec<u8>,
}

impl Observation {
    pub(crate) fn empty(channels: usize) -> Self {
        Self {
            channels,
            data: vec![0; GRID * GRID * channels],
        }
    }

    pub(crate) fn set(&mut self, y: usize, x: usize, c: usize) {
        self.data[(y * GRID + x) * self.channels + c] = 1;
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * GRID + x) * self.channels + c]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn channel_sum(&self, c: usize) -> usize {
        self.data.iter().skip(c).step_by(self.channels).map(|&v| v as usize).sum()
    }

    /// Appends zero channels up to `C_MAX`.
    pub fn pad(&self) -> Observation {
        let mut out = Observation::empty(C_MAX);
        for cell in 0..GRID * GRID {
            let src = &self.data[cell * self.channels..(cell + 1) * self.channels];
            out.data[cell * C_MAX..cell * C_MAX + self.channels].copy_from_slice(src);
        }
        out
    }

    /// Writes the padded observation as reals into `out` (length `OBS_DIM`).
    pub fn write_padded(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), OBS_DIM);
        out.iter_mut().for_each(|v| *v = 0.0);
        for cell in 0..GRID * GRID {
            for c in 0..self.channels {
                out[cell * C_MAX + c] = self.data[cell * self.channels + c] as f64;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    /// Set when the episode hit `MAX_EPISODE_STEPS` rather than a game end.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
enum Game {
    SpaceInvaders(space_invaders::SpaceInvaders),
    Breakout(breakout::Breakout),
    Asterix(asterix::Asterix),
}

#[derive(Debug, Clone)]
pub struct EnvState {
    game: GameId,
    rng: ChaCha8Rng,
    inner: Game,
    steps: usize,
    done: bool,
}

/// Starts an episode of `game` from `seed`.
pub fn reset(game: GameId, seed: u64) -> (EnvState, Observation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inner = match game {
        GameId::SpaceInvaders => Game::SpaceInvaders(space_invaders::SpaceInvaders::new()),
        GameId::Breakout => Game::Breakout(breakout::Breakout::new(&mut rng)),
        GameId::Asterix => Game::Asterix(asterix::Asterix::new()),
    };
    let state = EnvState {
        game,
        rng,
        inner,
        steps: 0,
        done: false,
    };
    let obs = state.observation();
    (state, obs)
}

impl EnvState {
    pub fn game(&self) -> GameId {
        self.game
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn observation(&self) -> Observation {
        match &self.inner {
            Game::SpaceInvaders(g) => g.observation(),
            Game::Breakout(g) => g.observation(),
            Game::Asterix(g) => g.observation(),
        }
    }

    pub fn step(&mut self, action: UnifiedAction) -> Result<StepResult> {
        if self.done {
            return Err(Error::contract(format!("step on a finished {} episode", self.game)));
        }
        let a = action.native(self.game);
        let (reward, terminal) = match &mut self.inner {
            Game::SpaceInvaders(g) => g.step(a),
            Game::Breakout(g) => g.step(a),
            Game::Asterix(g) => g.step(a, &mut self.rng),
        };
        self.steps += 1;
        let truncated = !terminal && self.steps >= MAX_EPISODE_STEPS;
        self.done = terminal || truncated;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
            truncated,
        })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one episode of one lane.
pub fn lane_seed(base: u64, lane: u64, episode: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ lane) ^ episode)
}

/// Combines a run seed with a salt (segment, task, purpose).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt.wrapping_add(0x5EED)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn game_order_and_channels() {
        assert!(GameId::SpaceInvaders < GameId::Breakout);
        assert!(GameId::Breakout < GameId::Asterix);
        assert_eq!(GameId::ALL.iter().map(|g| g.channels()).max(), Some(C_MAX));
        assert_eq!(GameId::ALL.iter().map(|g| g.native_actions().len()).max(), Some(A_MAX));
        assert_eq!("bo".parse::<GameId>().unwrap(), GameId::Breakout);
        assert!("pong".parse::<GameId>().is_err());
    }

    #[test]
    fn unified_mapping_is_total() {
        for g in GameId::ALL {
            for i in 0..A_MAX {
                let a = UnifiedAction::new(i).unwrap().native(g);
                if i >= g.native_actions().len() {
                    assert_eq!(a, NativeAction::Noop);
                }
            }
        }
        assert_eq!(UnifiedAction::new(3).unwrap().native(GameId::Breakout), NativeAction::Noop);
        assert!(UnifiedAction::new(A_MAX).is_err());
    }

    #[test]
    fn padding_appends_zero_channels() {
        let (_, obs) = reset(GameId::Breakout, 3);
        let p = obs.pad();
        assert_eq!(p.channels(), C_MAX);
        for c in 4..C_MAX {
            assert_eq!(p.channel_sum(c), 0);
        }
        let total: usize = obs.data().iter().map(|&v| v as usize).sum();
        let padded: usize = p.data().iter().map(|&v| v as usize).sum();
        assert_eq!(total, padded);

        let (_, si) = reset(GameId::SpaceInvaders, 3);
        assert_eq!(si.pad(), si);

        let mut flat = vec![0.0; OBS_DIM];
        obs.write_padded(&mut flat);
        assert_eq!(flat.iter().map(|&v| v as u8).collect::<Vec<_>>(), p.data());
    }

    #[test]
    fn reset_is_deterministic() {
        for g in GameId::ALL {
            assert_eq!(reset(g, 11).1, reset(g, 11).1);
        }
    }

    #[test]
    fn stepping_a_finished_episode_fails() {
        let (mut s, _) = reset(GameId::Breakout, 0);
        let noop = UnifiedAction::new(0).unwrap();
        let mut guard = 0;
        while !s.is_done() {
            s.step(noop).unwrap();
            guard += 1;
            assert!(guard <= MAX_EPISODE_STEPS);
        }
        assert!(matches!(s.step(noop), Err(Error::Contract(_))));
    }

    #[test]
    fn truncation_at_cap() {
        for g in GameId::ALL {
            let (mut s, _) = reset(g, 5);
            let mut last = None;
            for _ in 0..=MAX_EPISODE_STEPS {
                if s.is_done() {
                    break;
                }
                last = Some(s.step(UnifiedAction::new(0).unwrap()).unwrap());
            }
            let r = last.unwrap();
            assert!(r.done);
            assert!(s.steps() <= MAX_EPISODE_STEPS);
            if s.steps() == MAX_EPISODE_STEPS {
                assert!(r.truncated);
            }
        }
    }

    #[test]
    fn lane_seeds_differ() {
        let a = lane_seed(1, 0, 0);
        assert_ne!(a, lane_seed(1, 1, 0));
        assert_ne!(a, lane_seed(1, 0, 1));
        assert_ne!(a, lane_seed(2, 0, 0));
        assert_ne!(mix_seed(0, 1), mix_seed(0, 2));
    }
}
