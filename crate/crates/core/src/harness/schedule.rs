use crate::envs::GameId;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Single,
    MTRL,
    CRL,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSchedule {
    pub mode: Mode,
    /// Task order. Single mode uses exactly one game.
    pub order: Vec<GameId>,
    /// How many times CRL walks through `order`.
    pub passes: usize,
}

impl Default for TaskSchedule {
    fn default() -> Self {
        Self {
            mode: Mode::CRL,
            order: GameId::ALL.to_vec(),
            passes: 2,
        }
    }
}

/// Updates `[start, end)` spent on one game.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub game: GameId,
    pub start: usize,
    pub end: usize,
}

impl TaskSchedule {
    pub fn single(game: GameId) -> Self {
        Self {
            mode: Mode::Single,
            order: vec![game],
            passes: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order.is_empty() {
            return Err(Error::config("schedule.order must name at least one game"));
        }
        match self.mode {
            Mode::Single if self.order.len() != 1 => {
                Err(Error::config(format!("schedule.order: Single mode takes one game, got {}", self.order.len())))
            }
            Mode::CRL if self.passes == 0 => Err(Error::config("schedule.passes must be > 0")),
            Mode::MTRL if self.tasks().len() != self.order.len() => {
                Err(Error::config("schedule.order: MTRL tasks must be distinct"))
            }
            _ => Ok(()),
        }
    }

    /// Distinct games in order of first appearance.
    pub fn tasks(&self) -> Vec<GameId> {
        let mut out: Vec<GameId> = Vec::new();
        for &g in &self.order {
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    pub fn num_segments(&self) -> usize {
        match self.mode {
            Mode::CRL => self.order.len() * self.passes,
            _ => 1,
        }
    }

    /// Fewest updates that give every segment (or every task in a round) one.
    pub fn min_updates(&self) -> usize {
        match self.mode {
            Mode::Single => 1,
            Mode::MTRL => self.order.len(),
            Mode::CRL => self.num_segments(),
        }
    }

    /// Updates spent on one task before the schedule switches away.
    pub fn updates_per_segment(&self, total_updates: usize) -> usize {
        match self.mode {
            Mode::CRL => total_updates / self.num_segments(),
            _ => total_updates,
        }
    }

    /// CRL segments, segment `i` starting at update `⌊i·U/S⌋`.
    pub fn segments(&self, total_updates: usize) -> Vec<Segment> {
        let s = self.num_segments();
        let bound = |i: usize| i * total_updates / s;
        (0..s)
            .map(|i| Segment {
                game: self.order[i % self.order.len()],
                start: bound(i),
                end: bound(i + 1),
            })
            .collect()
    }
}
