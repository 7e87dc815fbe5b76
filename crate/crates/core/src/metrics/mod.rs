//! Diagnostics: dormant neurons, gradient buckets, expert usage, score
//! normalisation, IQM and the per-update CSV.

mod csv_sink;

pub use csv_sink::{read_rows, MetricsRow, MetricsSink, CSV_HEADER};

use crate::envs::GameId;
use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

/// Default dormancy threshold.
pub const DEFAULT_TAU: f64 = 0.025;
/// Gradient buckets kept in the ring.
pub const NUM_BUCKETS: usize = 5;

/// `(dormant, total)` neuron counts over hidden layers given as `B × H`
/// activation matrices.
pub fn dormant_counts(layers: &[Tensor], tau: f64) -> Result<(usize, usize)> {
    let mut dormant = 0;
    let mut total = 0;
    for act in layers {
        let (b, h) = act.dims2()?;
        let mut mean_abs = vec![0.0; h];
        for row in act.data().chunks(h) {
            mean_abs.iter_mut().zip(row).for_each(|(m, v)| *m += v.abs());
        }
        mean_abs.iter_mut().for_each(|m| *m /= b as f64);
        let layer_mean = mean_abs.iter().sum::<f64>() / h as f64;
        total += h;
        if layer_mean == 0.0 {
            dormant += h;
            continue;
        }
        dormant += mean_abs.iter().filter(|&&m| m / layer_mean <= tau).count();
    }
    Ok((dormant, total))
}

/// Fraction of hidden neurons whose normalised mean activation is `<= tau`.
pub fn dormant_fraction(layers: &[Tensor], tau: f64) -> Result<f64> {
    let (d, t) = dormant_counts(layers, tau)?;
    if t == 0 {
        return Err(Error::contract("dormant_fraction needs at least one layer"));
    }
    Ok(d as f64 / t as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DormantReport {
    pub actor: f64,
    pub critic: f64,
    pub tau: f64,
}

/// Ring of running-mean gradient buckets; each completed bucket is compared
/// with the one completed before it.
#[derive(Debug, Clone)]
pub struct GradientBuckets {
    capacity: usize,
    completed: VecDeque<Vec<f64>>,
    current: Vec<f64>,
    fill: usize,
    dim: Option<usize>,
    total_completed: usize,
}

impl GradientBuckets {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("bucket capacity must be > 0"));
        }
        Ok(Self {
            capacity,
            completed: VecDeque::with_capacity(NUM_BUCKETS),
            current: Vec::new(),
            fill: 0,
            dim: None,
            total_completed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn completed(&self) -> usize {
        self.total_completed
    }

    /// Most recent completed bucket means, oldest first.
    pub fn buckets(&self) -> impl Iterator<Item = &[f64]> {
        self.completed.iter().map(Vec::as_slice)
    }

    /// Adds one update's gradient. Returns the sequential similarity when
    /// this push completes a bucket and an earlier one exists.
    pub fn push(&mut self, grad: &[f64]) -> Result<Option<f64>> {
        match self.dim {
            None => self.dim = Some(grad.len()),
            Some(d) if d != grad.len() => {
                return Err(Error::contract(format!("gradient length changed from {d} to {}", grad.len())));
            }
            _ => {}
        }
        if self.fill == 0 {
            self.current = grad.to_vec();
        } else {
            let k = (self.fill + 1) as f64;
            self.current.iter_mut().zip(grad).for_each(|(m, g)| *m += (g - *m) / k);
        }
        self.fill += 1;
        if self.fill < self.capacity {
            return Ok(None);
        }
        let done = std::mem::take(&mut self.current);
        self.fill = 0;
        self.total_completed += 1;
        let sim = match self.completed.back() {
            Some(prev) => Some(cosine_similarity(&done, prev)?.0),
            None => None,
        };
        if self.completed.len() == NUM_BUCKETS {
            self.completed.pop_front();
        }
        self.completed.push_back(done);
        Ok(sim)
    }
}

/// Mean routing distribution per layer over a window of records, each
/// record holding one distribution per layer.
pub fn expert_usage(records: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let mut acc: Vec<Vec<f64>> = first.iter().map(|l| vec![0.0; l.len()]).collect();
    for rec in records {
        if rec.len() != acc.len() || rec.iter().zip(&acc).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::contract("routing records disagree in layout"));
        }
        for (a, r) in acc.iter_mut().zip(rec) {
            a.iter_mut().zip(r).for_each(|(x, y)| *x += y);
        }
    }
    let n = records.len() as f64;
    acc.iter_mut().for_each(|l| l.iter_mut().for_each(|x| *x /= n));
    Ok(acc)
}

/// Reference returns per game, optionally with random-policy returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTable {
    pub reference: BTreeMap<GameId, f64>,
    #[serde(default)]
    pub random: BTreeMap<GameId, f64>,
    /// Where the reference numbers come from.
    #[serde(default)]
    pub note: String,
}

impl Default for ScoreTable {
    /// Placeholder references; replace with measured single-task scores.
    fn default() -> Self {
        Self {
            reference: [(GameId::SpaceInvaders, 150.0), (GameId::Breakout, 30.0), (GameId::Asterix, 20.0)]
                .into_iter()
                .collect(),
            random: BTreeMap::new(),
            note: "placeholder single-task PPO returns at 1e7 steps; edit to match your own single-env runs".into(),
        }
    }
}

impl ScoreTable {
    pub fn validate_for(&self, games: &[GameId]) -> Result<()> {
        for g in games {
            match self.reference.get(g) {
                Some(&r) if r > 0.0 => {}
                Some(&r) => return Err(Error::config(format!("scores.reference.{g:?} must be > 0, got {r}"))),
                None => return Err(Error::config(format!("scores.reference has no entry for {g:?}"))),
            }
            if let Some(&rand) = self.random.get(g) {
                if rand >= self.reference[g] {
                    return Err(Error::config(format!("scores.random.{g:?} must be below its reference")));
                }
            }
        }
        Ok(())
    }
}

/// `raw / ref`, or `(raw − rand) / (ref − rand)` when a random score exists.
pub fn normalize_score(raw: f64, game: GameId, table: &ScoreTable) -> Result<f64> {
    let reference = *table
        .reference
        .get(&game)
        .ok_or_else(|| Error::config(format!("no reference score for {game:?}")))?;
    Ok(match table.random.get(&game) {
        Some(&r) => (raw - r) / (reference - r),
        None => raw / reference,
    })
}

/// Interquartile mean: drop `⌊n/4⌋` from each end of the sorted scores.
pub fn iqm(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::contract("iqm of an empty list"));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let cut = s.len() / 4;
    let mid = &s[cut..s.len() - cut];
    Ok(mid.iter().sum::<f64>() / mid.len() as f64)
}
