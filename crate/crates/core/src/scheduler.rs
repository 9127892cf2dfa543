//! Seed queue, energy, and heuristic statepoint selection.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::model::{Seed, SeedId, Statepoint};
use crate::sequencer::{split_mutation_regions, ConstructedSequence, SequencerError};

pub const ENERGY_BASE: u32 = 32;
pub const ENERGY_CAP: u32 = 256;
/// Prior fuzz rounds per energy halving.
pub const ENERGY_DECAY_STEP: u64 = 4;
/// Halvings stop here, so a seed never drops below a quarter of its base.
pub const ENERGY_MAX_HALVINGS: u64 = 2;

/// Skip probability for already-fuzzed non-favored seeds.
pub const SKIP_FUZZED_NONFAV: f64 = 0.95;
/// Skip probability for never-fuzzed non-favored seeds.
pub const SKIP_FRESH_NONFAV: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct EnergyBudget(u32);

impl EnergyBudget {
    pub fn new(iterations: u32) -> Self {
        Self(iterations.clamp(1, ENERGY_CAP))
    }

    pub fn iterations(self) -> u32 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SchedulerError {
    #[error("seed queue is empty")]
    EmptyCorpus,
    #[error("no reachable statepoints to choose from")]
    NothingReachable,
}

/// The seed queue with favored-seed culling.
#[derive(Debug, Clone, Default)]
pub struct SeedQueue {
    seeds: Vec<Seed>,
    cursor: usize,
    dirty: bool,
}

impl SeedQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn push(&mut self, seed: Seed) -> usize {
        self.seeds.push(seed);
        self.dirty = true;
        self.seeds.len() - 1
    }

    pub fn seeds(&self) -> &[Seed] {
        &self.seeds
    }

    pub fn get(&self, index: usize) -> &Seed {
        &self.seeds[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Seed {
        &mut self.seeds[index]
    }

    pub fn position(&self, id: SeedId) -> Option<usize> {
        self.seeds.iter().position(|s| s.id == id)
    }

    pub fn favored_count(&self) -> usize {
        self.seeds.iter().filter(|s| s.favored).count()
    }

    /// Recompute favored flags: for every covered bitmap index keep the
    /// cheapest seed hitting it, then greedily take those winners until all
    /// covered indices are accounted for.
    pub fn cull(&mut self) {
        if !self.dirty {
            return;
        }
        self.dirty = false;
        let mut top: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, s) in self.seeds.iter().enumerate() {
            for &bit in &s.trace_bits {
                top.entry(bit)
                    .and_modify(|best| {
                        let b = &self.seeds[*best];
                        if (s.exec_cost(), s.id) < (b.exec_cost(), b.id) {
                            *best = i;
                        }
                    })
                    .or_insert(i);
            }
        }
        for s in &mut self.seeds {
            s.favored = false;
        }
        let mut covered = alloc::collections::BTreeSet::new();
        for (&bit, &winner) in &top {
            if covered.contains(&bit) {
                continue;
            }
            let w = &mut self.seeds[winner];
            w.favored = true;
            covered.extend(w.trace_bits.iter().copied());
        }
    }

    /// Cycle the queue, probabilistically skipping non-favored seeds while
    /// any favored seed exists. Falls back to plain round-robin after one
    /// full lap without a pick.
    pub fn select_seed<R: Rng>(&mut self, rng: &mut R) -> Result<usize, SchedulerError> {
        if self.seeds.is_empty() {
            return Err(SchedulerError::EmptyCorpus);
        }
        self.cull();
        let any_favored = self.seeds.iter().any(|s| s.favored);
        let n = self.seeds.len();
        for _ in 0..n {
            let i = self.cursor % n;
            self.cursor = (i + 1) % n;
            let s = &self.seeds[i];
            if any_favored && !s.favored {
                let p = if s.was_fuzzed() { SKIP_FUZZED_NONFAV } else { SKIP_FRESH_NONFAV };
                if rng.gen_bool(p) {
                    continue;
                }
            }
            return Ok(i);
        }
        let i = self.cursor % n;
        self.cursor = (i + 1) % n;
        Ok(i)
    }
}

/// Iterations granted to one selection of `seed`.
pub fn assign_energy(seed: &Seed) -> EnergyBudget {
    let base = if seed.favored { ENERGY_BASE } else { ENERGY_BASE / 2 };
    let halvings = (seed.fuzz_count / ENERGY_DECAY_STEP).min(ENERGY_MAX_HALVINGS);
    EnergyBudget::new(base >> halvings)
}

/// `(seeds_generated + 1) / (fuzz_count + 1)`.
pub fn point_score(p: &Statepoint) -> f64 {
    p.score()
}

/// Pick among `scores.len()` candidates with probability proportional to score.
pub fn weighted_pick<R: Rng>(scores: &[f64], rng: &mut R) -> usize {
    let total: f64 = scores.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return rng.gen_range(0..scores.len());
    }
    let mut x = rng.gen_range(0.0..total);
    for (i, s) in scores.iter().enumerate() {
        if x < *s {
            return i;
        }
        x -= s;
    }
    scores.len() - 1
}

/// Choose a target among reachable statepoints.
///
/// Never-fuzzed points win outright (first in order). Otherwise pick in
/// proportion to [`point_score`], or uniformly when `weighted` is false.
/// Returns an index into `reachable`.
pub fn select_statepoint<R: Rng>(
    reachable: &[&Statepoint],
    weighted: bool,
    rng: &mut R,
) -> Result<usize, SchedulerError> {
    if reachable.is_empty() {
        return Err(SchedulerError::NothingReachable);
    }
    if let Some(i) = reachable.iter().position(|p| !p.was_fuzzed) {
        return Ok(i);
    }
    if !weighted {
        return Ok(rng.gen_range(0..reachable.len()));
    }
    let scores: Vec<f64> = reachable.iter().map(|p| point_score(p)).collect();
    Ok(weighted_pick(&scores, rng))
}

/// Message indices to mutate for the covered point at `target`.
pub fn select_mutation_message(
    cs: &ConstructedSequence,
    target: usize,
) -> Result<Range<usize>, SequencerError> {
    Ok(split_mutation_regions(cs, target)?.candidate)
}
