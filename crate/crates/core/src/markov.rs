//! Per-round path trigger probabilities under three scheduling models.
//!
//! Each seed `t_i` exercises one discovered path and mutates into path `j`
//! with probability `p_ij`. A round of coverage-guided fuzzing selects the
//! minimal bitmap-covering seed set `T^b`; the state-first scheduler selects
//! a state and then only seeds mapped to it, which reaches `T^{Mb}`, one
//! covering seed per state; reverse state selection picks seeds first and so
//! keeps all of `T^b`.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MarkovError {
    #[error("path {0} is already discovered or out of range")]
    NotUndiscovered(usize),
    #[error("seed {seed}: row has {got} entries, expected {expected}")]
    RowLength { seed: u32, got: usize, expected: usize },
    #[error("seed {seed}: row sums to {sum}, above 1")]
    RowMass { seed: u32, sum: f64 },
    #[error("seed {seed}: probability {value} out of range")]
    BadProbability { seed: u32, value: f64 },
    #[error("seed {seed}: path {path} out of range")]
    PathOutOfRange { seed: u32, path: usize },
    #[error("duplicate seed id {0}")]
    DuplicateSeed(u32),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MarkovSeed {
    pub id: u32,
    /// The discovered path this seed exercises.
    pub path: usize,
    /// Protocol state the seed is filed under, if any.
    pub state: Option<u32>,
    /// Bitmap bits the seed covers.
    pub cover: BTreeSet<u32>,
    /// `row[j]` = probability this seed mutates into path `j`.
    pub row: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MarkovInstance {
    pub path_count: usize,
    pub seeds: Vec<MarkovSeed>,
}

/// All three quantities for one target path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundProbabilities {
    pub cgf: f64,
    pub scgf: f64,
    pub rss: f64,
}

const MASS_SLACK: f64 = 1e-9;

impl MarkovInstance {
    pub fn validate(&self) -> Result<(), MarkovError> {
        let mut ids = BTreeSet::new();
        for s in &self.seeds {
            if !ids.insert(s.id) {
                return Err(MarkovError::DuplicateSeed(s.id));
            }
            if s.path >= self.path_count {
                return Err(MarkovError::PathOutOfRange { seed: s.id, path: s.path });
            }
            if s.row.len() != self.path_count {
                return Err(MarkovError::RowLength {
                    seed: s.id,
                    got: s.row.len(),
                    expected: self.path_count,
                });
            }
            if let Some(&v) = s.row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(MarkovError::BadProbability { seed: s.id, value: v });
            }
            let sum: f64 = s.row.iter().sum();
            if sum > 1.0 + MASS_SLACK {
                return Err(MarkovError::RowMass { seed: s.id, sum });
            }
        }
        Ok(())
    }

    /// S⁺
    pub fn discovered(&self) -> BTreeSet<usize> {
        self.seeds.iter().map(|s| s.path).collect()
    }

    /// S⁻
    pub fn undiscovered(&self) -> BTreeSet<usize> {
        let d = self.discovered();
        (0..self.path_count).filter(|j| !d.contains(j)).collect()
    }

    /// M⁺: states with at least one seed.
    pub fn covered_states(&self) -> BTreeSet<u32> {
        self.seeds.iter().filter_map(|s| s.state).collect()
    }

    fn full_cover(&self) -> BTreeSet<u32> {
        self.seeds.iter().flat_map(|s| s.cover.iter().copied()).collect()
    }

    /// `T^b`: seed ids of a smallest subset whose covers union to the whole
    /// covered bitmap. Among equally small subsets the lexicographically
    /// lowest sorted id list wins.
    pub fn bitmap_cover(&self) -> Vec<u32> {
        let full = self.full_cover();
        let mut order: Vec<&MarkovSeed> = self.seeds.iter().collect();
        order.sort_by_key(|s| s.id);
        if full.is_empty() {
            return Vec::new();
        }
        let n = order.len();
        for k in 1..=n {
            // combinations of k indices in lexicographic order
            let mut idx: Vec<usize> = (0..k).collect();
            loop {
                let covered: BTreeSet<u32> =
                    idx.iter().flat_map(|&i| order[i].cover.iter().copied()).collect();
                if covered == full {
                    return idx.iter().map(|&i| order[i].id).collect();
                }
                let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else { break };
                idx[pos] += 1;
                for q in pos + 1..k {
                    idx[q] = idx[q - 1] + 1;
                }
            }
        }
        unreachable!("the full seed set always covers the bitmap")
    }

    /// `T^{Mb}`: for each covered state, the lowest-id seed of `T^b` filed
    /// under it.
    pub fn scgf_selection(&self) -> Vec<u32> {
        let tb: BTreeSet<u32> = self.bitmap_cover().into_iter().collect();
        let mut out = Vec::new();
        for m in self.covered_states() {
            if let Some(s) = self
                .seeds
                .iter()
                .filter(|s| s.state == Some(m) && tb.contains(&s.id))
                .min_by_key(|s| s.id)
            {
                out.push(s.id);
            }
        }
        out.sort_unstable();
        out
    }

    fn check_target(&self, j: usize) -> Result<(), MarkovError> {
        if j >= self.path_count || self.seeds.iter().any(|s| s.path == j) {
            return Err(MarkovError::NotUndiscovered(j));
        }
        Ok(())
    }

    fn mass(&self, ids: &[u32], j: usize) -> f64 {
        self.seeds.iter().filter(|s| ids.contains(&s.id)).map(|s| s.row[j]).sum()
    }

    pub fn p_cgf(&self, j: usize) -> Result<f64, MarkovError> {
        self.check_target(j)?;
        Ok(self.mass(&self.bitmap_cover(), j))
    }

    pub fn p_scgf(&self, j: usize) -> Result<f64, MarkovError> {
        self.check_target(j)?;
        Ok(self.mass(&self.scgf_selection(), j))
    }

    /// Seed-first selection keeps every seed of `T^b`, whatever state is
    /// targeted afterwards.
    pub fn p_rss(&self, j: usize) -> Result<f64, MarkovError> {
        self.check_target(j)?;
        Ok(self.mass(&self.bitmap_cover(), j))
    }

    pub fn probabilities(&self, j: usize) -> Result<RoundProbabilities, MarkovError> {
        Ok(RoundProbabilities { cgf: self.p_cgf(j)?, scgf: self.p_scgf(j)?, rss: self.p_rss(j)? })
    }

    /// Whether some state holds two seeds with disjoint, nonempty covers.
    pub fn has_disjoint_state_pair(&self) -> bool {
        self.seeds.iter().enumerate().any(|(i, a)| {
            self.seeds[i + 1..].iter().any(|b| {
                a.state.is_some()
                    && a.state == b.state
                    && !a.cover.is_empty()
                    && !b.cover.is_empty()
                    && a.cover.is_disjoint(&b.cover)
            })
        })
    }
}

/// Bounds for [`random_instance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub max_seeds: usize,
    pub max_states: u32,
    pub max_paths: usize,
    pub bitmap_bits: u32,
    /// Give each seed the same probability towards every undiscovered path.
    pub symmetric: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { max_seeds: 6, max_states: 5, max_paths: 8, bitmap_bits: 10, symmetric: false }
    }
}

/// A random instance with at least one undiscovered path.
pub fn random_instance<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> MarkovInstance {
    let path_count = rng.gen_range(2..=cfg.max_paths.max(2));
    let seed_count = rng.gen_range(1..=cfg.max_seeds.min(path_count - 1).max(1));
    let state_count = rng.gen_range(1..=cfg.max_states.max(1));
    let mut seeds = Vec::with_capacity(seed_count);
    for id in 0..seed_count as u32 {
        let path = rng.gen_range(0..path_count - 1);
        let state = if rng.gen_bool(0.9) { Some(rng.gen_range(0..state_count)) } else { None };
        let mut cover = BTreeSet::new();
        for b in 0..cfg.bitmap_bits {
            if rng.gen_bool(0.3) {
                cover.insert(b);
            }
        }
        if cover.is_empty() {
            cover.insert(rng.gen_range(0..cfg.bitmap_bits));
        }
        seeds.push(MarkovSeed { id, path, state, cover, row: Vec::new() });
    }
    let discovered: BTreeSet<usize> = seeds.iter().map(|s| s.path).collect();
    for s in &mut seeds {
        let budget: f64 = rng.gen_range(0.0..1.0);
        let mut row = alloc::vec![0.0; path_count];
        if cfg.symmetric {
            let undiscovered = path_count - discovered.len();
            let each = budget / path_count as f64;
            for (j, p) in row.iter_mut().enumerate() {
                *p = if discovered.contains(&j) {
                    (budget - each * undiscovered as f64) / discovered.len() as f64
                } else {
                    each
                };
            }
        } else {
            let w: Vec<f64> = (0..path_count).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = w.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            for (p, wj) in row.iter_mut().zip(&w) {
                *p = budget * wj / total;
            }
        }
        s.row = row;
    }
    MarkovInstance { path_count, seeds }
}

/// Two seeds filed under one state with disjoint covers, plus an
/// undiscovered path 2 that both can reach.
pub fn disjoint_cover_instance(p_a: f64, p_b: f64) -> MarkovInstance {
    let seed = |id, path, cover: &[u32], p| MarkovSeed {
        id,
        path,
        state: Some(0),
        cover: cover.iter().copied().collect(),
        row: alloc::vec![0.0, 0.0, p],
    };
    MarkovInstance {
        path_count: 3,
        seeds: alloc::vec![seed(0, 0, &[0, 1], p_a), seed(1, 1, &[2, 3], p_b)],
    }
}
