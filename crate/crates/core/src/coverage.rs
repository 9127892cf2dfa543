//! Edge-coverage bitmap and the global virgin map.

use alloc::vec;
use alloc::vec::Vec;

pub const BITMAP_SIZE: usize = 1 << 16;

/// 64-bit finalizer from splitmix64.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bitmap index of the control-flow edge `prev -> cur`.
pub fn edge_index(prev: u32, cur: u32) -> usize {
    (mix64((u64::from(prev) << 32) | u64::from(cur)) as usize) & (BITMAP_SIZE - 1)
}

/// Map a hit count to its bucket bit.
///
/// Buckets: 1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128-255.
pub fn bucket(count: u8) -> u8 {
    match count {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 4,
        4..=7 => 8,
        8..=15 => 16,
        16..=31 => 32,
        32..=127 => 64,
        128..=255 => 128,
    }
}

/// Per-execution hit counters.
///
/// Keeps a list of touched indices so clearing and scanning cost only what
/// the run actually hit.
#[derive(Clone, Debug)]
pub struct CoverageMap {
    counts: Vec<u8>,
    touched: Vec<u32>,
}

impl Default for CoverageMap {
    fn default() -> Self {
        Self::new()
    }
}

impl CoverageMap {
    pub fn new() -> Self {
        Self { counts: vec![0; BITMAP_SIZE], touched: Vec::new() }
    }

    pub fn record_edge(&mut self, prev_block: u32, cur_block: u32) {
        self.hit(edge_index(prev_block, cur_block));
    }

    /// Bump one counter directly; counters saturate at 255.
    pub fn hit(&mut self, index: usize) {
        let c = &mut self.counts[index & (BITMAP_SIZE - 1)];
        if *c == 0 {
            self.touched.push((index & (BITMAP_SIZE - 1)) as u32);
        }
        *c = c.saturating_add(1);
    }

    pub fn get(&self, index: usize) -> u8 {
        self.counts[index]
    }

    pub fn counts(&self) -> &[u8] {
        &self.counts
    }

    pub fn clear(&mut self) {
        for &i in &self.touched {
            self.counts[i as usize] = 0;
        }
        self.touched.clear();
    }

    /// Replace the contents with a raw dense buffer (external coverage feed).
    pub fn load_dense(&mut self, raw: &[u8]) {
        self.clear();
        for (i, &c) in raw.iter().take(BITMAP_SIZE).enumerate() {
            if c != 0 {
                self.counts[i] = c;
                self.touched.push(i as u32);
            }
        }
    }

    /// Indices with a non-zero count, ascending.
    pub fn hit_indices(&self) -> Vec<u32> {
        let mut v = self.touched.clone();
        v.sort_unstable();
        v
    }

    pub fn is_empty(&self) -> bool {
        self.touched.is_empty()
    }

    /// Checksum over the bucketed trace. Equal for runs whose hit counts fall
    /// in the same buckets.
    pub fn signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for i in self.hit_indices() {
            let b = bucket(self.counts[i as usize]);
            h = mix64(h ^ ((u64::from(i) << 8) | u64::from(b)));
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Novelty {
    None,
    NewCountBucket,
    NewEdge,
}

/// Bits never seen across the campaign, one byte per bitmap slot.
#[derive(Clone, Debug)]
pub struct VirginMap {
    bits: Vec<u8>,
    edges_seen: usize,
}

impl Default for VirginMap {
    fn default() -> Self {
        Self::new()
    }
}

impl VirginMap {
    pub fn new() -> Self {
        Self { bits: vec![0xff; BITMAP_SIZE], edges_seen: 0 }
    }

    /// Number of bitmap slots seen at least once.
    pub fn edges_seen(&self) -> usize {
        self.edges_seen
    }

    /// Total bucket bits cleared so far.
    pub fn bits_cleared(&self) -> usize {
        self.bits.iter().map(|b| (!b).count_ones() as usize).sum()
    }

    pub fn raw(&self) -> &[u8] {
        &self.bits
    }

    /// Classify `run` against the virgin map and clear the bits it covers.
    pub fn is_interesting(&mut self, run: &CoverageMap) -> Novelty {
        let mut verdict = Novelty::None;
        for &i in &run.touched {
            let i = i as usize;
            let b = bucket(run.counts[i]);
            let v = &mut self.bits[i];
            if b & *v != 0 {
                if *v == 0xff {
                    verdict = Novelty::NewEdge;
                    self.edges_seen += 1;
                } else if verdict == Novelty::None {
                    verdict = Novelty::NewCountBucket;
                }
                *v &= !b;
            }
        }
        verdict
    }

    /// Like [`Self::is_interesting`] but leaves the map untouched.
    pub fn would_be_interesting(&self, run: &CoverageMap) -> Novelty {
        let mut verdict = Novelty::None;
        for &i in &run.touched {
            let i = i as usize;
            let b = bucket(run.counts[i]);
            let v = self.bits[i];
            if b & v != 0 {
                if v == 0xff {
                    return Novelty::NewEdge;
                }
                verdict = Novelty::NewCountBucket;
            }
        }
        verdict
    }
}

/// Free function form of [`VirginMap::is_interesting`].
pub fn is_interesting(run: &CoverageMap, virgin: &mut VirginMap) -> Novelty {
    virgin.is_interesting(run)
}
