//! Havoc-style mutation of the candidate (M2) messages.

use alloc::vec::Vec;

use rand::Rng;

use crate::model::Message;

/// Upper bound on the bytes of one constructed sequence.
pub const MAX_SEQ_BYTES: usize = 1 << 20;
/// Largest stacking count; counts are drawn as powers of two up to this.
pub const MAX_STACK: usize = 16;

const ARITH_MAX: u8 = 35;
const BLOCK_MAX: usize = 32;

const INTERESTING_8: [u8; 9] = [0x80, 0xff, 0x00, 0x01, 0x10, 0x20, 0x40, 0x64, 0x7f];
const INTERESTING_16: [u16; 10] =
    [0x8000, 0xff7f, 0x0080, 0x00ff, 0x0100, 0x0200, 0x03e8, 0x0400, 0x1000, 0x7fff];
const INTERESTING_32: [u32; 8] = [
    0x8000_0000,
    0xfa00_0000,
    0xffff_7fff,
    0x0000_8000,
    0x0000_ffff,
    0x0001_0000,
    0x05ff_ff00,
    0x7fff_ffff,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationOp {
    ByteFlip,
    ByteReplace,
    ArithDelta,
    InterestingValueInsert,
    BlockDelete,
    BlockDuplicate,
    MessageInsertFromCorpus,
    MessageDuplicate,
    MessageDelete,
    SpliceBytes,
}

impl MutationOp {
    pub const ALL: [MutationOp; 10] = [
        MutationOp::ByteFlip,
        MutationOp::ByteReplace,
        MutationOp::ArithDelta,
        MutationOp::InterestingValueInsert,
        MutationOp::BlockDelete,
        MutationOp::BlockDuplicate,
        MutationOp::MessageInsertFromCorpus,
        MutationOp::MessageDuplicate,
        MutationOp::MessageDelete,
        MutationOp::SpliceBytes,
    ];
}

fn total_bytes(msgs: &[Message]) -> usize {
    msgs.iter().map(Message::len).sum()
}

/// Draw a stacking count from {1, 2, 4, 8, 16}.
pub fn stack_count<R: Rng>(rng: &mut R) -> usize {
    1 << rng.gen_range(0..=MAX_STACK.trailing_zeros())
}

/// Mutate `m2` with a random stack of operations.
///
/// `budget` caps the total output bytes (callers pass what is left of
/// [`MAX_SEQ_BYTES`] after the untouched prefix and suffix).
pub fn mutate<R: Rng>(m2: &[Message], pool: &[Message], rng: &mut R, budget: usize) -> Vec<Message> {
    let n = stack_count(rng);
    mutate_stacked(m2, pool, rng, budget, n)
}

/// Apply exactly `stack` random operations. `stack == 0` returns the input.
pub fn mutate_stacked<R: Rng>(
    m2: &[Message],
    pool: &[Message],
    rng: &mut R,
    budget: usize,
    stack: usize,
) -> Vec<Message> {
    let mut out = m2.to_vec();
    if out.is_empty() {
        return out;
    }
    for _ in 0..stack {
        let op = MutationOp::ALL[rng.gen_range(0..MutationOp::ALL.len())];
        apply(op, &mut out, pool, rng, budget);
    }
    out
}

/// Apply one operation in place. Returns false when it had to be skipped
/// (nothing to do, or the result would exceed `budget`).
pub fn apply<R: Rng>(
    op: MutationOp,
    msgs: &mut Vec<Message>,
    pool: &[Message],
    rng: &mut R,
    budget: usize,
) -> bool {
    if msgs.is_empty() {
        return false;
    }
    let room = budget.saturating_sub(total_bytes(msgs));
    let mi = rng.gen_range(0..msgs.len());
    match op {
        MutationOp::ByteFlip => {
            let p = &mut msgs[mi].payload;
            if p.is_empty() {
                return false;
            }
            let bit = rng.gen_range(0..p.len() * 8);
            p[bit / 8] ^= 0x80 >> (bit % 8);
        }
        MutationOp::ByteReplace => {
            let p = &mut msgs[mi].payload;
            if p.is_empty() {
                return false;
            }
            let i = rng.gen_range(0..p.len());
            p[i] ^= rng.gen_range(1..=255u8);
        }
        MutationOp::ArithDelta => {
            let p = &mut msgs[mi].payload;
            if p.is_empty() {
                return false;
            }
            let i = rng.gen_range(0..p.len());
            let d = rng.gen_range(1..=ARITH_MAX);
            p[i] = if rng.gen_bool(0.5) { p[i].wrapping_add(d) } else { p[i].wrapping_sub(d) };
        }
        MutationOp::InterestingValueInsert => {
            let mut bytes = [0u8; 4];
            let width = match rng.gen_range(0..3) {
                0 => {
                    bytes[0] = INTERESTING_8[rng.gen_range(0..INTERESTING_8.len())];
                    1
                }
                1 => {
                    let v = INTERESTING_16[rng.gen_range(0..INTERESTING_16.len())];
                    let b = if rng.gen_bool(0.5) { v.to_le_bytes() } else { v.to_be_bytes() };
                    bytes[..2].copy_from_slice(&b);
                    2
                }
                _ => {
                    let v = INTERESTING_32[rng.gen_range(0..INTERESTING_32.len())];
                    bytes = if rng.gen_bool(0.5) { v.to_le_bytes() } else { v.to_be_bytes() };
                    4
                }
            };
            let p = &mut msgs[mi].payload;
            if p.len() >= width && rng.gen_bool(0.5) {
                // overwrite in place
                let at = rng.gen_range(0..=p.len() - width);
                p[at..at + width].copy_from_slice(&bytes[..width]);
            } else {
                if room < width {
                    return false;
                }
                let at = rng.gen_range(0..=p.len());
                p.splice(at..at, bytes[..width].iter().copied());
            }
        }
        MutationOp::BlockDelete => {
            let p = &mut msgs[mi].payload;
            if p.len() < 2 {
                return false;
            }
            let len = rng.gen_range(1..=(p.len() - 1).min(BLOCK_MAX));
            let at = rng.gen_range(0..=p.len() - len);
            p.drain(at..at + len);
        }
        MutationOp::BlockDuplicate => {
            let p = &mut msgs[mi].payload;
            if p.is_empty() {
                return false;
            }
            let len = rng.gen_range(1..=p.len().min(BLOCK_MAX));
            if len > room {
                return false;
            }
            let from = rng.gen_range(0..=p.len() - len);
            let to = rng.gen_range(0..=p.len());
            let block: Vec<u8> = p[from..from + len].to_vec();
            p.splice(to..to, block);
        }
        MutationOp::MessageInsertFromCorpus => {
            if pool.is_empty() {
                return false;
            }
            let m = &pool[rng.gen_range(0..pool.len())];
            if m.is_empty() || m.len() > room {
                return false;
            }
            let at = rng.gen_range(0..=msgs.len());
            msgs.insert(at, m.clone());
        }
        MutationOp::MessageDuplicate => {
            if msgs[mi].len() > room {
                return false;
            }
            let m = msgs[mi].clone();
            msgs.insert(mi + 1, m);
        }
        MutationOp::MessageDelete => {
            if msgs.len() < 2 {
                return false;
            }
            msgs.remove(mi);
        }
        MutationOp::SpliceBytes => {
            if pool.is_empty() {
                return false;
            }
            let other = &pool[rng.gen_range(0..pool.len())].payload;
            let p = &mut msgs[mi].payload;
            if other.is_empty() || p.is_empty() {
                return false;
            }
            let cut = rng.gen_range(0..p.len());
            let from = rng.gen_range(0..other.len());
            let tail = &other[from..];
            let new_len = cut + tail.len();
            if new_len == 0 || new_len > p.len() + room {
                return false;
            }
            p.truncate(cut);
            p.extend_from_slice(tail);
        }
    }
    true
}
