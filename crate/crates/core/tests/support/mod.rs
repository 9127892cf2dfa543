//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use statefuzz_core::statemap::edge_hash;
use statefuzz_core::{
    Message, PointRef, SeedId, StateId, Statemap, StatepointType, TraceEntry,
};

/// The definitions table, written as a lookup on the two special flags.
pub fn classify_oracle(src: StateId, dst: StateId, _has_successor: bool) -> StatepointType {
    let src_special = matches!(src, StateId::Start | StateId::End);
    let dst_end = matches!(dst, StateId::End);
    match (src_special, dst_end) {
        (false, _) => StatepointType::PointAddedToMap,
        (true, true) => StatepointType::PointZero,
        (true, false) => StatepointType::PointToAdd,
    }
}

pub type ListKey = (StateId, StateId, Vec<u8>);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Containers {
    /// slot -> (src, dst, trigger, owners)
    pub slots: BTreeMap<usize, (StateId, StateId, Vec<u8>, BTreeSet<SeedId>)>,
    pub zero: BTreeMap<ListKey, BTreeSet<SeedId>>,
    pub to_add: BTreeMap<ListKey, BTreeSet<SeedId>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefTrace {
    Step { slot: usize, src: StateId, dst: StateId, msg: usize },
    End { msg: usize },
}

/// Straight-line reference: the source of message `i` is `S0` for the first
/// message and otherwise whatever state the previous message produced.
pub fn reference_asts(
    c: &mut Containers,
    messages: &[Message],
    states: &[StateId],
    state_count: usize,
    owner: SeedId,
) -> Vec<RefTrace> {
    let mut trace = Vec::new();
    let considered = state_count.saturating_sub(1).min(messages.len());
    for i in 0..considered {
        let src = if i == 0 { StateId::Start } else { states[i] };
        let dst = states[i + 1];
        let key = (src, dst, messages[i].payload.clone());
        let src_special = src == StateId::Start || src == StateId::End;
        if src_special && dst == StateId::End {
            c.zero.entry(key).or_default().insert(owner);
        } else if src_special {
            if i + 2 == state_count {
                c.to_add.entry(key).or_default().insert(owner);
            }
        } else {
            let slot = edge_hash(src, dst);
            c.slots
                .entry(slot)
                .or_insert_with(|| (src, dst, messages[i].payload.clone(), BTreeSet::new()))
                .3
                .insert(owner);
            trace.push(RefTrace::Step { slot, src, dst, msg: i });
            if dst == StateId::End {
                trace.push(RefTrace::End { msg: i });
            }
        }
    }
    trace
}

pub fn snapshot(map: &Statemap) -> Containers {
    let mut c = Containers::default();
    for (i, p) in map.slots() {
        c.slots.insert(i, (p.src, p.dst, p.trigger_message.payload.clone(), p.covering_seeds.clone()));
    }
    for p in map.zero_list() {
        c.zero.insert((p.src, p.dst, p.trigger_message.payload.clone()), p.covering_seeds.clone());
    }
    for p in map.to_add_list() {
        c.to_add.insert((p.src, p.dst, p.trigger_message.payload.clone()), p.covering_seeds.clone());
    }
    c
}

pub fn trace_as_ref(trace: &[TraceEntry]) -> Vec<RefTrace> {
    trace
        .iter()
        .map(|e| match *e {
            TraceEntry::Transition { point: PointRef::Map(slot), src, dst, message_index } => {
                RefTrace::Step { slot, src, dst, msg: message_index }
            }
            TraceEntry::Transition { point, .. } => panic!("trace points outside the map: {point:?}"),
            TraceEntry::End { message_index } => RefTrace::End { msg: message_index },
        })
        .collect()
}

/// One random run: up to 12 messages over at most 5 distinct codes, each
/// response an end state with probability 0.2.
pub struct AstsCase {
    pub messages: Vec<Message>,
    pub states: Vec<StateId>,
    pub state_count: usize,
}

pub fn random_asts_case<R: Rng>(rng: &mut R) -> AstsCase {
    let n_codes = rng.gen_range(1..=5);
    let codes: Vec<u16> = (0..n_codes).map(|_| rng.gen_range(100..600)).collect();
    let len = rng.gen_range(0..=12);
    // small payload alphabet so list dedup gets exercised
    let messages: Vec<Message> =
        (0..len).map(|_| Message::new(vec![b'a' + rng.gen_range(0..4u8)])).collect();
    let mut states = vec![StateId::Code(codes[0])];
    for _ in 0..len {
        states.push(if rng.gen_bool(0.2) {
            StateId::End
        } else {
            StateId::Code(codes[rng.gen_range(0..codes.len())])
        });
    }
    // runs cut short by a crash or hang observe fewer states
    if len > 0 && rng.gen_bool(0.2) {
        states.truncate(rng.gen_range(1..=len + 1));
    }
    let state_count = if rng.gen_bool(0.8) { states.len() } else { rng.gen_range(0..=states.len()) };
    AstsCase { messages, states, state_count }
}

pub fn line(s: &str) -> Message {
    Message::new(format!("{s}\r\n").into_bytes())
}

/// Three toy-protocol seeds, each crossing at least two end states.
pub fn toy_seeds() -> Vec<Vec<Message>> {
    vec![
        ["USER anonymous", "PASS secret", "TYPE I", "PASV", "LIST", "QUIT", "USER anonymous", "PASS wrong"]
            .map(line)
            .to_vec(),
        ["SYST", "USER bob", "PASS secret", "CWD /", "QUIT", "FEAT", "QUIT"].map(line).to_vec(),
        ["USER anonymous", "PASS secret", "PORT 1,2,3,4,5,6", "RETR readme.txt", "QUIT", "PASS x"]
            .map(line)
            .to_vec(),
    ]
}

/// `T^b` by trying every subset of seeds.
pub fn cover_by_enumeration(inst: &statefuzz_core::markov::MarkovInstance) -> Vec<u32> {
    let mut ids: Vec<u32> = inst.seeds.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    let full: BTreeSet<u32> = inst.seeds.iter().flat_map(|s| s.cover.iter().copied()).collect();
    let cover_of = |id: u32| &inst.seeds.iter().find(|s| s.id == id).unwrap().cover;
    let mut best: Option<Vec<u32>> = None;
    for mask in 0u32..(1 << ids.len()) {
        let subset: Vec<u32> =
            ids.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &id)| id).collect();
        let covered: BTreeSet<u32> = subset.iter().flat_map(|&id| cover_of(id).iter().copied()).collect();
        if covered != full {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => (subset.len(), &subset) < (b.len(), b),
        };
        if better {
            best = Some(subset);
        }
    }
    best.unwrap_or_default()
}

/// (cgf, scgf, rss) for path `j`, from the enumerated cover.
pub fn markov_oracle(inst: &statefuzz_core::markov::MarkovInstance, j: usize) -> (f64, f64, f64) {
    let tb = cover_by_enumeration(inst);
    let row = |id: u32| inst.seeds.iter().find(|s| s.id == id).unwrap().row[j];
    let cgf: f64 = tb.iter().map(|&id| row(id)).sum();
    let mut per_state: BTreeMap<u32, u32> = BTreeMap::new();
    for &id in &tb {
        if let Some(m) = inst.seeds.iter().find(|s| s.id == id).unwrap().state {
            let e = per_state.entry(m).or_insert(id);
            *e = (*e).min(id);
        }
    }
    let mut mb: Vec<u32> = per_state.into_values().collect();
    mb.sort_unstable();
    let scgf: f64 = mb.iter().map(|&id| row(id)).sum();
    (cgf, scgf, cgf)
}
