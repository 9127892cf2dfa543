//! The statemap: a flat, hash-indexed array of observed state transitions.
//!
//! Valid transitions (live source state) live in the hashed slots. Transitions
//! out of `S_0`/`S_end` are kept in two side lists: the POINT_ZERO list for
//! those that end in `S_end` again, and the to-add list for those that reach a
//! live state but were never followed by another message.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::coverage::mix64;
use crate::model::{
    Message, PointRef, Seed, SeedId, StateId, Statepoint, TraceEntry,
};

pub const MAP_SIZE: usize = 1 << 16;
/// Bound on each side list; the least recently touched entry is evicted.
pub const LIST_CAPACITY: usize = 4096;
/// Promotion attempts before a to-add point stops preempting construction.
pub const PROMOTION_ATTEMPT_CAP: u32 = 3;

const EDGE_SALT: u64 = 0x5bd1_e995_7f4a_7c15;

/// Slot index of the transition `<src, dst>`.
pub fn edge_hash(src: StateId, dst: StateId) -> usize {
    let key = (u64::from(src.encode()) << 32) | u64::from(dst.encode());
    (mix64(key ^ EDGE_SALT) as usize) & (MAP_SIZE - 1)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatemapError {
    #[error("{states} states recorded for {messages} messages (at most one more state than messages)")]
    TooManyStates { states: usize, messages: usize },
    #[error("state count {count} exceeds the {len} states supplied")]
    StateCountOutOfRange { count: usize, len: usize },
    #[error("S_0 appears at state position {0}; only the connect response may precede messages")]
    StartMidSequence(usize),
}

/// Outcome of one promotion attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Promotion {
    /// The to-add entry was consumed; the formed transition occupies `slot`.
    Promoted { slot: usize },
    Retained { attempts: u32 },
    NotFound,
}

/// An executed run started by a to-add point's trigger message.
#[derive(Debug, Clone, Copy)]
pub struct PromotionWindow<'a> {
    pub point: u32,
    pub messages: &'a [Message],
    pub states: &'a [StateId],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ListKind {
    Zero,
    ToAdd,
}

#[derive(Clone, Debug)]
pub struct Statemap {
    slots: Vec<Option<Box<Statepoint>>>,
    zero_list: Vec<Statepoint>,
    to_add_list: Vec<Statepoint>,
    occupied: usize,
    collisions: u64,
    clock: u64,
    next_uid: u32,
    retired_seeds_generated: u64,
}

impl Default for Statemap {
    fn default() -> Self {
        Self::new()
    }
}

impl Statemap {
    pub fn new() -> Self {
        let mut slots = Vec::with_capacity(MAP_SIZE);
        slots.resize_with(MAP_SIZE, || None);
        Self {
            slots,
            zero_list: Vec::new(),
            to_add_list: Vec::new(),
            occupied: 0,
            collisions: 0,
            clock: 0,
            next_uid: 0,
            retired_seeds_generated: 0,
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied
    }

    pub fn collision_count(&self) -> u64 {
        self.collisions
    }

    pub fn zero_list(&self) -> &[Statepoint] {
        &self.zero_list
    }

    pub fn to_add_list(&self) -> &[Statepoint] {
        &self.to_add_list
    }

    /// `seeds_generated` carried by entries that left the map (promotion or
    /// eviction).
    pub fn retired_seeds_generated(&self) -> u64 {
        self.retired_seeds_generated
    }

    pub fn total_seeds_generated(&self) -> u64 {
        self.points().map(|(_, p)| p.seeds_generated).sum::<u64>() + self.retired_seeds_generated
    }

    pub fn slot(&self, index: usize) -> Option<&Statepoint> {
        self.slots.get(index).and_then(|s| s.as_deref())
    }

    /// Occupied slots in index order.
    pub fn slots(&self) -> impl Iterator<Item = (usize, &Statepoint)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_deref().map(|p| (i, p)))
    }

    /// Every statepoint: slots by index, then the zero list, then the to-add list.
    pub fn points(&self) -> impl Iterator<Item = (PointRef, &Statepoint)> {
        self.slots()
            .map(|(i, p)| (PointRef::Map(i), p))
            .chain(self.zero_list.iter().map(|p| (PointRef::Zero(p.uid), p)))
            .chain(self.to_add_list.iter().map(|p| (PointRef::ToAdd(p.uid), p)))
    }

    pub fn get(&self, r: PointRef) -> Option<&Statepoint> {
        match r {
            PointRef::Map(i) => self.slot(i),
            PointRef::Zero(uid) => self.zero_list.iter().find(|p| p.uid == uid),
            PointRef::ToAdd(uid) => self.to_add_list.iter().find(|p| p.uid == uid),
        }
    }

    pub fn get_mut(&mut self, r: PointRef) -> Option<&mut Statepoint> {
        match r {
            PointRef::Map(i) => self.slots.get_mut(i).and_then(|s| s.as_deref_mut()),
            PointRef::Zero(uid) => self.zero_list.iter_mut().find(|p| p.uid == uid),
            PointRef::ToAdd(uid) => self.to_add_list.iter_mut().find(|p| p.uid == uid),
        }
    }

    /// Slot holding `<src, dst>`, if that exact edge is stored.
    pub fn lookup(&self, src: StateId, dst: StateId) -> Option<usize> {
        let idx = edge_hash(src, dst);
        self.slot(idx).filter(|p| p.src == src && p.dst == dst).map(|_| idx)
    }

    /// To-add entries that may still drive sequence construction.
    pub fn eligible_to_add(&self) -> impl Iterator<Item = &Statepoint> {
        self.to_add_list.iter().filter(|p| p.promotion_attempts < PROMOTION_ATTEMPT_CAP)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn fresh_point(
        &mut self,
        src: StateId,
        dst: StateId,
        response_prev: StateId,
        trigger: &Message,
        owner: Option<SeedId>,
    ) -> Statepoint {
        let uid = self.next_uid;
        self.next_uid += 1;
        let touched = self.tick();
        Statepoint {
            uid,
            src,
            dst,
            response_prev,
            trigger_message: trigger.clone(),
            response_next: dst,
            ptype: crate::model::classify_statepoint(src, dst, false),
            was_fuzzed: false,
            fuzz_count: 0,
            seeds_generated: 0,
            covering_seeds: owner.into_iter().collect::<BTreeSet<_>>(),
            promotion_attempts: 0,
            last_touched: touched,
        }
    }

    fn upsert_slot(
        &mut self,
        src: StateId,
        dst: StateId,
        response_prev: StateId,
        trigger: &Message,
        owner: Option<SeedId>,
    ) -> usize {
        let idx = edge_hash(src, dst);
        let now = self.tick();
        match self.slots[idx].as_deref_mut() {
            Some(p) => {
                if p.src != src || p.dst != dst {
                    // first writer keeps the slot; bookkeeping merges
                    self.collisions += 1;
                }
                if let Some(o) = owner {
                    p.covering_seeds.insert(o);
                }
                p.last_touched = now;
            }
            None => {
                let p = self.fresh_point(src, dst, response_prev, trigger, owner);
                self.slots[idx] = Some(Box::new(p));
                self.occupied += 1;
            }
        }
        idx
    }

    fn list_mut(&mut self, kind: ListKind) -> &mut Vec<Statepoint> {
        match kind {
            ListKind::Zero => &mut self.zero_list,
            ListKind::ToAdd => &mut self.to_add_list,
        }
    }

    fn upsert_list(
        &mut self,
        kind: ListKind,
        src: StateId,
        dst: StateId,
        response_prev: StateId,
        trigger: &Message,
        owner: SeedId,
    ) -> u32 {
        let now = self.tick();
        let list = self.list_mut(kind);
        if let Some(p) = list
            .iter_mut()
            .find(|p| p.src == src && p.dst == dst && p.trigger_message.payload == trigger.payload)
        {
            p.covering_seeds.insert(owner);
            p.last_touched = now;
            return p.uid;
        }
        let p = self.fresh_point(src, dst, response_prev, trigger, Some(owner));
        let uid = p.uid;
        let list = self.list_mut(kind);
        list.push(p);
        if list.len() > LIST_CAPACITY {
            let (victim, _) = list
                .iter()
                .enumerate()
                .filter(|(_, p)| p.uid != uid)
                .min_by_key(|(_, p)| p.last_touched)
                .expect("list over capacity has other entries");
            let evicted = list.remove(victim);
            self.retired_seeds_generated += evicted.seeds_generated;
        }
        uid
    }

    /// Walk an executed run and file its transitions.
    ///
    /// `states[0]` is the connect response; message `mc - 1` produced
    /// `states[mc]`. Only the first `state_count` states are considered.
    /// Returns the owner's statepoint trace: valid transitions in execution
    /// order, each transition into `S_end` followed by an end marker.
    pub fn add_statepoints(
        &mut self,
        messages: &[Message],
        states: &[StateId],
        state_count: usize,
        owner: SeedId,
    ) -> Result<Vec<TraceEntry>, StatemapError> {
        if states.len() > messages.len() + 1 {
            return Err(StatemapError::TooManyStates {
                states: states.len(),
                messages: messages.len(),
            });
        }
        if state_count > states.len() {
            return Err(StatemapError::StateCountOutOfRange {
                count: state_count,
                len: states.len(),
            });
        }
        if let Some(pos) = states.iter().skip(1).position(|s| *s == StateId::Start) {
            return Err(StatemapError::StartMidSequence(pos + 1));
        }

        let mut trace = Vec::new();
        if state_count == 0 {
            return Ok(trace);
        }
        let last = messages.len().min(state_count - 1);
        // true while the previous message left the target in a live state
        let mut prev_live = false;
        for mc in 1..=last {
            let msg = &messages[mc - 1];
            let before = states[mc - 1];
            let dst = states[mc];
            if !prev_live {
                let src = if mc == 1 { StateId::Start } else { StateId::End };
                if dst.is_end() {
                    self.upsert_list(ListKind::Zero, src, dst, before, msg, owner);
                } else {
                    if mc == state_count - 1 {
                        self.upsert_list(ListKind::ToAdd, src, dst, before, msg, owner);
                    }
                    prev_live = true;
                }
            } else {
                let slot = self.upsert_slot(before, dst, before, msg, Some(owner));
                trace.push(TraceEntry::Transition {
                    point: PointRef::Map(slot),
                    src: before,
                    dst,
                    message_index: mc - 1,
                });
                if dst.is_end() {
                    trace.push(TraceEntry::End { message_index: mc - 1 });
                    prev_live = false;
                }
            }
        }
        Ok(trace)
    }

    /// Whether a run's states contain a valid transition whose slot is still
    /// empty. Mirrors the insertion walk without touching the map.
    pub fn has_unseen_transition(&self, states: &[StateId]) -> bool {
        let mut prev_live = false;
        for mc in 1..states.len() {
            let dst = states[mc];
            if prev_live {
                if self.slot(edge_hash(states[mc - 1], dst)).is_none() {
                    return true;
                }
                prev_live = !dst.is_end();
            } else {
                prev_live = !dst.is_end();
            }
        }
        false
    }

    /// Account one fuzzing iteration against `r`. Credits for points that no
    /// longer exist go to the retired counter.
    pub fn credit_fuzz(&mut self, r: PointRef, seed_added: bool) {
        match self.get_mut(r) {
            Some(p) => {
                p.fuzz_count += 1;
                p.was_fuzzed = true;
                if seed_added {
                    p.seeds_generated += 1;
                }
            }
            None => {
                if seed_added {
                    self.retired_seeds_generated += 1;
                }
            }
        }
    }

    /// Run the insertion walk over a seed's recorded states and store the
    /// resulting trace on the seed.
    pub fn record_seed(&mut self, seed: &mut Seed) -> Result<(), StatemapError> {
        let states = seed.sequence.states.clone();
        let trace =
            self.add_statepoints(&seed.sequence.messages, &states, states.len(), seed.id)?;
        seed.statepoint_trace = trace;
        seed.subsequence_count = crate::sequencer::subsequence_spans(seed).len();
        if seed.construct_sequence_id >= seed.subsequence_count.max(1) {
            seed.construct_sequence_id = 0;
        }
        Ok(())
    }

    /// Check a to-add point against a run that started with its trigger.
    ///
    /// If the first response re-entered the point's destination and a second
    /// response followed, the valid transition `<dst, next>` is stored and the
    /// to-add entry is consumed. Otherwise the attempt counter grows, and once
    /// it reaches [`PROMOTION_ATTEMPT_CAP`] the entry moves to the list tail.
    pub fn promote_to_add_points(&mut self, window: PromotionWindow<'_>) -> Promotion {
        let Some(pos) = self.to_add_list.iter().position(|p| p.uid == window.point) else {
            return Promotion::NotFound;
        };
        let dst = self.to_add_list[pos].dst;
        let formed = window.states.len() >= 3
            && window.messages.len() >= 2
            && window.states[1] == dst
            && !dst.is_special();
        if formed {
            let next = window.states[2];
            let slot = self.upsert_slot(dst, next, dst, &window.messages[1], None);
            let consumed = self.to_add_list.remove(pos);
            self.retired_seeds_generated += consumed.seeds_generated;
            return Promotion::Promoted { slot };
        }
        let p = &mut self.to_add_list[pos];
        p.promotion_attempts += 1;
        let attempts = p.promotion_attempts;
        if attempts >= PROMOTION_ATTEMPT_CAP {
            let p = self.to_add_list.remove(pos);
            self.to_add_list.push(p);
        }
        Promotion::Retained { attempts }
    }

    /// Graphviz rendering: nodes are states, edges are statepoints.
    pub fn export_dot(&self) -> String {
        let mut out = String::from("digraph statemap {\n  rankdir=LR;\n");
        let mut specials = BTreeSet::new();
        for (_, p) in self.points() {
            for s in [p.src, p.dst] {
                if s.is_special() {
                    specials.insert(s);
                }
            }
        }
        for s in specials {
            let shape = if s == StateId::Start { "doublecircle" } else { "doubleoctagon" };
            let _ = writeln!(out, "  \"{s}\" [shape={shape}];");
        }
        for (r, p) in self.points() {
            let place = match r {
                PointRef::Map(i) => alloc::format!("slot {i}"),
                PointRef::Zero(_) => String::from("zero list"),
                PointRef::ToAdd(_) => String::from("to-add list"),
            };
            let _ = writeln!(
                out,
                "  \"{}\" -> \"{}\" [label=\"{}\\n{} fuzz={} seeds={}\"];",
                p.src, p.dst, p.ptype, place, p.fuzz_count, p.seeds_generated
            );
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StatepointType;

    fn c(code: u16) -> StateId {
        StateId::Code(code)
    }

    fn msgs(n: usize) -> Vec<Message> {
        (0..n).map(|i| Message::new(alloc::format!("M{i}\r\n").into_bytes())).collect()
    }

    #[test]
    fn hash_is_deterministic_and_directional() {
        assert_eq!(edge_hash(c(331), c(331)), edge_hash(c(331), c(331)));
        assert_ne!(edge_hash(c(331), c(230)), edge_hash(c(230), c(331)));
    }

    #[test]
    fn empty_run_leaves_map_unchanged() {
        let mut m = Statemap::new();
        let t = m.add_statepoints(&[], &[], 0, SeedId(1)).unwrap();
        assert!(t.is_empty());
        assert_eq!(m.occupied_count(), 0);
        assert!(m.zero_list().is_empty() && m.to_add_list().is_empty());
    }

    #[test]
    fn rejects_more_states_than_messages_plus_one() {
        let mut m = Statemap::new();
        let err = m.add_statepoints(&msgs(1), &[c(220), c(331), c(230)], 3, SeedId(0));
        assert_eq!(err, Err(StatemapError::TooManyStates { states: 3, messages: 1 }));
        let err = m.add_statepoints(&msgs(2), &[c(220), c(331)], 3, SeedId(0));
        assert!(matches!(err, Err(StatemapError::StateCountOutOfRange { .. })));
    }

    #[test]
    fn repeated_edge_updates_bookkeeping_only() {
        let mut m = Statemap::new();
        let states = [c(220), c(331), c(230), c(331), c(230)];
        let trace = m.add_statepoints(&msgs(4), &states, 5, SeedId(3)).unwrap();
        // <331,230>, <230,331>, <331,230>
        assert_eq!(trace.len(), 3);
        assert_eq!(m.occupied_count(), 2);
        let slot = m.lookup(c(331), c(230)).unwrap();
        assert_eq!(m.slot(slot).unwrap().covering_seeds.len(), 1);
        m.add_statepoints(&msgs(4), &states, 5, SeedId(4)).unwrap();
        assert_eq!(m.occupied_count(), 2);
        assert_eq!(m.slot(slot).unwrap().covering_seeds.len(), 2);
    }

    #[test]
    fn promotion_consumes_to_add_entry() {
        let mut m = Statemap::new();
        let ms = msgs(1);
        m.add_statepoints(&ms, &[c(220), c(2)], 2, SeedId(0)).unwrap();
        assert_eq!(m.to_add_list().len(), 1);
        let uid = m.to_add_list()[0].uid;
        let run = msgs(2);
        let r = m.promote_to_add_points(PromotionWindow {
            point: uid,
            messages: &run,
            states: &[c(220), c(2), c(3)],
        });
        let Promotion::Promoted { slot } = r else { panic!("{r:?}") };
        assert_eq!(slot, edge_hash(c(2), c(3)));
        assert!(m.to_add_list().is_empty());
        assert_eq!(m.slot(slot).unwrap().ptype, StatepointType::PointAddedToMap);
    }

    #[test]
    fn promotion_retries_then_deprioritises() {
        let mut m = Statemap::new();
        m.add_statepoints(&msgs(1), &[c(220), c(2)], 2, SeedId(0)).unwrap();
        m.add_statepoints(&[Message::new(*b"X\r\n")], &[c(220), c(7)], 2, SeedId(1)).unwrap();
        let uid = m.to_add_list()[0].uid;
        let run = msgs(2);
        for attempt in 1..=3 {
            let r = m.promote_to_add_points(PromotionWindow {
                point: uid,
                messages: &run,
                states: &[c(220), c(9), c(3)],
            });
            assert_eq!(r, Promotion::Retained { attempts: attempt });
        }
        assert_eq!(m.to_add_list().len(), 2);
        assert_eq!(m.to_add_list()[1].uid, uid);
        assert_eq!(m.eligible_to_add().count(), 1);
        let r = m.promote_to_add_points(PromotionWindow { point: 999, messages: &run, states: &[] });
        assert_eq!(r, Promotion::NotFound);
    }

    #[test]
    fn empty_to_add_list_no_change() {
        let mut m = Statemap::new();
        assert_eq!(
            m.promote_to_add_points(PromotionWindow { point: 0, messages: &[], states: &[] }),
            Promotion::NotFound
        );
        assert_eq!(m.occupied_count(), 0);
    }

    #[test]
    fn dot_for_empty_and_single_edge() {
        let m = Statemap::new();
        assert_eq!(m.export_dot(), "digraph statemap {\n  rankdir=LR;\n}\n");
        let mut m = Statemap::new();
        m.add_statepoints(&msgs(2), &[c(220), c(331), c(230)], 3, SeedId(0)).unwrap();
        let dot = m.export_dot();
        assert_eq!(dot.lines().filter(|l| l.contains("->")).count(), 1);
        assert!(dot.contains("\"331\" -> \"230\""));
    }

    #[test]
    fn list_eviction_is_least_recently_touched() {
        let mut m = Statemap::new();
        for i in 0..=LIST_CAPACITY {
            let msg = Message::new(alloc::format!("Q{i}").into_bytes());
            m.add_statepoints(&[msg], &[c(220), StateId::End], 2, SeedId(i as u32)).unwrap();
        }
        assert_eq!(m.zero_list().len(), LIST_CAPACITY);
        assert!(m.zero_list().iter().all(|p| p.trigger_message.payload != b"Q0"));
    }
}
