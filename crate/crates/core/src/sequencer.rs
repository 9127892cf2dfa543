//! Per-iteration message sequence construction.
//!
//! A seed's statepoint trace is cut at every `S_end` marker. Each non-empty
//! piece is a subsequence; the seed's `construct_sequence_id` says which one is
//! under test. A subsequence is emitted together with the message that opened
//! its connection, so executing it replays the same transitions the trace
//! recorded.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::model::{Message, PointRef, Seed, StateId, TraceEntry};
use crate::statemap::Statemap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SequencerError {
    #[error("seed has no messages")]
    EmptySeed,
    #[error("seed has no valid transitions and no to-add points are pending")]
    Unconstructible,
    #[error("target index {index} is not among the {len} covered points")]
    TargetNotCovered { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    FromToAddList,
    FromSeedSubsequence,
}

/// A statepoint that a constructed sequence is expected to trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoveredPoint {
    pub point: PointRef,
    /// Index into the constructed messages of the triggering message.
    pub message_index: usize,
    pub src: StateId,
    pub dst: StateId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstructedSequence {
    pub messages: Vec<Message>,
    pub covered_points: Vec<CoveredPoint>,
    pub origin: Origin,
    pub subsequence_id_used: Option<usize>,
}

/// One end-state delimited piece of a seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsequenceSpan {
    /// Messages to send, including the connection-opening message.
    pub messages: Range<usize>,
    /// Transition entries of the trace belonging to this piece.
    pub trace: Vec<usize>,
    /// Whether the piece closes with an `S_end` marker.
    pub closed: bool,
}

/// Split a seed's trace into subsequences. Pieces without any valid
/// transition are skipped.
pub fn subsequence_spans(seed: &Seed) -> Vec<SubsequenceSpan> {
    let mut spans = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let trace = &seed.statepoint_trace;
    let close = |current: &mut Vec<usize>, closed: bool, spans: &mut Vec<SubsequenceSpan>| {
        if current.is_empty() {
            return;
        }
        let idx = |e: usize| match trace[e] {
            TraceEntry::Transition { message_index, .. } => message_index,
            TraceEntry::End { message_index } => message_index,
        };
        let first = idx(current[0]);
        let last = idx(*current.last().unwrap());
        spans.push(SubsequenceSpan {
            messages: first.saturating_sub(1)..last + 1,
            trace: core::mem::take(current),
            closed,
        });
    };
    for (i, e) in trace.iter().enumerate() {
        match e {
            TraceEntry::Transition { .. } => current.push(i),
            TraceEntry::End { .. } => close(&mut current, true, &mut spans),
        }
    }
    close(&mut current, false, &mut spans);
    spans
}

/// Build the message sequence for one fuzzing iteration.
///
/// Eligible to-add points take precedence: the point's trigger is followed by
/// a POINT_ZERO trigger when one exists, else by another to-add trigger, else
/// by itself. Otherwise the seed's current subsequence is emitted.
pub fn construct_message_sequence<R: Rng>(
    map: &Statemap,
    seed: &Seed,
    rng: &mut R,
) -> Result<ConstructedSequence, SequencerError> {
    if seed.sequence.messages.is_empty() {
        return Err(SequencerError::EmptySeed);
    }
    if let Some(head) = map.eligible_to_add().next() {
        let mut messages = vec![head.trigger_message.clone()];
        let mut covered = vec![CoveredPoint {
            point: PointRef::ToAdd(head.uid),
            message_index: 0,
            src: head.src,
            dst: head.dst,
        }];
        let zeros = map.zero_list();
        let others: Vec<_> = map.to_add_list().iter().filter(|p| p.uid != head.uid).collect();
        let (next, point) = if !zeros.is_empty() {
            let z = &zeros[rng.gen_range(0..zeros.len())];
            (z, PointRef::Zero(z.uid))
        } else if !others.is_empty() {
            let o = others[rng.gen_range(0..others.len())];
            (o, PointRef::ToAdd(o.uid))
        } else {
            (head, PointRef::ToAdd(head.uid))
        };
        messages.push(next.trigger_message.clone());
        covered.push(CoveredPoint { point, message_index: 1, src: next.src, dst: next.dst });
        return Ok(ConstructedSequence {
            messages,
            covered_points: covered,
            origin: Origin::FromToAddList,
            subsequence_id_used: None,
        });
    }

    let spans = subsequence_spans(seed);
    if spans.is_empty() {
        return Err(SequencerError::Unconstructible);
    }
    let csi = seed.construct_sequence_id % spans.len();
    let span = &spans[csi];
    let base = span.messages.start;
    let messages = seed.sequence.messages[span.messages.clone()].to_vec();
    let covered_points = span
        .trace
        .iter()
        .filter_map(|&e| match seed.statepoint_trace[e] {
            TraceEntry::Transition { point, src, dst, message_index } => Some(CoveredPoint {
                point,
                message_index: message_index - base,
                src,
                dst,
            }),
            TraceEntry::End { .. } => None,
        })
        .collect();
    Ok(ConstructedSequence {
        messages,
        covered_points,
        origin: Origin::FromSeedSubsequence,
        subsequence_id_used: Some(csi),
    })
}

/// Indices into `cs.covered_points` eligible as fuzzing targets.
///
/// For to-add constructions only the to-add point itself; otherwise every
/// distinct point, first occurrence kept.
pub fn reachable_points(cs: &ConstructedSequence) -> Vec<usize> {
    match cs.origin {
        Origin::FromToAddList => {
            if cs.covered_points.is_empty() {
                Vec::new()
            } else {
                vec![0]
            }
        }
        Origin::FromSeedSubsequence => {
            let mut seen = Vec::new();
            let mut out = Vec::new();
            for (i, c) in cs.covered_points.iter().enumerate() {
                if !seen.contains(&c.point) {
                    seen.push(c.point);
                    out.push(i);
                }
            }
            out
        }
    }
}

/// Move to the next subsequence once every point of the current one has been
/// fuzzed. Wraps after the last one.
pub fn advance_csi(seed: &mut Seed, map: &Statemap) {
    let spans = subsequence_spans(seed);
    if spans.is_empty() {
        seed.construct_sequence_id = 0;
        return;
    }
    let csi = seed.construct_sequence_id % spans.len();
    let done = spans[csi].trace.iter().all(|&e| match seed.statepoint_trace[e] {
        TraceEntry::Transition { point, .. } => map.get(point).is_none_or(|p| p.was_fuzzed),
        TraceEntry::End { .. } => true,
    });
    seed.construct_sequence_id = if done { (csi + 1) % spans.len() } else { csi };
}

/// Prefix / candidate / suffix ranges over a constructed sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Regions {
    pub prefix: Range<usize>,
    pub candidate: Range<usize>,
    pub suffix: Range<usize>,
}

impl Regions {
    pub fn parts<'a>(&self, messages: &'a [Message]) -> (&'a [Message], &'a [Message], &'a [Message]) {
        (
            &messages[self.prefix.clone()],
            &messages[self.candidate.clone()],
            &messages[self.suffix.clone()],
        )
    }
}

/// Split around the covered point at `target`.
///
/// The candidate region starts at the target's trigger message and extends
/// over following messages that were sent while the target stayed in the same
/// source state.
pub fn split_mutation_regions(
    cs: &ConstructedSequence,
    target: usize,
) -> Result<Regions, SequencerError> {
    let t = cs.covered_points.get(target).ok_or(SequencerError::TargetNotCovered {
        index: target,
        len: cs.covered_points.len(),
    })?;
    let start = t.message_index;
    let mut end = start + 1;
    let mut prev = *t;
    for c in &cs.covered_points[target + 1..] {
        if c.message_index != end || prev.dst != t.src || c.src != t.src {
            break;
        }
        end += 1;
        prev = *c;
    }
    let end = end.min(cs.messages.len());
    Ok(Regions { prefix: 0..start, candidate: start..end, suffix: end..cs.messages.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MessageSequence, SeedId};
    use crate::FuzzRng;
    use rand::SeedableRng;

    fn c(code: u16) -> StateId {
        StateId::Code(code)
    }

    fn m(s: &str) -> Message {
        Message::new(s.as_bytes().to_vec())
    }

    fn seed_with(messages: Vec<Message>, states: Vec<StateId>, map: &mut Statemap) -> Seed {
        let mut seq = MessageSequence::new(messages);
        seq.record_states(states);
        let mut seed = Seed::new(SeedId(1), seq);
        map.record_seed(&mut seed).unwrap();
        seed
    }

    #[test]
    fn to_add_then_zero() {
        let mut map = Statemap::new();
        map.add_statepoints(&[m("X")], &[c(220), c(2)], 2, SeedId(0)).unwrap();
        map.add_statepoints(&[m("Z")], &[c(220), StateId::End], 2, SeedId(0)).unwrap();
        // zero points triggered by A (S0 -> Send) and Q (Send -> Send)
        map.add_statepoints(&[m("A"), m("Q")], &[c(220), StateId::End, StateId::End], 3, SeedId(0))
            .unwrap();
        let seed = seed_with(vec![m("A")], vec![c(220), c(5)], &mut Statemap::new());
        let mut rng = FuzzRng::seed_from_u64(1);
        let cs = construct_message_sequence(&map, &seed, &mut rng).unwrap();
        assert_eq!(cs.origin, Origin::FromToAddList);
        assert_eq!(cs.messages[0], m("X"));
        assert!([m("Z"), m("A"), m("Q")].contains(&cs.messages[1]));
        assert!(matches!(cs.covered_points[1].point, PointRef::Zero(_)));
    }

    #[test]
    fn lone_to_add_repeats_itself() {
        let mut map = Statemap::new();
        map.add_statepoints(&[m("X")], &[c(220), c(2)], 2, SeedId(0)).unwrap();
        let seed = seed_with(vec![m("A")], vec![c(220), c(5)], &mut Statemap::new());
        let cs = construct_message_sequence(&map, &seed, &mut FuzzRng::seed_from_u64(0)).unwrap();
        assert_eq!(cs.messages, vec![m("X"), m("X")]);
        assert_eq!(reachable_points(&cs), vec![0]);
        assert_eq!(split_mutation_regions(&cs, 0).unwrap().candidate, 0..1);
    }

    #[test]
    fn subsequence_by_csi() {
        // L A B(end) L C D : trace [A, B, End, C, D]
        let mut map = Statemap::new();
        let msgs = vec![m("L1"), m("A"), m("B"), m("L2"), m("C"), m("D")];
        let states = vec![c(220), c(1), c(2), StateId::End, c(1), c(3), c(4)];
        let mut seed = seed_with(msgs, states, &mut map);
        assert_eq!(seed.subsequence_count, 2);
        seed.construct_sequence_id = 1;
        let cs = construct_message_sequence(&map, &seed, &mut FuzzRng::seed_from_u64(0)).unwrap();
        assert_eq!(cs.messages, vec![m("L2"), m("C"), m("D")]);
        assert_eq!(cs.covered_points.len(), 2);
        assert_eq!(cs.covered_points[0].message_index, 1);
        seed.construct_sequence_id = 0;
        let cs = construct_message_sequence(&map, &seed, &mut FuzzRng::seed_from_u64(0)).unwrap();
        assert_eq!(cs.messages, vec![m("L1"), m("A"), m("B")]);
    }

    #[test]
    fn unconstructible_without_transitions() {
        let map = Statemap::new();
        let seed = seed_with(vec![m("A")], vec![c(220), StateId::End], &mut Statemap::new());
        assert_eq!(
            construct_message_sequence(&map, &seed, &mut FuzzRng::seed_from_u64(0)),
            Err(SequencerError::Unconstructible)
        );
    }

    #[test]
    fn csi_advances_and_wraps() {
        let mut map = Statemap::new();
        let msgs = vec![m("L"), m("A"), m("L"), m("B"), m("L"), m("C")];
        let states =
            vec![c(220), c(1), StateId::End, c(1), StateId::End, c(1), StateId::End];
        let mut seed = seed_with(msgs, states, &mut map);
        assert_eq!(seed.subsequence_count, 3);
        advance_csi(&mut seed, &map);
        assert_eq!(seed.construct_sequence_id, 0);
        let slot = map.lookup(c(1), StateId::End).unwrap();
        map.get_mut(PointRef::Map(slot)).unwrap().was_fuzzed = true;
        advance_csi(&mut seed, &map);
        assert_eq!(seed.construct_sequence_id, 1);
        seed.construct_sequence_id = 2;
        advance_csi(&mut seed, &map);
        assert_eq!(seed.construct_sequence_id, 0);
    }

    #[test]
    fn split_examples() {
        let cp = |i: usize, s: u16, d: u16| CoveredPoint {
            point: PointRef::Map(i),
            message_index: i,
            src: c(s),
            dst: c(d),
        };
        let cs = ConstructedSequence {
            messages: vec![m("a"), m("b"), m("c"), m("d")],
            covered_points: vec![cp(1, 1, 331), cp(2, 331, 331), cp(3, 331, 2)],
            origin: Origin::FromSeedSubsequence,
            subsequence_id_used: Some(0),
        };
        let r = split_mutation_regions(&cs, 0).unwrap();
        assert_eq!((r.prefix, r.candidate, r.suffix), (0..1, 1..2, 2..4));
        // two consecutive messages departing 331
        let r = split_mutation_regions(&cs, 1).unwrap();
        assert_eq!((r.prefix, r.candidate, r.suffix), (0..2, 2..4, 4..4));
        assert!(matches!(
            split_mutation_regions(&cs, 7),
            Err(SequencerError::TargetNotCovered { .. })
        ));
    }
}
