//! Domain types shared by the engine.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Which response grammar a message's reply is parsed with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ProtocolKind {
    /// Line protocols whose replies start with a three digit code (FTP, SMTP).
    #[default]
    LineCode,
    /// `PROTO/x.y CODE reason` status lines (RTSP, HTTP).
    StatusLine,
}

/// One protocol request.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Message {
    pub payload: Vec<u8>,
    pub kind: ProtocolKind,
}

impl Message {
    pub fn new(payload: impl Into<Vec<u8>>) -> Self {
        Self { payload: payload.into(), kind: ProtocolKind::default() }
    }

    pub fn with_kind(payload: impl Into<Vec<u8>>, kind: ProtocolKind) -> Self {
        Self { payload: payload.into(), kind }
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

/// A protocol state as observed through responses.
///
/// `Start` and `End` are reserved and can never be produced by parsing a
/// response code. `Unknown` is an ordinary (non-special) state used when a
/// response could not be parsed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StateId {
    /// Before any message was sent on a connection.
    Start,
    /// The target closed or rejected the connection.
    End,
    Code(u16),
    Unknown,
}

impl StateId {
    pub fn is_special(self) -> bool {
        matches!(self, StateId::Start | StateId::End)
    }

    pub fn is_end(self) -> bool {
        self == StateId::End
    }

    /// Stable integer encoding used for hashing; special values sit above
    /// the 16-bit code range.
    pub fn encode(self) -> u32 {
        match self {
            StateId::Code(c) => u32::from(c),
            StateId::Start => 0x1_0000,
            StateId::End => 0x1_0001,
            StateId::Unknown => 0x1_0002,
        }
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateId::Start => f.write_str("S0"),
            StateId::End => f.write_str("Send"),
            StateId::Code(c) => write!(f, "{c}"),
            StateId::Unknown => f.write_str("unknown"),
        }
    }
}

/// An ordered request list plus what the last run observed.
///
/// `states[0]` is the response received on connect (the banner); message `i`
/// pairs with `states[i + 1]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MessageSequence {
    pub messages: Vec<Message>,
    pub states: Vec<StateId>,
    pub end_flags: Vec<bool>,
}

impl MessageSequence {
    pub fn new(messages: Vec<Message>) -> Self {
        Self { messages, states: Vec::new(), end_flags: Vec::new() }
    }

    /// Attach the states observed when the sequence was executed.
    pub fn record_states(&mut self, states: Vec<StateId>) {
        self.end_flags = (0..self.messages.len())
            .map(|i| states.get(i + 1).is_some_and(|s| s.is_end()))
            .collect();
        self.states = states;
    }

    pub fn total_bytes(&self) -> usize {
        self.messages.iter().map(Message::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SeedId(pub u32);

impl fmt::Display for SeedId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Reference to a statepoint in one of the statemap's three containers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PointRef {
    /// Slot index in the hashed array.
    Map(usize),
    /// Uid of an entry in the POINT_ZERO list.
    Zero(u32),
    /// Uid of an entry in the to-add list.
    ToAdd(u32),
}

/// One element of a seed's statepoint trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TraceEntry {
    Transition { point: PointRef, src: StateId, dst: StateId, message_index: usize },
    /// The transition just before this marker ended in `S_end`.
    End { message_index: usize },
}

/// A stored message sequence plus scheduling metadata.
#[derive(Clone, Debug)]
pub struct Seed {
    pub id: SeedId,
    pub sequence: MessageSequence,
    pub coverage_signature: u64,
    /// Bitmap indices hit when the seed was recorded; used for favored culling.
    pub trace_bits: Vec<u32>,
    pub statepoint_trace: Vec<TraceEntry>,
    pub favored: bool,
    pub fuzz_count: u64,
    pub construct_sequence_id: usize,
    pub subsequence_count: usize,
}

impl Seed {
    pub fn new(id: SeedId, sequence: MessageSequence) -> Self {
        Self {
            id,
            sequence,
            coverage_signature: 0,
            trace_bits: Vec::new(),
            statepoint_trace: Vec::new(),
            favored: false,
            fuzz_count: 0,
            construct_sequence_id: 0,
            subsequence_count: 0,
        }
    }

    pub fn was_fuzzed(&self) -> bool {
        self.fuzz_count > 0
    }

    /// Execution cost proxy used for culling: messages, then bytes.
    pub fn exec_cost(&self) -> (usize, usize) {
        (self.sequence.messages.len(), self.sequence.total_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum StatepointType {
    /// Source is `S_0`/`S_end`, destination is `S_end`.
    PointZero,
    /// Source is `S_0`/`S_end`, destination is a live state.
    PointToAdd,
    /// Valid transition: the source is a live state.
    PointAddedToMap,
}

impl fmt::Display for StatepointType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatepointType::PointZero => "POINT_ZERO",
            StatepointType::PointToAdd => "POINT_TO_ADD",
            StatepointType::PointAddedToMap => "POINT_ADDED_TO_MAP",
        })
    }
}

/// Classify the transition `<src, dst>`.
///
/// `has_successor` is accepted for symmetry with the insertion walk, which
/// uses it to decide whether a trailing transition is recorded at all; it does
/// not change the class.
pub fn classify_statepoint(src: StateId, dst: StateId, _has_successor: bool) -> StatepointType {
    if !src.is_special() {
        StatepointType::PointAddedToMap
    } else if dst.is_end() {
        StatepointType::PointZero
    } else {
        StatepointType::PointToAdd
    }
}

/// Everything known about one observed transition.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Statepoint {
    pub uid: u32,
    pub src: StateId,
    pub dst: StateId,
    /// Response that put the target in `src`.
    pub response_prev: StateId,
    /// Message sent in `src`.
    pub trigger_message: Message,
    /// Response that put the target in `dst`.
    pub response_next: StateId,
    pub ptype: StatepointType,
    pub was_fuzzed: bool,
    pub fuzz_count: u64,
    pub seeds_generated: u64,
    pub covering_seeds: BTreeSet<SeedId>,
    pub promotion_attempts: u32,
    pub last_touched: u64,
}

impl Statepoint {
    pub fn score(&self) -> f64 {
        (self.seeds_generated as f64 + 1.0) / (self.fuzz_count as f64 + 1.0)
    }
}
