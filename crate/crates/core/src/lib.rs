//! Statemap-guided stateful greybox fuzzing for network protocols.
//!
//! The target's implemented protocol state machine is never built as a graph.
//! Instead every observed response-code transition `<src, dst>` is hashed into a
//! flat [`Statemap`](statemap::Statemap), much like edges in a coverage bitmap.
//! Seeds are split into subsequences at protocol end states (connection
//! closed / rejected), and each fuzzing round selects a seed first, then a
//! statepoint reachable by that seed's current subsequence, then the message
//! that triggers it.
//!
//! # Modules
//! - [`model`]: messages, states, seeds and statepoints
//! - [`statemap`]: the hashed transition map and its insertion walk
//! - [`coverage`]: edge bitmap and virgin map
//! - [`sequencer`]: end-state delimited sequence construction and M1/M2/M3 split
//! - [`scheduler`]: seed queue, energy, statepoint selection
//! - [`mutator`]: byte- and message-level havoc
//! - [`transport`]: the [`Target`](transport::Target) trait and response parsing
//! - [`toy`]: a deterministic in-process FTP-like server
//! - [`fuzzer`]: the fuzz loop tying it together
//! - [`markov`]: per-round trigger probabilities for the scheduling models
//!
//! The crate is `no_std` and only needs `alloc`.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod coverage;
pub mod fuzzer;
pub mod markov;
pub mod model;
pub mod mutator;
pub mod scheduler;
pub mod sequencer;
pub mod statemap;
pub mod toy;
pub mod transport;

pub use coverage::{CoverageMap, Novelty, VirginMap, BITMAP_SIZE};
pub use fuzzer::{Fuzzer, FuzzerConfig, SchedulerMode};
pub use model::{
    classify_statepoint, Message, MessageSequence, PointRef, ProtocolKind, Seed, SeedId, StateId,
    Statepoint, StatepointType, TraceEntry,
};
pub use statemap::{Statemap, MAP_SIZE};
pub use transport::{ExecutionOutcome, StateExtractor, Target, Verdict};

/// Deterministic RNG used throughout the engine.
pub type FuzzRng = rand_chacha::ChaCha8Rng;
