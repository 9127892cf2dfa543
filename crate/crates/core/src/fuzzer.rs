//! The fuzz loop.
//!
//! In the reverse-selection modes a round picks a seed, then for each unit of
//! energy builds the seed's current subsequence (or a to-add probe), picks a
//! reachable statepoint, and mutates the message region that triggers it.
//! The baseline mode picks a target state first and mutates full seeds; the
//! stateless mode ignores protocol state altogether.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};

use crate::coverage::{CoverageMap, Novelty, VirginMap};
use crate::model::{Message, MessageSequence, PointRef, Seed, SeedId, StateId};
use crate::mutator::{self, MAX_SEQ_BYTES};
use crate::scheduler::{self, SchedulerError, SeedQueue};
use crate::sequencer::{self, Origin};
use crate::statemap::{PromotionWindow, Statemap, StatemapError};
use crate::transport::{execute_sequence, ExecutionOutcome, StateExtractor, Target, Verdict};
use crate::FuzzRng;

/// Rounds of round-robin state selection before the baseline scores states.
pub const BASELINE_WARMUP_ROUNDS: u64 = 5;
/// Executions in a row that may fail to connect before the target is
/// declared gone.
pub const MAX_CONNECT_FAILURES: u32 = 3;
/// Messages kept for insertion and splicing.
pub const POOL_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SchedulerMode {
    /// Reverse state selection, score-weighted statepoint choice.
    RssFavor,
    /// Reverse state selection, uniform statepoint choice.
    RssUniform,
    /// Target state first, then a seed reaching it; whole seeds are sent.
    BaselineStateFirst,
    /// No protocol state at all: whole seeds are havoc-mutated.
    Stateless,
}

impl SchedulerMode {
    pub const ALL: [SchedulerMode; 4] = [
        SchedulerMode::RssFavor,
        SchedulerMode::RssUniform,
        SchedulerMode::BaselineStateFirst,
        SchedulerMode::Stateless,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerMode::RssFavor => "rss_favor",
            SchedulerMode::RssUniform => "rss_uniform",
            SchedulerMode::BaselineStateFirst => "baseline_state_first",
            SchedulerMode::Stateless => "stateless",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_stateful(self) -> bool {
        self != SchedulerMode::Stateless
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzerConfig {
    pub mode: SchedulerMode,
    pub rng_seed: u64,
    /// Skip mutation entirely; constructed sequences are sent as-is.
    pub identity_mutator: bool,
    pub record_events: bool,
    /// Hard stop on executions, checked before every execution.
    pub max_execs: Option<u64>,
}

impl Default for FuzzerConfig {
    fn default() -> Self {
        Self {
            mode: SchedulerMode::RssFavor,
            rng_seed: 0,
            identity_mutator: false,
            record_events: false,
            max_execs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FuzzError {
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Statemap(#[from] StatemapError),
    #[error("target unreachable: {0}")]
    Unreachable(crate::transport::TransportError),
    #[error("seed has no messages")]
    EmptySeed,
}

/// One selection decision, for auditing the selection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    SeedSelected { round: u64, seed: SeedId, csi: usize },
    StateSelected { round: u64, state: StateId },
    PointSelected { round: u64, seed: SeedId, csi: Option<usize>, point: PointRef },
    MessagesSelected { round: u64, seed: SeedId, indices: Range<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashReport {
    pub messages: Vec<Message>,
    pub states: Vec<StateId>,
    /// Bucketed coverage checksum of the crashing run.
    pub signature: u64,
    pub seed: SeedId,
    pub csi: Option<usize>,
    pub target: Option<PointRef>,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FuzzStats {
    pub rounds: u64,
    pub execs: u64,
    pub messages_sent: u64,
    pub crashes: u64,
    pub hangs: u64,
    pub seeds_added: u64,
    /// Seeds added while a statepoint was the fuzzing target.
    pub seeds_attributed: u64,
    pub promotions: u64,
    pub transport_retries: u64,
}

impl FuzzStats {
    pub fn mean_messages_per_exec(&self) -> f64 {
        if self.execs == 0 {
            0.0
        } else {
            self.messages_sent as f64 / self.execs as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
struct StateInfo {
    fuzz: u64,
    paths: u64,
}

#[derive(Debug, Clone, Default)]
struct BaselineState {
    states: BTreeMap<StateId, StateInfo>,
    selections: u64,
}

pub struct Fuzzer<T: Target> {
    config: FuzzerConfig,
    target: T,
    extractor: StateExtractor,
    map: Statemap,
    queue: SeedQueue,
    virgin: VirginMap,
    coverage: CoverageMap,
    pool: Vec<Message>,
    pool_keys: BTreeSet<Vec<u8>>,
    rng: FuzzRng,
    stats: FuzzStats,
    events: Vec<Event>,
    crashes: Vec<CrashReport>,
    next_seed_id: u32,
    baseline: BaselineState,
    connect_failures: u32,
}

enum Attribution {
    None,
    Point(PointRef),
    State(StateId),
}

impl<T: Target> Fuzzer<T> {
    pub fn new(config: FuzzerConfig, target: T, extractor: StateExtractor) -> Self {
        let rng = FuzzRng::seed_from_u64(config.rng_seed);
        Self {
            config,
            target,
            extractor,
            map: Statemap::new(),
            queue: SeedQueue::new(),
            virgin: VirginMap::new(),
            coverage: CoverageMap::new(),
            pool: Vec::new(),
            pool_keys: BTreeSet::new(),
            rng,
            stats: FuzzStats::default(),
            events: Vec::new(),
            crashes: Vec::new(),
            next_seed_id: 0,
            baseline: BaselineState::default(),
            connect_failures: 0,
        }
    }

    pub fn config(&self) -> &FuzzerConfig {
        &self.config
    }

    pub fn map(&self) -> &Statemap {
        &self.map
    }

    pub fn queue(&self) -> &SeedQueue {
        &self.queue
    }

    pub fn virgin(&self) -> &VirginMap {
        &self.virgin
    }

    pub fn stats(&self) -> &FuzzStats {
        &self.stats
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        core::mem::take(&mut self.events)
    }

    pub fn target_mut(&mut self) -> &mut T {
        &mut self.target
    }

    pub fn extractor(&self) -> &StateExtractor {
        &self.extractor
    }

    pub fn set_max_execs(&mut self, max: Option<u64>) {
        self.config.max_execs = max;
    }

    /// Crash reports gathered since the last drain.
    pub fn drain_crashes(&mut self) -> Vec<CrashReport> {
        core::mem::take(&mut self.crashes)
    }

    pub fn budget_exhausted(&self) -> bool {
        self.config.max_execs.is_some_and(|m| self.stats.execs >= m)
    }

    fn event(&mut self, e: Event) {
        if self.config.record_events {
            self.events.push(e);
        }
    }

    /// Execute with one retry on transport failure.
    fn run(&mut self, messages: &[Message]) -> Result<ExecutionOutcome, crate::transport::TransportError> {
        match execute_sequence(&mut self.target, messages, &self.extractor, &mut self.coverage) {
            Ok(o) => Ok(o),
            Err(_) => {
                self.stats.transport_retries += 1;
                execute_sequence(&mut self.target, messages, &self.extractor, &mut self.coverage)
            }
        }
    }

    fn add_to_pool(&mut self, messages: &[Message]) {
        for m in messages {
            if m.is_empty() || self.pool_keys.contains(&m.payload) {
                continue;
            }
            if self.pool.len() >= POOL_CAPACITY {
                let slot = self.pool_keys.len() % POOL_CAPACITY;
                let old = core::mem::replace(&mut self.pool[slot], m.clone());
                self.pool_keys.remove(&old.payload);
            } else {
                self.pool.push(m.clone());
            }
            self.pool_keys.insert(m.payload.clone());
        }
    }

    fn track_states(&mut self, seq: &MessageSequence) {
        for j in 0..seq.messages.len().min(seq.states.len()) {
            let s = seq.states[j];
            if !s.is_special() {
                self.baseline.states.entry(s).or_default();
            }
        }
    }

    fn admit(&mut self, messages: Vec<Message>, outcome: &ExecutionOutcome) -> Result<SeedId, FuzzError> {
        let id = SeedId(self.next_seed_id);
        self.next_seed_id += 1;
        let mut seq = MessageSequence::new(messages);
        // crash/hang runs stop early; trim to what was actually sent
        seq.messages.truncate(outcome.states.len().saturating_sub(1).max(1));
        seq.record_states(outcome.states.clone());
        let mut seed = Seed::new(id, seq);
        seed.trace_bits = self.coverage.hit_indices();
        seed.coverage_signature = self.coverage.signature();
        if self.config.mode.is_stateful() {
            self.map.record_seed(&mut seed)?;
        }
        self.add_to_pool(&seed.sequence.messages);
        self.track_states(&seed.sequence);
        self.queue.push(seed);
        self.stats.seeds_added += 1;
        Ok(id)
    }

    /// Execute an initial seed once and queue it.
    pub fn add_initial_seed(&mut self, messages: Vec<Message>) -> Result<SeedId, FuzzError> {
        if messages.is_empty() {
            return Err(FuzzError::EmptySeed);
        }
        let outcome = self.run(&messages).map_err(FuzzError::Unreachable)?;
        self.stats.execs += 1;
        self.stats.messages_sent += outcome.messages_sent as u64;
        self.virgin.is_interesting(&self.coverage);
        if outcome.verdict == Verdict::Crash {
            self.stats.crashes += 1;
            self.report_crash(&messages, &outcome, SeedId(self.next_seed_id), None, None);
        }
        self.admit(messages, &outcome)
    }

    fn report_crash(
        &mut self,
        messages: &[Message],
        outcome: &ExecutionOutcome,
        seed: SeedId,
        csi: Option<usize>,
        target: Option<PointRef>,
    ) {
        let sent = outcome.messages_sent.min(messages.len());
        self.crashes.push(CrashReport {
            messages: messages[..sent].to_vec(),
            states: outcome.states.clone(),
            signature: self.coverage.signature(),
            seed,
            csi,
            target,
            rng_seed: self.config.rng_seed,
            rng_word_pos: self.rng.get_word_pos(),
        });
    }

    /// Execute a mutated sequence and file the result. Returns whether a seed
    /// was added.
    fn execute_and_evaluate(
        &mut self,
        messages: Vec<Message>,
        parent: SeedId,
        csi: Option<usize>,
        attribution: Attribution,
    ) -> Result<(bool, Option<ExecutionOutcome>), FuzzError> {
        let outcome = match self.run(&messages) {
            Ok(o) => {
                self.connect_failures = 0;
                o
            }
            Err(e) => {
                self.stats.execs += 1;
                self.stats.hangs += 1;
                self.connect_failures += 1;
                if self.connect_failures >= MAX_CONNECT_FAILURES {
                    return Err(FuzzError::Unreachable(e));
                }
                return Ok((false, None));
            }
        };
        self.stats.execs += 1;
        self.stats.messages_sent += outcome.messages_sent as u64;
        let target = match attribution {
            Attribution::Point(p) => Some(p),
            _ => None,
        };
        let added = match outcome.verdict {
            Verdict::Crash => {
                self.stats.crashes += 1;
                self.report_crash(&messages, &outcome, parent, csi, target);
                false
            }
            Verdict::Hang => {
                self.stats.hangs += 1;
                false
            }
            Verdict::Ok => {
                let novel_state =
                    self.config.mode.is_stateful() && self.map.has_unseen_transition(&outcome.states);
                let novelty = self.virgin.is_interesting(&self.coverage);
                if novelty != Novelty::None || novel_state {
                    self.admit(messages, &outcome)?;
                    true
                } else {
                    false
                }
            }
        };
        match attribution {
            Attribution::Point(p) => {
                self.map.credit_fuzz(p, added);
                if added {
                    self.stats.seeds_attributed += 1;
                }
            }
            Attribution::State(s) => {
                let info = self.baseline.states.entry(s).or_default();
                info.fuzz += 1;
                if added {
                    info.paths += 1;
                }
            }
            Attribution::None => {}
        }
        Ok((added, Some(outcome)))
    }

    fn mutate_region(&mut self, m1: &[Message], m2: &[Message], m3: &[Message]) -> Vec<Message> {
        let fixed: usize = m1.iter().chain(m3).map(Message::len).sum();
        let budget = MAX_SEQ_BYTES.saturating_sub(fixed);
        let m2 = if self.config.identity_mutator {
            m2.to_vec()
        } else {
            mutator::mutate(m2, &self.pool, &mut self.rng, budget)
        };
        let mut out = Vec::with_capacity(m1.len() + m2.len() + m3.len());
        out.extend_from_slice(m1);
        out.extend(m2);
        out.extend_from_slice(m3);
        out
    }

    /// One scheduling round in the configured mode.
    pub fn fuzz_round(&mut self) -> Result<(), FuzzError> {
        let round = self.stats.rounds;
        self.stats.rounds += 1;
        match self.config.mode {
            SchedulerMode::RssFavor | SchedulerMode::RssUniform => self.rss_round(round),
            SchedulerMode::BaselineStateFirst => self.baseline_round(round),
            SchedulerMode::Stateless => {
                let idx = self.queue.select_seed(&mut self.rng)?;
                self.stateless_round(round, idx)
            }
        }
    }

    fn rss_round(&mut self, round: u64) -> Result<(), FuzzError> {
        let idx = self.queue.select_seed(&mut self.rng)?;
        let seed_id = self.queue.get(idx).id;
        let energy = scheduler::assign_energy(self.queue.get(idx)).iterations();
        self.event(Event::SeedSelected {
            round,
            seed: seed_id,
            csi: self.queue.get(idx).construct_sequence_id,
        });
        let weighted = self.config.mode == SchedulerMode::RssFavor;
        for _ in 0..energy {
            if self.budget_exhausted() {
                break;
            }
            let cs = match sequencer::construct_message_sequence(
                &self.map,
                self.queue.get(idx),
                &mut self.rng,
            ) {
                Ok(cs) => cs,
                Err(_) => {
                    self.havoc_iteration(idx)?;
                    continue;
                }
            };
            let reach: Vec<(usize, &crate::model::Statepoint)> = sequencer::reachable_points(&cs)
                .into_iter()
                .filter_map(|i| self.map.get(cs.covered_points[i].point).map(|p| (i, p)))
                .collect();
            if reach.is_empty() {
                self.havoc_iteration(idx)?;
                continue;
            }
            let points: Vec<_> = reach.iter().map(|(_, p)| *p).collect();
            let k = scheduler::select_statepoint(&points, weighted, &mut self.rng)?;
            let target = reach[k].0;
            let point = cs.covered_points[target].point;
            self.event(Event::PointSelected {
                round,
                seed: seed_id,
                csi: cs.subsequence_id_used,
                point,
            });
            let regions = sequencer::split_mutation_regions(&cs, target)
                .expect("target comes from covered points");
            self.event(Event::MessagesSelected {
                round,
                seed: seed_id,
                indices: regions.candidate.clone(),
            });
            let (m1, m2, m3) = regions.parts(&cs.messages);
            let mutated = self.mutate_region(m1, m2, m3);
            let (_, outcome) = self.execute_and_evaluate(
                mutated.clone(),
                seed_id,
                cs.subsequence_id_used,
                Attribution::Point(point),
            )?;
            if cs.origin == Origin::FromToAddList {
                if let (PointRef::ToAdd(uid), Some(o)) = (cs.covered_points[0].point, outcome) {
                    let r = self.map.promote_to_add_points(PromotionWindow {
                        point: uid,
                        messages: &mutated,
                        states: &o.states,
                    });
                    if matches!(r, crate::statemap::Promotion::Promoted { .. }) {
                        self.stats.promotions += 1;
                    }
                }
            }
        }
        let seed = self.queue.get_mut(idx);
        seed.fuzz_count += 1;
        sequencer::advance_csi(seed, &self.map);
        Ok(())
    }

    /// Whole-seed havoc, used by the stateless mode and as the fallback for
    /// seeds that offer no statepoint to target.
    fn havoc_iteration(&mut self, idx: usize) -> Result<(), FuzzError> {
        let seed = self.queue.get(idx);
        let id = seed.id;
        let msgs = seed.sequence.messages.clone();
        let mutated = self.mutate_region(&[], &msgs, &[]);
        self.execute_and_evaluate(mutated, id, None, Attribution::None)?;
        Ok(())
    }

    fn stateless_round(&mut self, round: u64, idx: usize) -> Result<(), FuzzError> {
        let seed_id = self.queue.get(idx).id;
        self.event(Event::SeedSelected { round, seed: seed_id, csi: 0 });
        let energy = scheduler::assign_energy(self.queue.get(idx)).iterations();
        for _ in 0..energy {
            if self.budget_exhausted() {
                break;
            }
            self.havoc_iteration(idx)?;
        }
        self.queue.get_mut(idx).fuzz_count += 1;
        Ok(())
    }

    fn baseline_round(&mut self, round: u64) -> Result<(), FuzzError> {
        if self.queue.is_empty() {
            return Err(SchedulerError::EmptyCorpus.into());
        }
        let states: Vec<StateId> = self.baseline.states.keys().copied().collect();
        if states.is_empty() {
            let idx = self.queue.select_seed(&mut self.rng)?;
            return self.stateless_round(round, idx);
        }
        let n = states.len() as u64;
        let state = if self.baseline.selections < BASELINE_WARMUP_ROUNDS * n {
            states[(self.baseline.selections % n) as usize]
        } else {
            let scores: Vec<f64> = states
                .iter()
                .map(|s| {
                    let i = &self.baseline.states[s];
                    (i.paths as f64 + 1.0) / (i.fuzz as f64 + 1.0)
                })
                .collect();
            states[scheduler::weighted_pick(&scores, &mut self.rng)]
        };
        self.baseline.selections += 1;
        self.event(Event::StateSelected { round, state });

        self.queue.cull();
        let reaching: Vec<usize> = (0..self.queue.len())
            .filter(|&i| region_for_state(&self.queue.get(i).sequence, state).is_some())
            .collect();
        if reaching.is_empty() {
            let idx = self.queue.select_seed(&mut self.rng)?;
            return self.stateless_round(round, idx);
        }
        let favored: Vec<usize> =
            reaching.iter().copied().filter(|&i| self.queue.get(i).favored).collect();
        let pool = if favored.is_empty() { &reaching } else { &favored };
        let idx = pool[self.rng.gen_range(0..pool.len())];
        let seed_id = self.queue.get(idx).id;
        self.event(Event::SeedSelected { round, seed: seed_id, csi: 0 });
        let energy = scheduler::assign_energy(self.queue.get(idx)).iterations();
        let seq = self.queue.get(idx).sequence.clone();
        let region = region_for_state(&seq, state).expect("filtered above");
        self.event(Event::MessagesSelected { round, seed: seed_id, indices: region.clone() });
        for _ in 0..energy {
            if self.budget_exhausted() {
                break;
            }
            let msgs = &seq.messages;
            let mutated = self.mutate_region(
                &msgs[..region.start],
                &msgs[region.clone()],
                &msgs[region.end..],
            );
            self.execute_and_evaluate(mutated, seed_id, None, Attribution::State(state))?;
        }
        self.queue.get_mut(idx).fuzz_count += 1;
        Ok(())
    }
}

/// Messages sent while the target was in `state`, starting at its first
/// occurrence: message `j` is sent in `states[j]`.
pub fn region_for_state(seq: &MessageSequence, state: StateId) -> Option<Range<usize>> {
    let n = seq.messages.len().min(seq.states.len());
    let start = (0..n).find(|&j| seq.states[j] == state)?;
    let mut end = start + 1;
    while end < n && seq.states[end] == state {
        end += 1;
    }
    Some(start..end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{ToySut, ToySutConfig};
    use alloc::vec;

    fn m(s: &str) -> Message {
        Message::new(alloc::format!("{s}\r\n").into_bytes())
    }

    fn extractor() -> StateExtractor {
        StateExtractor::new(crate::model::ProtocolKind::LineCode, [221, 530])
    }

    fn fuzzer(mode: SchedulerMode, identity: bool) -> Fuzzer<ToySut> {
        let cfg = FuzzerConfig {
            mode,
            rng_seed: 1,
            identity_mutator: identity,
            record_events: true,
            max_execs: None,
        };
        Fuzzer::new(cfg, ToySut::new(ToySutConfig::default_ftp().without_crash()), extractor())
    }

    fn login_seed() -> Vec<Message> {
        vec![m("USER anonymous"), m("PASS secret"), m("TYPE I"), m("PASV"), m("LIST"), m("QUIT")]
    }

    #[test]
    fn region_for_state_examples() {
        let mut seq = MessageSequence::new(vec![m("a"), m("b"), m("c"), m("d")]);
        use StateId::Code;
        seq.record_states(vec![Code(220), Code(331), Code(331), Code(230), Code(200)]);
        assert_eq!(region_for_state(&seq, Code(220)), Some(0..1));
        assert_eq!(region_for_state(&seq, Code(331)), Some(1..3));
        assert_eq!(region_for_state(&seq, Code(230)), Some(3..4));
        assert_eq!(region_for_state(&seq, Code(200)), None);
    }

    #[test]
    fn identity_mutator_finds_nothing_new() {
        for mode in SchedulerMode::ALL {
            let mut f = fuzzer(mode, true);
            f.add_initial_seed(login_seed()).unwrap();
            f.fuzz_round().unwrap();
            let after_first = f.stats().seeds_added;
            for _ in 0..20 {
                f.fuzz_round().unwrap();
            }
            assert_eq!(f.stats().seeds_added, after_first, "{mode:?}");
        }
    }

    #[test]
    fn reverse_selection_order() {
        let mut f = fuzzer(SchedulerMode::RssFavor, false);
        f.add_initial_seed(login_seed()).unwrap();
        for _ in 0..30 {
            f.fuzz_round().unwrap();
        }
        let mut last_round = None;
        let mut phase = 0;
        for e in f.events() {
            let (round, p) = match e {
                Event::SeedSelected { round, .. } => (*round, 0),
                Event::PointSelected { round, .. } => (*round, 1),
                Event::MessagesSelected { round, .. } => (*round, 2),
                Event::StateSelected { .. } => panic!("state selection in rss mode"),
            };
            if last_round != Some(round) {
                assert_eq!(p, 0, "round must open with seed selection");
                last_round = Some(round);
            } else {
                assert!(p == 1 && phase == 2 || p == phase + 1 || (p == 1 && phase == 0), "{e:?}");
            }
            phase = p;
        }
    }

    #[test]
    fn bookkeeping_conservation() {
        let mut f = fuzzer(SchedulerMode::RssFavor, false);
        f.add_initial_seed(login_seed()).unwrap();
        f.add_initial_seed(vec![m("USER x"), m("PASS y"), m("USER anonymous"), m("PASS secret")])
            .unwrap();
        for _ in 0..200 {
            f.fuzz_round().unwrap();
        }
        assert!(f.stats().seeds_added > 2);
        assert_eq!(f.map().total_seeds_generated(), f.stats().seeds_attributed);
        let live: BTreeSet<SeedId> = f.queue().seeds().iter().map(|s| s.id).collect();
        for (_, p) in f.map().points() {
            assert!(p.covering_seeds.is_subset(&live));
        }
    }

    #[test]
    fn exec_limit_is_exact() {
        let mut f = fuzzer(SchedulerMode::RssFavor, false);
        f.add_initial_seed(login_seed()).unwrap();
        f.set_max_execs(Some(50));
        while !f.budget_exhausted() {
            f.fuzz_round().unwrap();
        }
        assert_eq!(f.stats().execs, 50);
    }
}
