//! Campaign orchestration: ingest, fuzz until the budget runs out, persist.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use statefuzz_core::fuzzer::{Event, FuzzError, Fuzzer, FuzzerConfig, SchedulerMode};
use statefuzz_core::toy::{ToySut, ToySutConfig};
use statefuzz_core::transport::{execute_sequence, EndpointKind, TargetEndpoint};
use statefuzz_core::{CoverageMap, Message, ProtocolKind, StateExtractor, Target, Verdict};

use crate::corpus::{self, CorpusError, CrashStore, CrashVerdict};
use crate::socket::{CoverageFeed, SocketTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Rounds(u64),
    Execs(u64),
    Seconds(u64),
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub seeds_dir: PathBuf,
    pub out_dir: PathBuf,
    pub endpoint: TargetEndpoint,
    pub protocol: ProtocolKind,
    pub end_codes: Vec<u16>,
    pub mode: SchedulerMode,
    pub rng_seed: u64,
    pub budget: Budget,
    /// A stats line is written every this many executions.
    pub stats_interval_execs: u64,
    /// Rule table for the builtin target; the bundled one when `None`.
    pub toy_rules: Option<ToySutConfig>,
    /// Response terminator for socket targets.
    pub terminator: Vec<u8>,
    pub coverage_feed: Option<PathBuf>,
    pub write_events: bool,
    pub write_statemap_json: bool,
    /// How long a socket target waits after each reply to see whether the
    /// peer hangs up. Late hang-ups are still noticed before the next write.
    pub close_grace_ms: u32,
    /// Set from a signal handler to stop after the current round.
    pub stop: Arc<AtomicBool>,
}

impl CampaignConfig {
    pub fn builtin(seeds_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seeds_dir: seeds_dir.into(),
            out_dir: out_dir.into(),
            endpoint: TargetEndpoint::builtin(),
            protocol: ProtocolKind::LineCode,
            end_codes: vec![221, 530],
            mode: SchedulerMode::RssFavor,
            rng_seed: 0,
            budget: Budget::Rounds(1000),
            stats_interval_execs: 500,
            toy_rules: None,
            terminator: b"\r\n".to_vec(),
            coverage_feed: None,
            write_events: false,
            write_statemap_json: false,
            close_grace_ms: 0,
            stop: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.mode.is_stateful() && self.end_codes.is_empty() {
            return Err(CampaignError::Config(
                "stateful modes need at least one end-state code (or run bootstrap)".into(),
            ));
        }
        if self.stats_interval_execs == 0 {
            return Err(CampaignError::Config("stats interval must be positive".into()));
        }
        if self.endpoint.kind == EndpointKind::ExternalSocket && self.endpoint.address.is_none() {
            return Err(CampaignError::Config("socket endpoint needs an address".into()));
        }
        Ok(())
    }

    pub fn extractor(&self) -> StateExtractor {
        StateExtractor::new(self.protocol, self.end_codes.iter().copied())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("target unreachable: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Fuzz(#[from] FuzzError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSummary {
    pub execs: u64,
    pub rounds: u64,
    pub seeds: usize,
    pub unique_crashes: usize,
    pub crash_files: Vec<PathBuf>,
    pub edges: usize,
    pub bits: usize,
    pub mean_messages_per_exec: f64,
    pub rejected_seeds: usize,
}

/// Build the target described by `config` and hand it to `f`.
pub fn with_target<R>(
    config: &CampaignConfig,
    f: impl FnOnce(&mut dyn Target) -> R,
) -> Result<R, CampaignError> {
    match config.endpoint.kind {
        EndpointKind::BuiltinToy => {
            let rules = config.toy_rules.clone().unwrap_or_else(ToySutConfig::default_ftp);
            Ok(f(&mut ToySut::new(rules)))
        }
        EndpointKind::ExternalSocket => {
            let addr = config.endpoint.address.as_deref().unwrap_or_default();
            let mut t = SocketTarget::new(addr, config.endpoint.response_timeout_ms)
                .map_err(|e| CampaignError::Unreachable(format!("{addr}: {e}")))?
                .with_terminator(config.terminator.clone())
                .with_close_grace(Duration::from_millis(u64::from(config.close_grace_ms)));
            if let Some(p) = config.coverage_feed.clone().or_else(|| CoverageFeed::from_env().map(|f| f.path().to_path_buf())) {
                t = t.with_coverage(CoverageFeed::new(p));
            }
            Ok(f(&mut t))
        }
    }
}

/// Stats field set shared by every mode.
fn stats_line<T: Target>(f: &Fuzzer<T>, crashes: &CrashStore) -> String {
    let s = f.stats();
    let m = f.map();
    let mut line = String::new();
    let _ = write!(
        line,
        "execs={} rounds={} seeds={} favored={} edges={} bits={} crashes_total={} crashes_unique={} hangs={} \
         msgs_sent={} msgs_per_exec={:.4} statemap_slots={} zero_points={} to_add_points={} promotions={} seeds_attributed={}",
        s.execs,
        s.rounds,
        f.queue().len(),
        f.queue().favored_count(),
        f.virgin().edges_seen(),
        f.virgin().bits_cleared(),
        s.crashes,
        crashes.unique(),
        s.hangs,
        s.messages_sent,
        s.mean_messages_per_exec(),
        m.occupied_count(),
        m.zero_list().len(),
        m.to_add_list().len(),
        s.promotions,
        s.seeds_attributed,
    );
    line
}

fn event_line(e: &Event) -> String {
    match e {
        Event::SeedSelected { round, seed, csi } => format!("{round} seed {} csi={csi}", seed.0),
        Event::StateSelected { round, state } => format!("{round} state {state}"),
        Event::PointSelected { round, seed, csi, point } => format!(
            "{round} point {} seed={} csi={}",
            corpus::point_name(*point),
            seed.0,
            csi.map_or_else(|| "-".to_string(), |c| c.to_string())
        ),
        Event::MessagesSelected { round, seed, indices } => {
            format!("{round} messages {}..{} seed={}", indices.start, indices.end, seed.0)
        }
    }
}

fn statemap_json<T: Target>(f: &Fuzzer<T>) -> serde_json::Value {
    let points: Vec<_> = f
        .map()
        .points()
        .map(|(r, p)| {
            serde_json::json!({
                "where": corpus::point_name(r),
                "src": p.src.to_string(),
                "dst": p.dst.to_string(),
                "type": p.ptype.to_string(),
                "fuzz_count": p.fuzz_count,
                "seeds_generated": p.seeds_generated,
                "covering_seeds": p.covering_seeds.iter().map(|s| s.0).collect::<Vec<_>>(),
                "promotion_attempts": p.promotion_attempts,
            })
        })
        .collect();
    serde_json::json!({
        "occupied": f.map().occupied_count(),
        "collisions": f.map().collision_count(),
        "points": points,
    })
}

pub fn run_campaign(config: &CampaignConfig) -> Result<CampaignSummary, CampaignError> {
    config.validate()?;
    let ingested = corpus::ingest_initial_seeds(&config.seeds_dir)?;
    let out = &config.out_dir;
    fs::create_dir_all(out.join("queue"))?;
    let rejected = ingested.rejected.len();
    with_target(config, |t| run_with(config, t, ingested.seeds, rejected))?
}

fn run_with<T: Target>(
    config: &CampaignConfig,
    target: T,
    seeds: Vec<(PathBuf, Vec<Message>)>,
    rejected: usize,
) -> Result<CampaignSummary, CampaignError> {
    let out = &config.out_dir;
    let fcfg = FuzzerConfig {
        mode: config.mode,
        rng_seed: config.rng_seed,
        identity_mutator: false,
        record_events: config.write_events,
        max_execs: match config.budget {
            Budget::Execs(n) => Some(n),
            _ => None,
        },
    };
    let mut fuzzer = Fuzzer::new(fcfg, target, config.extractor());
    let mut crashes = CrashStore::new(out.join("crashes"))?;
    let mut stats = BufWriter::new(File::create(out.join("stats"))?);
    let mut events = if config.write_events {
        Some(BufWriter::new(File::create(out.join("events.log"))?))
    } else {
        None
    };

    for (path, msgs) in seeds {
        match fuzzer.add_initial_seed(msgs) {
            Ok(_) => {}
            Err(FuzzError::Unreachable(e)) => return Err(CampaignError::Unreachable(e.to_string())),
            Err(e) => log::warn!("seed {} not queued: {e}", path.display()),
        }
    }
    let mut saved = 0;
    let mut crash_files = Vec::new();
    let mut persist = |f: &mut Fuzzer<T>, crashes: &mut CrashStore, saved: &mut usize| -> io::Result<()> {
        for seed in &f.queue().seeds()[*saved..] {
            corpus::save_queue_seed(&out.join("queue"), seed)?;
        }
        *saved = f.queue().len();
        for c in f.drain_crashes() {
            if let CrashVerdict::Stored(p) = crashes.save(&c)? {
                log::info!("new crash {}", p.display());
                crash_files.push(p);
            }
        }
        Ok(())
    };
    persist(&mut fuzzer, &mut crashes, &mut saved)?;
    writeln!(stats, "{}", stats_line(&fuzzer, &crashes))?;

    let start = Instant::now();
    let mut next_stats = config.stats_interval_execs;
    let mut last_report = Instant::now();
    let done = |f: &Fuzzer<T>| match config.budget {
        Budget::Rounds(n) => f.stats().rounds >= n,
        Budget::Execs(_) => f.budget_exhausted(),
        Budget::Seconds(s) => start.elapsed().as_secs() >= s,
    };
    while !done(&fuzzer) && !config.stop.load(Ordering::Relaxed) {
        fuzzer.fuzz_round()?;
        persist(&mut fuzzer, &mut crashes, &mut saved)?;
        if let Some(ev) = events.as_mut() {
            for e in fuzzer.take_events() {
                writeln!(ev, "{}", event_line(&e))?;
            }
        }
        if fuzzer.stats().execs >= next_stats {
            writeln!(stats, "{}", stats_line(&fuzzer, &crashes))?;
            next_stats = (fuzzer.stats().execs / config.stats_interval_execs + 1) * config.stats_interval_execs;
        }
        // throughput is wall-clock dependent, so it stays out of the stats file
        if last_report.elapsed().as_secs() >= 5 {
            let secs = start.elapsed().as_secs_f64().max(1e-9);
            log::info!("{:.1} execs/s, {}", fuzzer.stats().execs as f64 / secs, stats_line(&fuzzer, &crashes));
            last_report = Instant::now();
        }
    }
    writeln!(stats, "{}", stats_line(&fuzzer, &crashes))?;
    stats.flush()?;
    if let Some(mut ev) = events {
        ev.flush()?;
    }
    fs::write(out.join("statemap.dot"), fuzzer.map().export_dot())?;
    if config.write_statemap_json {
        fs::write(out.join("statemap.json"), serde_json::to_vec_pretty(&statemap_json(&fuzzer)).map_err(io::Error::from)?)?;
    }
    let s = fuzzer.stats();
    Ok(CampaignSummary {
        execs: s.execs,
        rounds: s.rounds,
        seeds: fuzzer.queue().len(),
        unique_crashes: crashes.unique(),
        crash_files,
        edges: fuzzer.virgin().edges_seen(),
        bits: fuzzer.virgin().bits_cleared(),
        mean_messages_per_exec: s.mean_messages_per_exec(),
        rejected_seeds: rejected,
    })
}

/// Response codes after which the peer closed the connection, most frequent
/// first.
pub fn bootstrap_end_states(config: &CampaignConfig) -> Result<Vec<(u16, usize)>, CampaignError> {
    let ingested = corpus::ingest_initial_seeds(&config.seeds_dir)?;
    let extractor = StateExtractor::new(config.protocol, []);
    // closures are the whole point here, so give the peer time to hang up
    let mut config = config.clone();
    config.close_grace_ms = config.close_grace_ms.max(config.endpoint.response_timeout_ms);
    let config = &config;
    let counts = with_target(config, |t| -> Result<BTreeMap<u16, usize>, CampaignError> {
        let mut counts = BTreeMap::new();
        let mut cov = CoverageMap::new();
        for (_, msgs) in &ingested.seeds {
            let o = execute_sequence(t, msgs, &extractor, &mut cov)
                .map_err(|e| CampaignError::Unreachable(e.to_string()))?;
            for (resp, &closed) in o.responses.iter().zip(&o.closed_after) {
                if closed {
                    if let Some(c) = extractor.status_code(resp) {
                        *counts.entry(c).or_insert(0) += 1;
                    }
                }
            }
        }
        Ok(counts)
    })??;
    let mut v: Vec<(u16, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if v.is_empty() {
        log::warn!("no connection closures observed; no end states to propose");
    }
    Ok(v)
}

/// Replay one file against the configured target.
pub fn replay_file(config: &CampaignConfig, path: &Path) -> Result<statefuzz_core::ExecutionOutcome, CampaignError> {
    let msgs = crate::replay::read_file(path).map_err(|e| CampaignError::Config(format!("{}: {e}", path.display())))?;
    let extractor = config.extractor();
    with_target(config, |t| {
        execute_sequence(t, &msgs, &extractor, &mut CoverageMap::new())
            .map_err(|e| CampaignError::Unreachable(e.to_string()))
    })?
}

/// True when replaying `path` crashes the target again.
pub fn reproduces_crash(config: &CampaignConfig, path: &Path) -> Result<bool, CampaignError> {
    Ok(replay_file(config, path)?.verdict == Verdict::Crash)
}
