mod support;

use std::collections::BTreeSet;

use statefuzz_core::fuzzer::{Fuzzer, FuzzerConfig, SchedulerMode};
use statefuzz_core::toy::{ToySut, ToySutConfig};
use statefuzz_core::transport::execute_sequence;
use statefuzz_core::{CoverageMap, ProtocolKind, StateExtractor, StateId, Verdict};
use support::*;

fn extractor() -> StateExtractor {
    StateExtractor::new(ProtocolKind::LineCode, [221, 530])
}

fn fuzzer(mode: SchedulerMode, rng_seed: u64, crash: bool) -> Fuzzer<ToySut> {
    let mut cfg = ToySutConfig::default_ftp();
    if !crash {
        cfg = cfg.without_crash();
    }
    let fc = FuzzerConfig { mode, rng_seed, ..Default::default() };
    let mut f = Fuzzer::new(fc, ToySut::new(cfg), extractor());
    for s in toy_seeds() {
        f.add_initial_seed(s).unwrap();
    }
    f
}

fn name(s: StateId) -> String {
    s.to_string()
}

/// Every (response, next response) pair the rule table allows, named as the
/// DOT export names states.
fn declared_edges(cfg: &ToySutConfig, x: &StateExtractor) -> BTreeSet<(String, String)> {
    let state_of = |code: u16| name(x.extract(format!("{code} x\r\n").as_bytes()));
    let entry: Vec<&_> = cfg.rules.iter().filter(|r| r.state == cfg.initial).collect();
    let mut out = BTreeSet::new();
    for r in &entry {
        for src in ["S0", "Send"] {
            out.insert((src.to_string(), state_of(r.code)));
        }
        out.insert((state_of(cfg.banner_code), state_of(r.code)));
    }
    for r1 in &cfg.rules {
        if cfg.closing.contains(&r1.next) {
            continue;
        }
        for r2 in cfg.rules.iter().filter(|r| r.state == r1.next) {
            out.insert((state_of(r1.code), state_of(r2.code)));
        }
    }
    out
}

fn dot_edges(dot: &str) -> Vec<(String, String)> {
    dot.lines()
        .filter_map(|l| {
            let (a, rest) = l.trim().split_once(" -> ")?;
            let b = rest.split_whitespace().next()?;
            Some((a.trim_matches('"').to_string(), b.trim_matches('"').to_string()))
        })
        .collect()
}

#[test]
fn reruns_are_identical() {
    let cfg = ToySutConfig::default_ftp();
    let mut sut = ToySut::new(cfg);
    for s in toy_seeds() {
        let mut a = CoverageMap::new();
        let mut b = CoverageMap::new();
        let oa = execute_sequence(&mut sut, &s, &extractor(), &mut a).unwrap();
        let ob = execute_sequence(&mut sut, &s, &extractor(), &mut b).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.hit_indices(), b.hit_indices());
        assert_eq!(a.signature(), b.signature());
        assert!(!a.is_empty());
        assert!(oa.states.iter().filter(|s| s.is_end()).count() >= 2);
    }
}

#[test]
fn queue_seeds_replay_to_their_states() {
    let mut f = fuzzer(SchedulerMode::RssFavor, 3, false);
    for _ in 0..150 {
        f.fuzz_round().unwrap();
    }
    let mut sut = ToySut::new(ToySutConfig::default_ftp().without_crash());
    for seed in f.queue().seeds() {
        let o = execute_sequence(&mut sut, &seed.sequence.messages, &extractor(), &mut CoverageMap::new())
            .unwrap();
        assert_eq!(o.states, seed.sequence.states, "seed {:?}", seed.id);
    }
}

#[test]
fn dot_edges_are_declared_transitions() {
    let declared = declared_edges(&ToySutConfig::default_ftp(), &extractor());
    for mode in [SchedulerMode::RssFavor, SchedulerMode::BaselineStateFirst] {
        let mut f = fuzzer(mode, 7, false);
        for _ in 0..300 {
            f.fuzz_round().unwrap();
        }
        let edges = dot_edges(&f.map().export_dot());
        assert!(edges.len() > 10);
        for e in edges {
            assert!(declared.contains(&e), "{mode:?}: undeclared edge {e:?}");
        }
    }
}

#[test]
fn golden_hundred_rounds() {
    let run = || {
        let mut f = fuzzer(SchedulerMode::RssFavor, 42, true);
        for _ in 0..100 {
            f.fuzz_round().unwrap();
        }
        let sigs: Vec<u64> = f.queue().seeds().iter().map(|s| s.coverage_signature).collect();
        (f.stats().clone(), f.map().export_dot(), sigs, f.virgin().raw().to_vec())
    };
    let a = run();
    assert!(a.0.execs > 1000);
    assert_eq!(a, run());
}

#[test]
fn crash_reports_reproduce() {
    let mut f = fuzzer(SchedulerMode::RssFavor, 1, true);
    f.set_max_execs(Some(60_000));
    let mut reports = Vec::new();
    while !f.budget_exhausted() && reports.is_empty() {
        f.fuzz_round().unwrap();
        reports.extend(f.drain_crashes());
    }
    assert!(!reports.is_empty(), "no crash in 60k execs");
    let mut sut = ToySut::new(ToySutConfig::default_ftp());
    for r in reports {
        let o = execute_sequence(&mut sut, &r.messages, &extractor(), &mut CoverageMap::new()).unwrap();
        assert_eq!(o.verdict, Verdict::Crash);
        assert_eq!(o.states, r.states);
    }
}

#[test]
fn subsequences_send_fewer_messages() {
    let mut rss = fuzzer(SchedulerMode::RssFavor, 9, false);
    let mut base = fuzzer(SchedulerMode::BaselineStateFirst, 9, false);
    for f in [&mut rss, &mut base] {
        f.set_max_execs(Some(20_000));
        while !f.budget_exhausted() {
            f.fuzz_round().unwrap();
        }
    }
    assert!(rss.stats().mean_messages_per_exec() < base.stats().mean_messages_per_exec());
}

#[test]
fn every_mode_makes_progress() {
    for mode in SchedulerMode::ALL {
        let mut f = fuzzer(mode, 2, false);
        let edges = f.virgin().edges_seen();
        f.set_max_execs(Some(5_000));
        while !f.budget_exhausted() {
            f.fuzz_round().unwrap();
        }
        assert!(f.virgin().edges_seen() > edges, "{mode:?}");
        assert_eq!(mode.is_stateful(), f.map().occupied_count() > 0);
    }
}
