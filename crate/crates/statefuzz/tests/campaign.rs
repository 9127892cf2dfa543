use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::thread;

use statefuzz::campaign::{bootstrap_end_states, replay_file, run_campaign, Budget, CampaignConfig};
use statefuzz::replay::write_file;
use statefuzz::socket::{serve_toy, CoverageFeed};
use statefuzz_core::fuzzer::SchedulerMode;
use statefuzz_core::toy::ToySutConfig;
use statefuzz_core::transport::TargetEndpoint;
use statefuzz_core::{Message, Verdict};

fn line(s: &str) -> Message {
    Message::new(format!("{s}\r\n").into_bytes())
}

fn write_seeds(dir: &Path) {
    let seeds: [&[&str]; 3] = [
        &["USER anonymous", "PASS secret", "TYPE I", "PASV", "LIST", "QUIT", "USER anonymous", "PASS wrong"],
        &["SYST", "USER bob", "PASS secret", "CWD /", "QUIT", "FEAT", "QUIT"],
        &["USER anonymous", "PASS secret", "PORT 1,2,3,4,5,6", "RETR readme.txt", "QUIT", "PASS x"],
    ];
    for (i, s) in seeds.iter().enumerate() {
        let msgs: Vec<Message> = s.iter().map(|l| line(l)).collect();
        write_file(&dir.join(format!("seed_{i}.seq")), &msgs).unwrap();
    }
}

fn setup() -> (tempfile::TempDir, CampaignConfig) {
    let dir = tempfile::tempdir().unwrap();
    let seeds = dir.path().join("seeds");
    fs::create_dir(&seeds).unwrap();
    write_seeds(&seeds);
    let cfg = CampaignConfig::builtin(seeds, dir.path().join("out"));
    (dir, cfg)
}

fn field_names(line: &str) -> Vec<String> {
    line.split_whitespace().map(|kv| kv.split_once('=').unwrap().0.to_string()).collect()
}

#[test]
fn zero_rounds_only_ingests() {
    let (_d, mut cfg) = setup();
    cfg.budget = Budget::Rounds(0);
    let s = run_campaign(&cfg).unwrap();
    assert_eq!(s.execs, 3);
    assert_eq!(s.seeds, 3);
    let out = &cfg.out_dir;
    assert_eq!(fs::read_dir(out.join("queue")).unwrap().count(), 6);
    assert!(out.join("statemap.dot").exists());
    assert!(out.join("crashes").is_dir());
    assert_eq!(fs::read_to_string(out.join("stats")).unwrap().lines().count(), 2);
}

#[test]
fn reruns_are_byte_identical_and_schema_is_shared() {
    let (d, mut cfg) = setup();
    cfg.budget = Budget::Rounds(300);
    cfg.write_events = true;
    cfg.write_statemap_json = true;
    run_campaign(&cfg).unwrap();
    let first = cfg.out_dir.clone();
    cfg.out_dir = d.path().join("again");
    run_campaign(&cfg).unwrap();
    for f in ["stats", "statemap.dot", "statemap.json", "events.log"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(cfg.out_dir.join(f)).unwrap(), "{f}");
    }

    let stats = fs::read_to_string(first.join("stats")).unwrap();
    let schema = field_names(stats.lines().next().unwrap());
    for mode in SchedulerMode::ALL {
        cfg.mode = mode;
        cfg.out_dir = d.path().join(mode.name());
        run_campaign(&cfg).unwrap();
        for l in fs::read_to_string(cfg.out_dir.join("stats")).unwrap().lines() {
            assert_eq!(field_names(l), schema, "{mode:?}");
        }
    }
}

#[test]
fn stored_crash_replays() {
    let (_d, mut cfg) = setup();
    cfg.budget = Budget::Execs(100_000);
    let s = run_campaign(&cfg).unwrap();
    assert!(s.unique_crashes >= 1);
    assert_eq!(s.crash_files.len(), s.unique_crashes);
    for f in &s.crash_files {
        assert_eq!(replay_file(&cfg, f).unwrap().verdict, Verdict::Crash);
        assert!(f.with_extension("json").exists());
    }
}

#[test]
fn bootstrap_proposes_closing_codes() {
    let (_d, cfg) = setup();
    let codes: Vec<u16> = bootstrap_end_states(&cfg).unwrap().into_iter().map(|(c, _)| c).collect();
    assert_eq!(codes, vec![221, 530]);

    let mut open = cfg.clone();
    open.toy_rules = Some(
        ToySutConfig::parse("banner 220 idle\nrule idle | * | idle | 200 | 1 2\n").unwrap(),
    );
    assert!(bootstrap_end_states(&open).unwrap().is_empty());
}

#[test]
fn bad_configs_are_refused() {
    let (d, mut cfg) = setup();
    cfg.end_codes.clear();
    assert!(run_campaign(&cfg).is_err());
    cfg.mode = SchedulerMode::Stateless;
    cfg.budget = Budget::Rounds(1);
    assert!(run_campaign(&cfg).is_ok());

    let (_d2, mut cfg) = setup();
    cfg.seeds_dir = d.path().join("nowhere");
    assert!(run_campaign(&cfg).is_err());
    let empty = d.path().join("empty");
    fs::create_dir(&empty).unwrap();
    fs::write(empty.join("junk"), b"not a replay file").unwrap();
    cfg.seeds_dir = empty;
    assert!(run_campaign(&cfg).is_err());

    let (_d3, mut cfg) = setup();
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    cfg.endpoint = TargetEndpoint::socket(addr.to_string(), 50);
    assert!(run_campaign(&cfg).is_err());
}

#[test]
fn fuzzes_over_tcp_with_coverage_feed() {
    let (d, mut cfg) = setup();
    let feed = d.path().join("cov.bin");
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    let server_feed = CoverageFeed::new(&feed);
    thread::spawn(move || serve_toy(l, ToySutConfig::default_ftp(), Some(server_feed), None));
    cfg.endpoint = TargetEndpoint::socket(addr.to_string(), 100);
    cfg.coverage_feed = Some(feed);
    cfg.budget = Budget::Execs(150);
    let codes: Vec<u16> = bootstrap_end_states(&cfg).unwrap().into_iter().map(|(c, _)| c).collect();
    assert_eq!(codes, vec![221, 530]);
    let s = run_campaign(&cfg).unwrap();
    assert_eq!(s.execs, 150);
    assert!(s.edges > 0);
    assert!(fs::read_to_string(cfg.out_dir.join("statemap.dot")).unwrap().contains("->"));
}
