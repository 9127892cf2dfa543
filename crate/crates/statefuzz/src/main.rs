use std::fs;
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use statefuzz::campaign::{self, Budget, CampaignConfig};
use statefuzz::core::fuzzer::SchedulerMode;
use statefuzz::core::toy::ToySutConfig;
use statefuzz::core::transport::TargetEndpoint;
use statefuzz::core::ProtocolKind;
use statefuzz::socket::{self, CoverageFeed};
use statefuzz::{markov_file, replay};

#[derive(Parser)]
#[command(name = "statefuzz", version, about = "Statemap-guided stateful protocol fuzzer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a fuzzing campaign.
    Fuzz(FuzzArgs),
    /// Propose end-state codes from the initial seeds.
    Bootstrap(TargetArgs),
    /// Send one replay file and print the observed states.
    Replay {
        file: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
    },
    /// Per-round trigger probabilities for a Markov instance file.
    Markov {
        file: PathBuf,
        /// Only this undiscovered path.
        #[arg(long)]
        path: Option<usize>,
    },
    /// Split a raw client-side capture into a replay file.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "\\r\\n")]
        terminator: String,
    },
    /// Serve the toy protocol over TCP.
    ServeToy {
        #[arg(long, default_value = "127.0.0.1:2121")]
        listen: String,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Coverage region to add hit counts to (defaults to $STATEFUZZ_COVERAGE_PATH).
        #[arg(long)]
        coverage_file: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    LineCode,
    StatusLine,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    RssFavor,
    RssUniform,
    BaselineStateFirst,
    Stateless,
}

#[derive(Args)]
struct TargetArgs {
    /// Directory of replay files.
    #[arg(long)]
    seeds: PathBuf,
    /// `builtin` for the in-process toy server, else host:port.
    #[arg(long, default_value = "builtin")]
    target: String,
    #[arg(long, value_enum, default_value = "line-code")]
    protocol: Protocol,
    /// Comma separated end-state response codes.
    #[arg(long, value_delimiter = ',')]
    end_codes: Vec<u16>,
    #[arg(long, default_value_t = 200)]
    timeout_ms: u32,
    /// Rule table for the builtin target.
    #[arg(long)]
    toy_rules: Option<PathBuf>,
    /// Response terminator for socket targets; `\r` and `\n` escapes allowed.
    #[arg(long, default_value = "\\r\\n")]
    terminator: String,
    /// Coverage region shared with the target (defaults to $STATEFUZZ_COVERAGE_PATH).
    #[arg(long)]
    coverage_file: Option<PathBuf>,
}

#[derive(Args)]
struct FuzzArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "rss-favor")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    #[arg(long, conflicts_with_all = ["execs", "seconds"])]
    rounds: Option<u64>,
    #[arg(long, conflicts_with = "seconds")]
    execs: Option<u64>,
    #[arg(long)]
    seconds: Option<u64>,
    #[arg(long, default_value_t = 500)]
    stats_every: u64,
    /// Derive end-state codes from the seeds before fuzzing.
    #[arg(long)]
    bootstrap: bool,
    /// Write the selection log to events.log.
    #[arg(long)]
    events: bool,
    #[arg(long)]
    statemap_json: bool,
}

fn unescape(s: &str) -> Vec<u8> {
    s.replace("\\r", "\r").replace("\\n", "\n").replace("\\t", "\t").into_bytes()
}

fn base_config(t: &TargetArgs, out: PathBuf) -> Result<CampaignConfig> {
    let mut c = CampaignConfig::builtin(&t.seeds, out);
    c.endpoint = if t.target == "builtin" {
        TargetEndpoint::builtin()
    } else {
        TargetEndpoint::socket(t.target.clone(), t.timeout_ms)
    };
    c.protocol = match t.protocol {
        Protocol::LineCode => ProtocolKind::LineCode,
        Protocol::StatusLine => ProtocolKind::StatusLine,
    };
    c.end_codes = t.end_codes.clone();
    if let Some(p) = &t.toy_rules {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        c.toy_rules = Some(ToySutConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?);
    }
    c.terminator = unescape(&t.terminator);
    c.coverage_feed = t.coverage_file.clone();
    Ok(c)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Fuzz(a) => {
            let mut c = base_config(&a.target, a.out.clone())?;
            c.mode = match a.mode {
                Mode::RssFavor => SchedulerMode::RssFavor,
                Mode::RssUniform => SchedulerMode::RssUniform,
                Mode::BaselineStateFirst => SchedulerMode::BaselineStateFirst,
                Mode::Stateless => SchedulerMode::Stateless,
            };
            c.rng_seed = a.rng_seed;
            c.budget = match (a.rounds, a.execs, a.seconds) {
                (Some(r), _, _) => Budget::Rounds(r),
                (_, Some(e), _) => Budget::Execs(e),
                (_, _, Some(s)) => Budget::Seconds(s),
                _ => Budget::Rounds(1000),
            };
            c.stats_interval_execs = a.stats_every;
            c.write_events = a.events;
            c.write_statemap_json = a.statemap_json;
            if a.bootstrap {
                let proposal = campaign::bootstrap_end_states(&c)?;
                if proposal.is_empty() && c.end_codes.is_empty() {
                    bail!("bootstrap found no end states; pass --end-codes");
                }
                c.end_codes.extend(proposal.iter().map(|(code, _)| *code));
                c.end_codes.sort_unstable();
                c.end_codes.dedup();
                eprintln!("end codes: {:?}", c.end_codes);
            }
            let stop = c.stop.clone();
            ctrlc::set_handler(move || stop.store(true, Ordering::Relaxed)).ok();
            let s = campaign::run_campaign(&c)?;
            println!(
                "execs={} rounds={} seeds={} unique_crashes={} edges={} bits={} msgs_per_exec={:.3}",
                s.execs, s.rounds, s.seeds, s.unique_crashes, s.edges, s.bits, s.mean_messages_per_exec
            );
        }
        Cmd::Bootstrap(t) => {
            let c = base_config(&t, PathBuf::new())?;
            let proposal = campaign::bootstrap_end_states(&c)?;
            if proposal.is_empty() {
                eprintln!("warning: the peer never closed the connection; no end states proposed");
            }
            for (code, n) in &proposal {
                println!("{code}\t{n}");
            }
        }
        Cmd::Replay { file, target } => {
            let c = base_config(&target, PathBuf::new())?;
            let o = campaign::replay_file(&c, &file)?;
            let states: Vec<String> = o.states.iter().map(ToString::to_string).collect();
            println!("states: {}", states.join(" "));
            println!("verdict: {:?} sent={} reconnects={}", o.verdict, o.messages_sent, o.reconnects);
            if o.verdict != statefuzz::core::Verdict::Ok {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Markov { file, path } => {
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let inst = markov_file::parse(&text)?;
            let targets: Vec<usize> = match path {
                Some(j) => vec![j],
                None => inst.undiscovered().into_iter().collect(),
            };
            println!("path\tp_cgf\tp_scgf\tp_rss");
            for j in targets {
                let p = inst.probabilities(j)?;
                println!("{j}\t{:.12}\t{:.12}\t{:.12}", p.cgf, p.scgf, p.rss);
            }
        }
        Cmd::Convert { input, output, terminator } => {
            let raw = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let msgs = replay::split_lines(&raw, &unescape(&terminator));
            replay::write_file(&output, &msgs)?;
            println!("{} messages", msgs.len());
        }
        Cmd::ServeToy { listen, rules, coverage_file } => {
            let cfg = match rules {
                Some(p) => ToySutConfig::parse(&fs::read_to_string(&p)?)?,
                None => ToySutConfig::default_ftp(),
            };
            let feed = coverage_file.map(CoverageFeed::new).or_else(CoverageFeed::from_env);
            let l = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            eprintln!("serving toy protocol on {}", l.local_addr()?);
            socket::serve_toy(l, cfg, feed, None)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
