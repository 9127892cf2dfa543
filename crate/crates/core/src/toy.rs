//! Deterministic in-process FTP-like server used as a desk-scale target.
//!
//! Behaviour comes from a rule table: in a given state the first rule whose
//! pattern matches the command decides the reply code, the next state, and the
//! basic blocks reported as coverage. States listed as closing make the server
//! drop the connection after replying.
//!
//! Rule file syntax (one directive per line, `#` starts a comment):
//!
//! ```text
//! banner 220 greeting
//! closes quit error
//! crash logged | TYPE X*
//! rule greeting | USER * | auth | 331 | 1 2 3
//! ```
//!
//! Patterns match the command with its trailing line ending removed. `*`
//! matches any run of bytes, `?` any single byte, and `\xHH`, `\*`, `\?`,
//! `\\` are escapes.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::coverage::CoverageMap;
use crate::transport::{Reply, Target, TransportError};

/// The committed default rule table.
pub const DEFAULT_RULES: &str = include_str!("../data/toy_ftp.rules");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ToyConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("missing `banner` directive")]
    NoBanner,
    #[error("state `{0}` is used but has no rules and is not closing")]
    DeadState(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Byte(u8),
    Any,
    Star,
}

/// A compiled glob over bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    source: String,
    toks: Vec<Tok>,
}

impl Pattern {
    pub fn parse(src: &str) -> Result<Self, String> {
        let b = src.as_bytes();
        let mut toks = Vec::new();
        let mut i = 0;
        while i < b.len() {
            match b[i] {
                b'*' => toks.push(Tok::Star),
                b'?' => toks.push(Tok::Any),
                b'\\' => {
                    i += 1;
                    match b.get(i) {
                        Some(b'x') => {
                            let hex = src.get(i + 1..i + 3).ok_or("truncated \\x escape")?;
                            let v = u8::from_str_radix(hex, 16)
                                .map_err(|_| format!("bad hex escape `\\x{hex}`"))?;
                            toks.push(Tok::Byte(v));
                            i += 2;
                        }
                        Some(&c @ (b'*' | b'?' | b'\\')) => toks.push(Tok::Byte(c)),
                        _ => return Err("dangling escape".to_string()),
                    }
                }
                c => toks.push(Tok::Byte(c)),
            }
            i += 1;
        }
        Ok(Self { source: src.to_string(), toks })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn matches(&self, input: &[u8]) -> bool {
        // classic two-pointer glob with single backtrack point
        let (mut p, mut s) = (0, 0);
        let mut star: Option<(usize, usize)> = None;
        while s < input.len() {
            match self.toks.get(p) {
                Some(Tok::Byte(c)) if *c == input[s] => {
                    p += 1;
                    s += 1;
                }
                Some(Tok::Any) => {
                    p += 1;
                    s += 1;
                }
                Some(Tok::Star) => {
                    star = Some((p, s));
                    p += 1;
                }
                _ => match star {
                    Some((sp, ss)) => {
                        p = sp + 1;
                        s = ss + 1;
                        star = Some((sp, ss + 1));
                    }
                    None => return false,
                },
            }
        }
        self.toks[p..].iter().all(|t| *t == Tok::Star)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyRule {
    pub state: String,
    pub pattern: Pattern,
    pub next: String,
    pub code: u16,
    pub blocks: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToySutConfig {
    pub initial: String,
    pub banner_code: u16,
    pub rules: Vec<ToyRule>,
    /// States after which the server closes the connection.
    pub closing: BTreeSet<String>,
    pub crash: Option<(String, Pattern)>,
}

impl ToySutConfig {
    pub fn default_ftp() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled rule table parses")
    }

    pub fn without_crash(mut self) -> Self {
        self.crash = None;
        self
    }

    pub fn parse(text: &str) -> Result<Self, ToyConfigError> {
        let mut banner = None;
        let mut rules = Vec::new();
        let mut closing = BTreeSet::new();
        let mut crash = None;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let err = |reason: &str| ToyConfigError::Syntax { line, reason: reason.to_string() };
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            let (word, rest) = content.split_once(char::is_whitespace).unwrap_or((content, ""));
            let rest = rest.trim();
            match word {
                "banner" => {
                    let mut it = rest.split_whitespace();
                    let code = it.next().and_then(|c| c.parse().ok()).ok_or(err("bad banner code"))?;
                    let state = it.next().ok_or(err("banner needs an initial state"))?;
                    banner = Some((code, state.to_string()));
                }
                "closes" => closing.extend(rest.split_whitespace().map(str::to_string)),
                "crash" => {
                    let (state, pat) = rest.split_once('|').ok_or(err("crash needs `state | pattern`"))?;
                    let pat = Pattern::parse(pat.trim()).map_err(|e| err(&e))?;
                    crash = Some((state.trim().to_string(), pat));
                }
                "rule" => {
                    let cols: Vec<&str> = rest.split('|').map(str::trim).collect();
                    if cols.len() != 5 {
                        return Err(err("rule needs 5 `|`-separated columns"));
                    }
                    let code = cols[3].parse().map_err(|_| err("bad response code"))?;
                    let blocks = cols[4]
                        .split_whitespace()
                        .map(str::parse)
                        .collect::<Result<Vec<u32>, _>>()
                        .map_err(|_| err("bad block id"))?;
                    rules.push(ToyRule {
                        state: cols[0].to_string(),
                        pattern: Pattern::parse(cols[1]).map_err(|e| err(&e))?,
                        next: cols[2].to_string(),
                        code,
                        blocks,
                    });
                }
                other => return Err(err(&format!("unknown directive `{other}`"))),
            }
        }
        let (banner_code, initial) = banner.ok_or(ToyConfigError::NoBanner)?;
        let cfg = Self { initial, banner_code, rules, closing, crash };
        for r in &cfg.rules {
            if !cfg.closing.contains(&r.next) && !cfg.rules.iter().any(|q| q.state == r.next) {
                return Err(ToyConfigError::DeadState(r.next.clone()));
            }
        }
        Ok(cfg)
    }

    /// First matching rule for `command` in `state`.
    pub fn rule_for(&self, state: &str, command: &[u8]) -> Option<&ToyRule> {
        self.rules.iter().find(|r| r.state == state && r.pattern.matches(command))
    }

    pub fn states(&self) -> BTreeSet<&str> {
        let mut s: BTreeSet<&str> = self.rules.iter().map(|r| r.state.as_str()).collect();
        s.extend(self.rules.iter().map(|r| r.next.as_str()));
        s.insert(&self.initial);
        s
    }

    /// Response codes after which the server closes the connection.
    pub fn closing_codes(&self) -> BTreeSet<u16> {
        self.rules.iter().filter(|r| self.closing.contains(&r.next)).map(|r| r.code).collect()
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(p) => &line[..p],
        None => line,
    }
}

/// Strip one trailing `\r\n` or `\n`.
pub fn command_of(payload: &[u8]) -> &[u8] {
    let p = payload.strip_suffix(b"\n").unwrap_or(payload);
    p.strip_suffix(b"\r").unwrap_or(p)
}

/// The server itself. One connection at a time.
#[derive(Debug, Clone)]
pub struct ToySut {
    config: ToySutConfig,
    session: Option<String>,
    /// Requests that arrived while no connection was open.
    pub writes_while_closed: usize,
}

impl ToySut {
    pub fn new(config: ToySutConfig) -> Self {
        Self { config, session: None, writes_while_closed: 0 }
    }

    pub fn config(&self) -> &ToySutConfig {
        &self.config
    }
}

impl Target for ToySut {
    fn connect(&mut self, _coverage: &mut CoverageMap) -> Result<Vec<u8>, TransportError> {
        self.session = Some(self.config.initial.clone());
        Ok(format!("{} toy ftp ready\r\n", self.config.banner_code).into_bytes())
    }

    fn exchange(
        &mut self,
        request: &[u8],
        coverage: &mut CoverageMap,
    ) -> Result<Reply, TransportError> {
        let Some(state) = self.session.as_deref() else {
            self.writes_while_closed += 1;
            return Err(TransportError::Io("connection closed".to_string()));
        };
        let cmd = command_of(request);
        if let Some((cs, pat)) = &self.config.crash {
            if cs == state && pat.matches(cmd) {
                self.session = None;
                return Ok(Reply::Reset);
            }
        }
        let Some(rule) = self.config.rule_for(state, cmd) else {
            return Ok(Reply::Response { bytes: b"500 unrecognised\r\n".to_vec(), peer_closed: false });
        };
        for w in rule.blocks.windows(2) {
            coverage.record_edge(w[0], w[1]);
        }
        let closes = self.config.closing.contains(&rule.next);
        let bytes = format!("{} {}\r\n", rule.code, rule.next).into_bytes();
        self.session = if closes { None } else { Some(rule.next.clone()) };
        Ok(Reply::Response { bytes, peer_closed: closes })
    }

    fn disconnect(&mut self) {
        self.session = None;
    }
}
