//! Text format for Markov instances.
//!
//! ```text
//! # comment
//! paths 4
//! seed 0 path=0 state=1 cover=0,1 row=2:0.1,3:0.05
//! seed 1 path=1 state=- cover=2 row=2:0.2
//! ```
//!
//! Row entries not listed are zero.

use std::collections::BTreeSet;

use statefuzz_core::markov::{MarkovInstance, MarkovSeed};

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

pub fn parse(text: &str) -> Result<MarkovInstance, ParseError> {
    let mut path_count = None;
    let mut raw = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        let err = |reason: String| ParseError { line, reason };
        let l = l.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let mut words = l.split_whitespace();
        match words.next() {
            Some("paths") => {
                let n = words.next().ok_or_else(|| err("missing path count".into()))?;
                path_count = Some(n.parse::<usize>().map_err(|e| err(format!("path count: {e}")))?);
            }
            Some("seed") => {
                let id = words
                    .next()
                    .ok_or_else(|| err("missing seed id".into()))?
                    .parse::<u32>()
                    .map_err(|e| err(format!("seed id: {e}")))?;
                let mut seed = MarkovSeed { id, path: usize::MAX, state: None, cover: BTreeSet::new(), row: Vec::new() };
                let mut entries = Vec::new();
                for w in words {
                    let (k, v) = w.split_once('=').ok_or_else(|| err(format!("expected key=value, got {w:?}")))?;
                    match k {
                        "path" => seed.path = v.parse().map_err(|e| err(format!("path: {e}")))?,
                        "state" if v == "-" => seed.state = None,
                        "state" => seed.state = Some(v.parse().map_err(|e| err(format!("state: {e}")))?),
                        "cover" => {
                            for b in v.split(',').filter(|b| !b.is_empty()) {
                                seed.cover.insert(b.parse().map_err(|e| err(format!("cover bit: {e}")))?);
                            }
                        }
                        "row" => {
                            for e in v.split(',').filter(|e| !e.is_empty()) {
                                let (j, p) = e.split_once(':').ok_or_else(|| err(format!("row entry {e:?}")))?;
                                let j: usize = j.parse().map_err(|e| err(format!("row path: {e}")))?;
                                let p: f64 = p.parse().map_err(|e| err(format!("row value: {e}")))?;
                                entries.push((j, p));
                            }
                        }
                        other => return Err(err(format!("unknown key {other:?}"))),
                    }
                }
                if seed.path == usize::MAX {
                    return Err(err("seed without path=".into()));
                }
                raw.push((line, seed, entries));
            }
            Some(other) => return Err(err(format!("unknown directive {other:?}"))),
            None => {}
        }
    }
    let path_count = path_count.ok_or(ParseError { line: 0, reason: "missing `paths` line".into() })?;
    let mut seeds = Vec::with_capacity(raw.len());
    for (line, mut seed, entries) in raw {
        seed.row = vec![0.0; path_count];
        for (j, p) in entries {
            *seed.row.get_mut(j).ok_or_else(|| ParseError { line, reason: format!("row path {j} out of range") })? = p;
        }
        seeds.push(seed);
    }
    let inst = MarkovInstance { path_count, seeds };
    inst.validate().map_err(|e| ParseError { line: 0, reason: e.to_string() })?;
    Ok(inst)
}

pub fn render(inst: &MarkovInstance) -> String {
    let mut out = format!("paths {}\n", inst.path_count);
    for s in &inst.seeds {
        let state = s.state.map_or_else(|| "-".to_string(), |m| m.to_string());
        let cover: Vec<String> = s.cover.iter().map(ToString::to_string).collect();
        let row: Vec<String> = s
            .row
            .iter()
            .enumerate()
            .filter(|(_, p)| **p != 0.0)
            .map(|(j, p)| format!("{j}:{p:?}"))
            .collect();
        out.push_str(&format!(
            "seed {} path={} state={state} cover={} row={}\n",
            s.id,
            s.path,
            cover.join(","),
            row.join(",")
        ));
    }
    out
}
