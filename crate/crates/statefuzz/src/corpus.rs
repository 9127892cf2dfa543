//! Seed ingestion, queue persistence and crash storage.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statefuzz_core::fuzzer::CrashReport;
use statefuzz_core::{Message, PointRef, Seed, StateId};

use crate::replay::{self, ReplayError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read seed directory {path}: {source}")]
    Dir { path: PathBuf, source: io::Error },
    #[error("no valid seed files in {0}")]
    NoValidSeeds(PathBuf),
}

#[derive(Debug)]
pub struct Ingested {
    /// Valid seeds, in file name order.
    pub seeds: Vec<(PathBuf, Vec<Message>)>,
    pub rejected: Vec<(PathBuf, ReplayError)>,
}

/// Parse every regular file in `dir` as a replay file.
pub fn ingest_initial_seeds(dir: &Path) -> Result<Ingested, CorpusError> {
    let dir_err = |source| CorpusError::Dir { path: dir.to_path_buf(), source };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(dir_err)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Ingested { seeds: Vec::new(), rejected: Vec::new() };
    for p in paths {
        match replay::read_file(&p) {
            Ok(m) => out.seeds.push((p, m)),
            Err(e) => {
                log::warn!("rejecting seed {}: {e}", p.display());
                out.rejected.push((p, e));
            }
        }
    }
    if out.seeds.is_empty() {
        return Err(CorpusError::NoValidSeeds(dir.to_path_buf()));
    }
    Ok(out)
}

pub fn point_name(p: PointRef) -> String {
    match p {
        PointRef::Map(i) => format!("map:{i}"),
        PointRef::Zero(u) => format!("zero:{u}"),
        PointRef::ToAdd(u) => format!("to_add:{u}"),
    }
}

fn state_names(states: &[StateId]) -> Vec<String> {
    states.iter().map(ToString::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedMeta {
    pub id: u32,
    pub states: Vec<String>,
    pub signature: String,
    pub subsequences: usize,
}

/// Write `queue/id_NNNNNN.seq` plus a JSON sidecar with its state list.
pub fn save_queue_seed(queue_dir: &Path, seed: &Seed) -> io::Result<PathBuf> {
    let path = queue_dir.join(format!("id_{:06}.seq", seed.id.0));
    replay::write_file(&path, &seed.sequence.messages).map_err(into_io)?;
    let meta = SeedMeta {
        id: seed.id.0,
        states: state_names(&seed.sequence.states),
        signature: format!("{:016x}", seed.coverage_signature),
        subsequences: seed.subsequence_count,
    };
    fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashMeta {
    pub signature: String,
    pub seed_id: u32,
    pub csi: Option<usize>,
    pub target_point: Option<String>,
    pub states: Vec<String>,
    pub rng_seed: u64,
    pub rng_word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CrashVerdict {
    Stored(PathBuf),
    Duplicate,
}

/// Crash artifacts, one per distinct coverage signature.
#[derive(Debug)]
pub struct CrashStore {
    dir: PathBuf,
    seen: BTreeSet<u64>,
    duplicates: u64,
}

impl CrashStore {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, seen: BTreeSet::new(), duplicates: 0 })
    }

    pub fn unique(&self) -> usize {
        self.seen.len()
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn save(&mut self, report: &CrashReport) -> io::Result<CrashVerdict> {
        if !self.seen.insert(report.signature) {
            self.duplicates += 1;
            return Ok(CrashVerdict::Duplicate);
        }
        let path = self.dir.join(format!("id_{:06}_sig_{:016x}.seq", self.seen.len() - 1, report.signature));
        replay::write_file(&path, &report.messages).map_err(into_io)?;
        let meta = CrashMeta {
            signature: format!("{:016x}", report.signature),
            seed_id: report.seed.0,
            csi: report.csi,
            target_point: report.target.map(point_name),
            states: state_names(&report.states),
            rng_seed: report.rng_seed,
            rng_word_pos: report.rng_word_pos.to_string(),
        };
        fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(CrashVerdict::Stored(path))
    }
}

fn into_io(e: ReplayError) -> io::Error {
    match e {
        ReplayError::Io(e) => e,
        other => io::Error::new(io::ErrorKind::InvalidData, other),
    }
}
