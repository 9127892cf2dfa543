//! Length-prefixed message sequence files.
//!
//! ```text
//! "MSQ1" | count: u32 LE | count x (len: u32 LE | payload)
//! ```
//!
//! `count` is at least 1 and the frames must account for every byte.

use std::fs;
use std::io;
use std::path::Path;

use statefuzz_core::Message;

pub const MAGIC: &[u8; 4] = b"MSQ1";

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("bad magic")]
    BadMagic,
    #[error("file too short for header")]
    ShortHeader,
    #[error("message count is zero")]
    Empty,
    #[error("frame {index} truncated: need {need} bytes, {have} left")]
    Truncated { index: usize, need: usize, have: usize },
    #[error("{0} trailing bytes after last frame")]
    Trailing(usize),
    #[error("message {0} does not fit a u32 length")]
    TooLong(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode(messages: &[Message]) -> Result<Vec<u8>, ReplayError> {
    if messages.is_empty() {
        return Err(ReplayError::Empty);
    }
    let body: usize = messages.iter().map(|m| 4 + m.len()).sum();
    let mut out = Vec::with_capacity(8 + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(messages.len() as u32).to_le_bytes());
    for (i, m) in messages.iter().enumerate() {
        let len = u32::try_from(m.len()).map_err(|_| ReplayError::TooLong(i))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&m.payload);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Message>, ReplayError> {
    if bytes.len() < 8 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            ReplayError::BadMagic
        } else {
            ReplayError::ShortHeader
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(ReplayError::BadMagic);
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if count == 0 {
        return Err(ReplayError::Empty);
    }
    let mut rest = &bytes[8..];
    // don't trust count for the allocation
    let mut out = Vec::with_capacity(count.min(rest.len() / 4));
    for index in 0..count {
        if rest.len() < 4 {
            return Err(ReplayError::Truncated { index, need: 4, have: rest.len() });
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(ReplayError::Truncated { index, need: len, have: rest.len() });
        }
        out.push(Message::new(rest[..len].to_vec()));
        rest = &rest[len..];
    }
    if !rest.is_empty() {
        return Err(ReplayError::Trailing(rest.len()));
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<Message>, ReplayError> {
    decode(&fs::read(path)?)
}

pub fn write_file(path: &Path, messages: &[Message]) -> Result<(), ReplayError> {
    fs::write(path, encode(messages)?)?;
    Ok(())
}

/// Split a raw client-side capture into messages, one per line, keeping each
/// line's terminator.
pub fn split_lines(raw: &[u8], terminator: &[u8]) -> Vec<Message> {
    let mut out = Vec::new();
    let mut rest = raw;
    while !rest.is_empty() {
        let end = if terminator.is_empty() {
            None
        } else {
            rest.windows(terminator.len()).position(|w| w == terminator)
        };
        let cut = end.map_or(rest.len(), |p| p + terminator.len());
        out.push(Message::new(rest[..cut].to_vec()));
        rest = &rest[cut..];
    }
    out
}
