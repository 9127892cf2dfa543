//! Sending a sequence to a target and turning replies into states.
//!
//! Concrete targets implement [`Target`]; the in-process toy server lives in
//! [`crate::toy`] and socket clients in the std companion crate.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::coverage::CoverageMap;
use crate::model::{Message, ProtocolKind, StateId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("connect failed: {0}")]
    Connect(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// What came back after writing one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Response { bytes: Vec<u8>, peer_closed: bool },
    /// No complete response before the deadline.
    Timeout,
    /// Connection reset or target fault right after the write.
    Reset,
}

/// A stateful server reachable over some connection.
pub trait Target {
    /// Called once before the first connect of every execution.
    fn begin_execution(&mut self) {}
    /// Open a fresh connection and return the greeting (may be empty).
    fn connect(&mut self, coverage: &mut CoverageMap) -> Result<Vec<u8>, TransportError>;
    fn exchange(&mut self, request: &[u8], coverage: &mut CoverageMap)
        -> Result<Reply, TransportError>;
    fn disconnect(&mut self);
}

impl<T: Target + ?Sized> Target for &mut T {
    fn begin_execution(&mut self) {
        (**self).begin_execution()
    }
    fn connect(&mut self, coverage: &mut CoverageMap) -> Result<Vec<u8>, TransportError> {
        (**self).connect(coverage)
    }
    fn exchange(
        &mut self,
        request: &[u8],
        coverage: &mut CoverageMap,
    ) -> Result<Reply, TransportError> {
        (**self).exchange(request, coverage)
    }
    fn disconnect(&mut self) {
        (**self).disconnect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointKind {
    ExternalSocket,
    BuiltinToy,
}

/// Where and how to reach the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetEndpoint {
    pub kind: EndpointKind,
    /// `host:port` for external targets.
    pub address: Option<String>,
    pub response_timeout_ms: u32,
    pub reconnect_on_end: bool,
}

impl TargetEndpoint {
    pub fn builtin() -> Self {
        Self {
            kind: EndpointKind::BuiltinToy,
            address: None,
            response_timeout_ms: 1,
            reconnect_on_end: true,
        }
    }

    pub fn socket(address: impl Into<String>, response_timeout_ms: u32) -> Self {
        Self {
            kind: EndpointKind::ExternalSocket,
            address: Some(address.into()),
            response_timeout_ms: response_timeout_ms.max(1),
            reconnect_on_end: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verdict {
    Ok,
    Crash,
    Hang,
}

/// Result of one execution. Coverage goes to the caller's map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionOutcome {
    pub responses: Vec<Vec<u8>>,
    /// `states[0]` is the greeting; `states[i + 1]` answers message `i`.
    pub states: Vec<StateId>,
    /// For each entry of `states`, whether the peer closed right after it.
    pub closed_after: Vec<bool>,
    pub verdict: Verdict,
    pub messages_sent: usize,
    pub reconnects: usize,
}

/// Response-to-state mapping for one campaign.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StateExtractor {
    pub kind: ProtocolKind,
    pub end_codes: BTreeSet<u16>,
}

impl StateExtractor {
    pub fn new(kind: ProtocolKind, end_codes: impl IntoIterator<Item = u16>) -> Self {
        Self { kind, end_codes: end_codes.into_iter().collect() }
    }

    /// Raw status code of a response, if any.
    pub fn status_code(&self, response: &[u8]) -> Option<u16> {
        match self.kind {
            ProtocolKind::LineCode => last_complete_line(response).and_then(leading_code),
            ProtocolKind::StatusLine => {
                let line = response.split(|&b| b == b'\n').next()?;
                let mut words = line.split(|&b| b == b' ').filter(|w| !w.is_empty());
                let proto = words.next()?;
                if !proto.contains(&b'/') {
                    return None;
                }
                leading_code(words.next()?)
            }
        }
    }

    pub fn extract(&self, response: &[u8]) -> StateId {
        match self.status_code(response) {
            Some(c) if self.end_codes.contains(&c) => StateId::End,
            Some(c) => StateId::Code(c),
            None => StateId::Unknown,
        }
    }
}

/// Free function form of [`StateExtractor::extract`].
pub fn extract_state(response: &[u8], extractor: &StateExtractor) -> StateId {
    extractor.extract(response)
}

fn leading_code(s: &[u8]) -> Option<u16> {
    if s.len() < 3 || !s[..3].iter().all(u8::is_ascii_digit) {
        return None;
    }
    if s.get(3).is_some_and(u8::is_ascii_digit) {
        return None;
    }
    Some(s[..3].iter().fold(0u16, |a, &d| a * 10 + u16::from(d - b'0')))
}

// Multi-line replies: the final complete line decides the state.
fn last_complete_line(resp: &[u8]) -> Option<&[u8]> {
    let body = resp.strip_suffix(b"\n").unwrap_or(resp);
    if body.is_empty() {
        return None;
    }
    let line = match body.iter().rposition(|&b| b == b'\n') {
        Some(p) if resp.ends_with(b"\n") => &body[p + 1..],
        // trailing partial line: fall back to the last terminated one
        Some(p) => {
            let head = &body[..p];
            match head.iter().rposition(|&b| b == b'\n') {
                Some(q) => &head[q + 1..],
                None => head,
            }
        }
        None => body,
    };
    Some(line.strip_suffix(b"\r").unwrap_or(line))
}

/// Send `messages` in order, reconnecting after every end state.
///
/// Stops early on crash or hang. A connect failure before anything was sent
/// is returned as an error so the caller can retry; later ones count as a
/// hang.
pub fn execute_sequence<T: Target + ?Sized>(
    target: &mut T,
    messages: &[Message],
    extractor: &StateExtractor,
    coverage: &mut CoverageMap,
) -> Result<ExecutionOutcome, TransportError> {
    coverage.clear();
    target.begin_execution();
    let greeting = target.connect(coverage)?;
    let mut out = ExecutionOutcome {
        states: alloc::vec![if greeting.is_empty() {
            StateId::Unknown
        } else {
            extractor.extract(&greeting)
        }],
        responses: alloc::vec![greeting],
        closed_after: alloc::vec![false],
        verdict: Verdict::Ok,
        messages_sent: 0,
        reconnects: 0,
    };
    let mut need_reconnect = false;
    for msg in messages {
        if need_reconnect {
            target.disconnect();
            if target.connect(coverage).is_err() {
                out.verdict = Verdict::Hang;
                break;
            }
            out.reconnects += 1;
        }
        out.messages_sent += 1;
        match target.exchange(&msg.payload, coverage) {
            Ok(Reply::Response { bytes, peer_closed }) => {
                let state = extractor.extract(&bytes);
                out.states.push(state);
                out.responses.push(bytes);
                out.closed_after.push(peer_closed);
                need_reconnect = state.is_end() || peer_closed;
            }
            Ok(Reply::Timeout) => {
                out.verdict = Verdict::Hang;
                break;
            }
            Ok(Reply::Reset) => {
                out.verdict = Verdict::Crash;
                break;
            }
            Err(_) => {
                out.verdict = Verdict::Hang;
                break;
            }
        }
    }
    target.disconnect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ftp() -> StateExtractor {
        StateExtractor::new(ProtocolKind::LineCode, [221, 530])
    }

    #[test]
    fn parse_codes() {
        let x = ftp();
        assert_eq!(x.extract(b"230 Login successful\r\n"), StateId::Code(230));
        assert_eq!(x.extract(b"530 Login incorrect\r\n"), StateId::End);
        assert_eq!(x.extract(b""), StateId::Unknown);
        assert_eq!(x.extract(b"hello\r\n"), StateId::Unknown);
        assert_eq!(x.extract(b"2300 nope\r\n"), StateId::Unknown);
        assert_eq!(x.extract(b"211-Features:\r\n MDTM\r\n211 End\r\n"), StateId::Code(211));
        assert_eq!(x.extract(b"150 ok\r\n226 done"), StateId::Code(150));
    }

    #[test]
    fn parse_status_line() {
        let x = StateExtractor::new(ProtocolKind::StatusLine, [454]);
        assert_eq!(x.extract(b"RTSP/1.0 200 OK\r\nCSeq: 1\r\n\r\n"), StateId::Code(200));
        assert_eq!(x.extract(b"RTSP/1.0 454 Session Not Found\r\n"), StateId::End);
        assert_eq!(x.extract(b"200 OK\r\n"), StateId::Unknown);
    }

    /// Records what was written on which connection.
    struct Recorder {
        conn: usize,
        log: Vec<(usize, Vec<u8>)>,
        replies: Vec<Reply>,
    }

    impl Target for Recorder {
        fn connect(&mut self, _: &mut CoverageMap) -> Result<Vec<u8>, TransportError> {
            self.conn += 1;
            Ok(b"220 hi\r\n".to_vec())
        }
        fn exchange(&mut self, req: &[u8], _: &mut CoverageMap) -> Result<Reply, TransportError> {
            self.log.push((self.conn, req.to_vec()));
            Ok(self.replies.remove(0))
        }
        fn disconnect(&mut self) {}
    }

    fn resp(s: &str) -> Reply {
        Reply::Response { bytes: s.as_bytes().to_vec(), peer_closed: false }
    }

    #[test]
    fn reconnects_after_end_state() {
        let mut t = Recorder {
            conn: 0,
            log: vec![],
            replies: vec![resp("331 ok\r\n"), resp("530 no\r\n"), resp("221 bye\r\n")],
        };
        let msgs = vec![Message::new(*b"USER"), Message::new(*b"PASS"), Message::new(*b"QUIT")];
        let mut cov = CoverageMap::new();
        let out = execute_sequence(&mut t, &msgs, &ftp(), &mut cov).unwrap();
        assert_eq!(out.states, vec![StateId::Code(220), StateId::Code(331), StateId::End, StateId::End]);
        assert_eq!(t.log.iter().map(|(c, _)| *c).collect::<Vec<_>>(), vec![1, 1, 2]);
        assert_eq!(out.reconnects, 1);
        assert_eq!(out.verdict, Verdict::Ok);
    }

    #[test]
    fn reset_is_crash_timeout_is_hang() {
        let msgs = vec![Message::new(*b"A"), Message::new(*b"B")];
        let mut cov = CoverageMap::new();
        let mut t = Recorder { conn: 0, log: vec![], replies: vec![Reply::Reset] };
        assert_eq!(execute_sequence(&mut t, &msgs, &ftp(), &mut cov).unwrap().verdict, Verdict::Crash);
        let mut t = Recorder { conn: 0, log: vec![], replies: vec![Reply::Timeout] };
        let out = execute_sequence(&mut t, &msgs, &ftp(), &mut cov).unwrap();
        assert_eq!(out.verdict, Verdict::Hang);
        assert_eq!(out.messages_sent, 1);
    }
}
