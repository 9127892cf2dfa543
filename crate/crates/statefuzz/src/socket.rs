//! TCP transport, a file-backed coverage feed, and a TCP front end for the
//! toy server.

use std::fs;
use std::io::{self, BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use statefuzz_core::toy::{ToySut, ToySutConfig};
use statefuzz_core::transport::{Reply, TransportError};
use statefuzz_core::{CoverageMap, Target, BITMAP_SIZE};

/// Environment variable naming the coverage region shared with the target.
pub const COVERAGE_ENV: &str = "STATEFUZZ_COVERAGE_PATH";

/// A `BITMAP_SIZE`-byte file the instrumented target adds hit counts to.
///
/// The fuzzer zeroes it at the start of every execution and reads it back
/// after each exchange.
#[derive(Debug, Clone)]
pub struct CoverageFeed {
    path: PathBuf,
}

impl CoverageFeed {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var_os(COVERAGE_ENV).map(Self::new)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn reset(&self) -> io::Result<()> {
        fs::write(&self.path, vec![0u8; BITMAP_SIZE])
    }

    pub fn load_into(&self, coverage: &mut CoverageMap) -> io::Result<()> {
        let raw = fs::read(&self.path)?;
        coverage.load_dense(&raw);
        Ok(())
    }

    /// Target side: add a run's counts into the shared file.
    pub fn accumulate(&self, run: &CoverageMap) -> io::Result<()> {
        let mut raw = fs::read(&self.path).unwrap_or_default();
        raw.resize(BITMAP_SIZE, 0);
        for i in run.hit_indices() {
            let i = i as usize;
            raw[i] = raw[i].saturating_add(run.get(i));
        }
        fs::write(&self.path, raw)
    }
}

#[derive(Debug)]
pub struct SocketTarget {
    addr: SocketAddr,
    timeout: Duration,
    terminator: Vec<u8>,
    stream: Option<TcpStream>,
    feed: Option<CoverageFeed>,
    close_grace: Duration,
}

impl SocketTarget {
    pub fn new(address: &str, timeout_ms: u32) -> io::Result<Self> {
        let addr = address
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(ErrorKind::InvalidInput, "address resolves to nothing"))?;
        Ok(Self {
            addr,
            timeout: Duration::from_millis(u64::from(timeout_ms.max(1))),
            terminator: b"\r\n".to_vec(),
            stream: None,
            feed: None,
            close_grace: Duration::ZERO,
        })
    }

    pub fn with_terminator(mut self, terminator: impl Into<Vec<u8>>) -> Self {
        self.terminator = terminator.into();
        self
    }

    pub fn with_coverage(mut self, feed: CoverageFeed) -> Self {
        self.feed = Some(feed);
        self
    }

    /// How long to wait after a complete response for the peer to hang up.
    pub fn with_close_grace(mut self, grace: Duration) -> Self {
        self.close_grace = grace;
        self
    }

    /// Whether the peer has closed its side, waiting at most `wait`.
    fn closed_within(&mut self, wait: Duration) -> bool {
        let Some(s) = self.stream.as_ref() else { return true };
        let mut b = [0u8; 1];
        let r = if wait.is_zero() {
            s.set_nonblocking(true).and_then(|_| s.peek(&mut b)).and_then(|n| {
                s.set_nonblocking(false)?;
                Ok(n)
            })
        } else {
            s.set_read_timeout(Some(wait)).and_then(|_| s.peek(&mut b)).and_then(|n| {
                s.set_read_timeout(Some(self.timeout))?;
                Ok(n)
            })
        };
        let closed = match r {
            Ok(0) => true,
            Ok(_) => false,
            Err(e) => {
                let _ = s.set_nonblocking(false);
                let _ = s.set_read_timeout(Some(self.timeout));
                is_reset(&e)
            }
        };
        if closed {
            self.stream = None;
        }
        closed
    }

    fn read_response(&mut self) -> Result<Reply, TransportError> {
        let stream = self.stream.as_mut().ok_or_else(|| TransportError::Io("not connected".into()))?;
        let mut buf = Vec::new();
        let mut chunk = [0u8; 4096];
        loop {
            match stream.read(&mut chunk) {
                // a close with nothing said is how a crashed server looks from here
                Ok(0) if buf.is_empty() => return Ok(Reply::Reset),
                Ok(0) => {
                    self.stream = None;
                    return Ok(Reply::Response { bytes: buf, peer_closed: true });
                }
                Ok(n) => {
                    buf.extend_from_slice(&chunk[..n]);
                    if !self.terminator.is_empty() && buf.ends_with(&self.terminator) {
                        let peer_closed = self.closed_within(self.close_grace);
                        return Ok(Reply::Response { bytes: buf, peer_closed });
                    }
                }
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Ok(if buf.is_empty() {
                        Reply::Timeout
                    } else {
                        Reply::Response { bytes: buf, peer_closed: false }
                    });
                }
                Err(e) if is_reset(&e) => return Ok(Reply::Reset),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(TransportError::Io(e.to_string())),
            }
        }
    }
}

fn is_reset(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe
    )
}

impl Target for SocketTarget {
    fn begin_execution(&mut self) {
        if let Some(f) = &self.feed {
            if let Err(e) = f.reset() {
                log::warn!("cannot reset coverage feed {}: {e}", f.path().display());
            }
        }
    }

    fn connect(&mut self, _coverage: &mut CoverageMap) -> Result<Vec<u8>, TransportError> {
        let s = TcpStream::connect_timeout(&self.addr, self.timeout.max(Duration::from_millis(100)))
            .map_err(|e| TransportError::Connect(format!("{}: {e}", self.addr)))?;
        s.set_read_timeout(Some(self.timeout)).map_err(|e| TransportError::Io(e.to_string()))?;
        s.set_nodelay(true).ok();
        self.stream = Some(s);
        match self.read_response()? {
            Reply::Response { bytes, .. } => Ok(bytes),
            // silent servers: no banner
            Reply::Timeout => Ok(Vec::new()),
            Reply::Reset => Err(TransportError::Connect("closed during greeting".into())),
        }
    }

    fn exchange(&mut self, request: &[u8], coverage: &mut CoverageMap) -> Result<Reply, TransportError> {
        // a late hang-up from the previous reply: nothing can answer this one
        if self.stream.is_none() || self.closed_within(Duration::ZERO) {
            return Ok(Reply::Response { bytes: Vec::new(), peer_closed: true });
        }
        let stream = self.stream.as_mut().ok_or_else(|| TransportError::Io("not connected".into()))?;
        if let Err(e) = stream.write_all(request) {
            return if is_reset(&e) { Ok(Reply::Reset) } else { Err(TransportError::Io(e.to_string())) };
        }
        let reply = self.read_response();
        if let Some(f) = &self.feed {
            if let Err(e) = f.load_into(coverage) {
                log::warn!("cannot read coverage feed {}: {e}", f.path().display());
            }
        }
        reply
    }

    fn disconnect(&mut self) {
        self.stream = None;
    }
}

/// Serve the toy protocol over TCP, one connection at a time, until
/// `max_connections` have been handled (forever if `None`).
pub fn serve_toy(
    listener: TcpListener,
    config: ToySutConfig,
    feed: Option<CoverageFeed>,
    max_connections: Option<usize>,
) -> io::Result<()> {
    let mut sut = ToySut::new(config);
    for (n, conn) in listener.incoming().enumerate() {
        // a client hanging up mid-session is its business, not ours
        if let Err(e) = conn.and_then(|s| serve_one(&mut sut, s, feed.as_ref())) {
            log::debug!("toy connection ended: {e}");
        }
        sut.disconnect();
        if max_connections.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    Ok(())
}

fn serve_one(sut: &mut ToySut, mut stream: TcpStream, feed: Option<&CoverageFeed>) -> io::Result<()> {
    let mut cov = CoverageMap::new();
    stream.set_nodelay(true)?;
    let greeting = sut.connect(&mut cov).map_err(io::Error::other)?;
    stream.write_all(&greeting)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = Vec::new();
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line)? == 0 {
            return Ok(());
        }
        cov.clear();
        let reply = sut.exchange(&line, &mut cov).map_err(io::Error::other)?;
        if let Some(f) = feed {
            f.accumulate(&cov)?;
        }
        match reply {
            Reply::Response { bytes, peer_closed } => {
                stream.write_all(&bytes)?;
                if peer_closed {
                    return Ok(());
                }
            }
            Reply::Reset | Reply::Timeout => return Ok(()),
        }
    }
}
