//! Key-value cache access: a minimal RESP2 client over TCP and an in-memory
//! backend with the same contract for tests and single-process runs.
//!
//! Only the commands the pipeline needs are implemented: `SET key value
//! [EX seconds]`, `GET key`, `DEL key`. Values are opaque byte strings.
//! Every call either completes or fails within the configured timeout.

use std::collections::HashMap;
use std::io::{BufReader, Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("operation timed out")]
    Timeout,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub trait KvStore: Send {
    fn set(&mut self, key: &str, value: &[u8], ttl_seconds: Option<u64>) -> Result<(), KvError>;
    fn get(&mut self, key: &str) -> Result<Option<Vec<u8>>, KvError>;
    fn del(&mut self, key: &str) -> Result<bool, KvError>;
}

// ---------------------------------------------------------------------------
// RESP2 wire client

pub struct RespClient {
    reader: BufReader<TcpStream>,
}

impl RespClient {
    pub fn connect(addr: &str, timeout: Duration) -> Result<RespClient, KvError> {
        let sock_addr = addr
            .parse()
            .map_err(|e| KvError::Protocol(format!("bad address {addr}: {e}")))?;
        let stream = TcpStream::connect_timeout(&sock_addr, timeout).map_err(|e| {
            if e.kind() == std::io::ErrorKind::ConnectionRefused {
                KvError::ConnectionRefused(addr.to_string())
            } else if e.kind() == std::io::ErrorKind::TimedOut {
                KvError::Timeout
            } else {
                KvError::Io(e)
            }
        })?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(RespClient {
            reader: BufReader::new(stream),
        })
    }

    fn send(&mut self, parts: &[&[u8]]) -> Result<(), KvError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(format!("*{}\r\n", parts.len()).as_bytes());
        for part in parts {
            buf.extend_from_slice(format!("${}\r\n", part.len()).as_bytes());
            buf.extend_from_slice(part);
            buf.extend_from_slice(b"\r\n");
        }
        self.reader
            .get_mut()
            .write_all(&buf)
            .map_err(map_timeout)?;
        Ok(())
    }

    fn read_byte(&mut self) -> Result<u8, KvError> {
        let mut b = [0u8; 1];
        self.reader.read_exact(&mut b).map_err(map_timeout)?;
        Ok(b[0])
    }

    fn read_line(&mut self) -> Result<String, KvError> {
        let mut line = Vec::new();
        loop {
            let b = self.read_byte()?;
            if b == b'\r' {
                let nl = self.read_byte()?;
                if nl != b'\n' {
                    return Err(KvError::Protocol("CR without LF".to_string()));
                }
                break;
            }
            line.push(b);
            if line.len() > 1 << 20 {
                return Err(KvError::Protocol("unterminated reply line".to_string()));
            }
        }
        String::from_utf8(line).map_err(|e| KvError::Protocol(e.to_string()))
    }

    fn read_reply(&mut self) -> Result<Reply, KvError> {
        match self.read_byte()? {
            b'+' => Ok(Reply::Simple(self.read_line()?)),
            b'-' => Ok(Reply::Error(self.read_line()?)),
            b':' => {
                let line = self.read_line()?;
                line.parse()
                    .map(Reply::Integer)
                    .map_err(|_| KvError::Protocol(format!("bad integer `{line}`")))
            }
            b'$' => {
                let line = self.read_line()?;
                let len: i64 = line
                    .parse()
                    .map_err(|_| KvError::Protocol(format!("bad bulk length `{line}`")))?;
                if len < 0 {
                    return Ok(Reply::Null);
                }
                let mut data = vec![0u8; len as usize];
                self.reader.read_exact(&mut data).map_err(map_timeout)?;
                let mut crlf = [0u8; 2];
                self.reader.read_exact(&mut crlf).map_err(map_timeout)?;
                if &crlf != b"\r\n" {
                    return Err(KvError::Protocol("bulk not CRLF-terminated".to_string()));
                }
                Ok(Reply::Bulk(data))
            }
            other => Err(KvError::Protocol(format!(
                "unexpected reply type byte {:?}",
                other as char
            ))),
        }
    }

    fn command(&mut self, parts: &[&[u8]]) -> Result<Reply, KvError> {
        self.send(parts)?;
        match self.read_reply()? {
            Reply::Error(msg) => Err(KvError::Protocol(msg)),
            reply => Ok(reply),
        }
    }
}

fn map_timeout(e: std::io::Error) -> KvError {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => KvError::Timeout,
        std::io::ErrorKind::ConnectionRefused => KvError::ConnectionRefused(e.to_string()),
        _ => KvError::Io(e),
    }
}

enum Reply {
    Simple(String),
    Error(String),
    Integer(i64),
    Bulk(Vec<u8>),
    Null,
}

impl KvStore for RespClient {
    fn set(&mut self, key: &str, value: &[u8], ttl_seconds: Option<u64>) -> Result<(), KvError> {
        let ttl_string;
        let mut parts: Vec<&[u8]> = vec![b"SET", key.as_bytes(), value];
        if let Some(ttl) = ttl_seconds {
            ttl_string = ttl.to_string();
            parts.push(b"EX");
            parts.push(ttl_string.as_bytes());
        }
        match self.command(&parts)? {
            Reply::Simple(s) if s == "OK" => Ok(()),
            _ => Err(KvError::Protocol("unexpected SET reply".to_string())),
        }
    }

    fn get(&mut self, key: &str) -> Result<Option<Vec<u8>>, KvError> {
        match self.command(&[b"GET", key.as_bytes()])? {
            Reply::Bulk(data) => Ok(Some(data)),
            Reply::Null => Ok(None),
            _ => Err(KvError::Protocol("unexpected GET reply".to_string())),
        }
    }

    fn del(&mut self, key: &str) -> Result<bool, KvError> {
        match self.command(&[b"DEL", key.as_bytes()])? {
            Reply::Integer(n) => Ok(n > 0),
            _ => Err(KvError::Protocol("unexpected DEL reply".to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// In-memory backend

/// HashMap-backed store honoring TTLs lazily at read time. Tests can advance
/// the clock without sleeping.
#[derive(Default)]
pub struct MemoryKv {
    entries: HashMap<String, (Vec<u8>, Option<Instant>)>,
    /// Virtual time offset added to `Instant::now()`.
    advance: Duration,
}

impl MemoryKv {
    pub fn new() -> MemoryKv {
        MemoryKv::default()
    }

    fn now(&self) -> Instant {
        Instant::now() + self.advance
    }

    /// Moves the store's notion of time forward.
    pub fn advance(&mut self, by: Duration) {
        self.advance += by;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl KvStore for MemoryKv {
    fn set(&mut self, key: &str, value: &[u8], ttl_seconds: Option<u64>) -> Result<(), KvError> {
        let expiry = ttl_seconds.map(|s| self.now() + Duration::from_secs(s));
        self.entries.insert(key.to_string(), (value.to_vec(), expiry));
        Ok(())
    }

    fn get(&mut self, key: &str) -> Result<Option<Vec<u8>>, KvError> {
        let now = self.now();
        if let Some((_, Some(expiry))) = self.entries.get(key) {
            if *expiry <= now {
                self.entries.remove(key);
                return Ok(None);
            }
        }
        Ok(self.entries.get(key).map(|(v, _)| v.clone()))
    }

    fn del(&mut self, key: &str) -> Result<bool, KvError> {
        Ok(self.entries.remove(key).is_some())
    }
}

/// Clonable handle over one in-memory store, so a feeder and the pipeline
/// can share the cache within a single process.
#[derive(Clone, Default)]
pub struct SharedMemoryKv {
    inner: std::sync::Arc<std::sync::Mutex<MemoryKv>>,
}

impl SharedMemoryKv {
    pub fn new() -> SharedMemoryKv {
        SharedMemoryKv::default()
    }

    pub fn advance(&self, by: Duration) {
        self.inner.lock().expect("kv lock").advance(by);
    }
}

impl KvStore for SharedMemoryKv {
    fn set(&mut self, key: &str, value: &[u8], ttl_seconds: Option<u64>) -> Result<(), KvError> {
        self.inner.lock().expect("kv lock").set(key, value, ttl_seconds)
    }

    fn get(&mut self, key: &str) -> Result<Option<Vec<u8>>, KvError> {
        self.inner.lock().expect("kv lock").get(key)
    }

    fn del(&mut self, key: &str) -> Result<bool, KvError> {
        self.inner.lock().expect("kv lock").del(key)
    }
}
