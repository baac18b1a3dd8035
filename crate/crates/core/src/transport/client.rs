use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use super::{
    check_error_reply, connect_within, exchange, parse_endpoint, request_message, WireFramePair, MAGIC_FRAME_REQUEST,
};
use crate::error::{Error, Result};

/// Consumer side of the frame channel: one outstanding request at a time.
///
/// Any failure (timeout, broken connection, unparsable or stale reply) drops
/// the connection, so the next request starts on a clean channel and can never
/// pick up the late reply of an abandoned one.
#[derive(Debug)]
pub struct FrameClient {
    addr: SocketAddr,
    timeout: Duration,
    stream: Option<TcpStream>,
    last_sequence: Option<u64>,
    resets: u64,
}

impl FrameClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self> {
        if timeout.is_zero() {
            return Err(Error::Config("request timeout must be positive".into()));
        }
        Ok(Self {
            addr: parse_endpoint(endpoint)?,
            timeout,
            stream: None,
            last_sequence: None,
            resets: 0,
        })
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Highest sequence received so far.
    pub fn last_sequence(&self) -> Option<u64> {
        self.last_sequence
    }

    /// Number of times the channel was torn down after an error.
    pub fn resets(&self) -> u64 {
        self.resets
    }

    /// Requests the newest frame pair. The whole exchange, including a
    /// reconnect, is bounded by the configured timeout.
    pub fn request(&mut self) -> Result<WireFramePair> {
        let started = Instant::now();
        let out = self.try_request(started);
        if out.is_err() {
            self.reset();
        }
        out
    }

    fn try_request(&mut self, started: Instant) -> Result<WireFramePair> {
        let mut stream = match self.stream.take() {
            Some(s) => s,
            None => connect_within(self.addr, self.timeout)?,
        };
        let left = self.timeout.saturating_sub(started.elapsed());
        if left.is_zero() {
            return Err(Error::Timeout(self.timeout));
        }
        let reply = exchange(&mut stream, &request_message(MAGIC_FRAME_REQUEST), left).map_err(|e| match e {
            Error::Timeout(_) => Error::Timeout(self.timeout),
            other => other,
        })?;
        check_error_reply(&reply)?;
        let wire = WireFramePair::decode(&reply)?;
        if let Some(last) = self.last_sequence {
            if wire.sequence <= last {
                return Err(Error::Stale {
                    got: wire.sequence,
                    last,
                });
            }
        }
        self.last_sequence = Some(wire.sequence);
        self.stream = Some(stream);
        Ok(wire)
    }

    fn reset(&mut self) {
        if self.stream.take().is_some() || self.resets == 0 {
            log::debug!("resetting frame channel to {}", self.addr);
        }
        self.resets += 1;
    }
}

/// One-shot request on a fresh channel.
pub fn request_frame(endpoint: &str, timeout: Duration) -> Result<WireFramePair> {
    FrameClient::new(endpoint, timeout)?.request()
}
