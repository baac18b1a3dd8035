//! Frame-pair transport: wire format, request-reply publisher and client,
//! transit-time measurement.
//!
//! # Framing
//!
//! Every message on a connection is a little-endian `u32` byte length
//! followed by that many bytes. The first four bytes of a message are its
//! magic, then a `u16` version (currently 1) and a `u16` of flags (0).
//!
//! | magic  | direction         | body after magic/version/flags            |
//! |--------|-------------------|-------------------------------------------|
//! | `RGFQ` | consumer → source | none (frame request)                      |
//! | `RGFP` | source → consumer | frame pair, see [`WireFramePair`]         |
//! | `RGSQ` | pipeline → segmenter | segmentation request                   |
//! | `RGDT` | segmenter → pipeline | detections                             |
//! | `RGTQ` | downstream → pipeline | target request                        |
//! | `RGTE` | pipeline → downstream | target estimate, `u32` length + JSON  |
//! | `RGER` | any reply         | `u32` length + UTF-8 error text           |
//!
//! # Frame pair (`RGFP`)
//!
//! ```text
//! offset size field
//!      0    4 magic "RGFP"
//!      4    2 version
//!      6    2 flags
//!      8    8 sequence
//!     16    8 capture timestamp, ns
//!     24    8 sent timestamp, ns (publisher clock, stamped at send)
//!     32    4 intrinsics JSON length  (I)
//!     36    4 color JPEG length       (C)
//!     40    4 depth PNG length        (D)
//!     44    I intrinsics JSON, UTF-8
//!   44+I    C color JPEG
//! 44+I+C    D depth PNG
//! ```
//!
//! A golden encoding lives in `tests/fixtures/wire_frame_pair.bin`.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use crate::error::{CodecStage, Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::Intrinsics;
use crate::imaging::{decode_color, decode_depth, encode_color_with, encode_depth, FramePair, JpegOptions};

mod client;
mod publisher;
mod transit;

pub use client::{request_frame, FrameClient};
pub use publisher::{publish_loop, Fault, FaultInjector, FrameSource, Publisher, PublisherConfig};
pub use transit::{
    measure_transit, read_transit_csv, summarize, write_transit_csv, TransitRecord, TransitReport, TransitSummary,
    DEFAULT_MAX_CONSECUTIVE_FAILURES,
};

pub const WIRE_VERSION: u16 = 1;
pub const MAGIC_FRAME_PAIR: [u8; 4] = *b"RGFP";
pub const MAGIC_FRAME_REQUEST: [u8; 4] = *b"RGFQ";
pub const MAGIC_SEG_REQUEST: [u8; 4] = *b"RGSQ";
pub const MAGIC_DETECTIONS: [u8; 4] = *b"RGDT";
pub const MAGIC_TARGET_REQUEST: [u8; 4] = *b"RGTQ";
pub const MAGIC_TARGET: [u8; 4] = *b"RGTE";
pub const MAGIC_ERROR: [u8; 4] = *b"RGER";

pub const FRAME_HEADER_LEN: usize = 44;
/// Upper bound on one message; a 640x480 pair is well under 2 MiB.
pub const MAX_MESSAGE_LEN: usize = 64 << 20;

/// One frame pair as carried on the wire: compressed payloads plus header fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFramePair {
    pub sequence: u64,
    pub capture_timestamp: u64,
    pub sent_timestamp: u64,
    pub intrinsics_json: String,
    pub color_jpeg: Vec<u8>,
    pub depth_png: Vec<u8>,
}

impl WireFramePair {
    /// Compresses a pair. The two halves are encoded concurrently under
    /// [`Execution::Parallel`].
    pub fn from_pair(pair: &FramePair, jpeg: &JpegOptions, png_level: u8, exec: Execution) -> Result<Self> {
        let (color, depth) = exec::join(
            exec,
            || encode_color_with(&pair.color, jpeg),
            || encode_depth(&pair.depth, png_level),
        );
        Ok(Self {
            sequence: pair.sequence,
            capture_timestamp: pair.color.timestamp,
            sent_timestamp: 0,
            intrinsics_json: pair.intrinsics.to_json(),
            color_jpeg: color?,
            depth_png: depth?,
        })
    }

    /// Decompresses both halves; frame timestamps are set to the capture time.
    pub fn to_pair(&self) -> Result<FramePair> {
        let intrinsics = Intrinsics::from_json(&self.intrinsics_json)?;
        let mut color = decode_color(&self.color_jpeg)?;
        let mut depth = decode_depth(&self.depth_png)?;
        color.timestamp = self.capture_timestamp;
        depth.timestamp = self.capture_timestamp;
        FramePair::new(color, depth, intrinsics, self.sequence)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(FRAME_HEADER_LEN + self.intrinsics_json.len() + self.color_jpeg.len() + self.depth_png.len());
        put_preamble(&mut out, MAGIC_FRAME_PAIR);
        out.extend_from_slice(&self.sequence.to_le_bytes());
        out.extend_from_slice(&self.capture_timestamp.to_le_bytes());
        out.extend_from_slice(&self.sent_timestamp.to_le_bytes());
        for len in [self.intrinsics_json.len(), self.color_jpeg.len(), self.depth_png.len()] {
            out.extend_from_slice(&(len as u32).to_le_bytes());
        }
        out.extend_from_slice(self.intrinsics_json.as_bytes());
        out.extend_from_slice(&self.color_jpeg);
        out.extend_from_slice(&self.depth_png);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.preamble(MAGIC_FRAME_PAIR)?;
        let sequence = r.u64()?;
        let capture_timestamp = r.u64()?;
        let sent_timestamp = r.u64()?;
        let (il, cl, dl) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if il + cl + dl != r.remaining() {
            return Err(Error::protocol(format!(
                "frame pair declares {} payload bytes, message has {}",
                il + cl + dl,
                r.remaining()
            )));
        }
        if cl == 0 || dl == 0 {
            return Err(Error::codec(
                if cl == 0 { CodecStage::DecodeColor } else { CodecStage::DecodeDepth },
                "empty payload",
            ));
        }
        let intrinsics_json = String::from_utf8(r.take(il)?.to_vec())
            .map_err(|_| Error::protocol("intrinsics JSON is not UTF-8"))?;
        let color_jpeg = r.take(cl)?.to_vec();
        let depth_png = r.take(dl)?.to_vec();
        Ok(Self {
            sequence,
            capture_timestamp,
            sent_timestamp,
            intrinsics_json,
            color_jpeg,
            depth_png,
        })
    }
}

pub fn put_preamble(out: &mut Vec<u8>, magic: [u8; 4]) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
}

/// Bare request message (magic, version, flags).
pub fn request_message(magic: [u8; 4]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8);
    put_preamble(&mut out, magic);
    out
}

pub fn error_message(text: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + text.len());
    put_preamble(&mut out, MAGIC_ERROR);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

/// Magic of a message, if it has a complete preamble.
pub fn magic_of(msg: &[u8]) -> Option<[u8; 4]> {
    msg.get(..4).map(|m| [m[0], m[1], m[2], m[3]])
}

/// Turns an `RGER` message into [`Error::Remote`]; other messages pass through.
pub fn check_error_reply(msg: &[u8]) -> Result<()> {
    if magic_of(msg) != Some(MAGIC_ERROR) {
        return Ok(());
    }
    let mut r = Reader::new(msg);
    r.preamble(MAGIC_ERROR)?;
    let n = r.u32()? as usize;
    let text = String::from_utf8_lossy(r.take(n)?).into_owned();
    Err(Error::Remote(text))
}

/// Bounds-checked little-endian cursor.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::protocol(format!(
                "message truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn preamble(&mut self, magic: [u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::protocol(format!(
                "expected magic {:?}, got {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(got)
            )));
        }
        let version = self.u16()?;
        if version != WIRE_VERSION {
            return Err(Error::protocol(format!("unsupported wire version {version}")));
        }
        let _flags = self.u16()?;
        Ok(())
    }
}

pub fn write_message(w: &mut impl Write, msg: &[u8]) -> io::Result<()> {
    let len = u32::try_from(msg.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "message too long"))?;
    let mut buf = Vec::with_capacity(4 + msg.len());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(msg);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one length-prefixed message. A clean end of stream before the
/// length prefix is reported as `UnexpectedEof`.
pub fn read_message(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_MESSAGE_LEN {
        return Err(Error::protocol(format!("message length {len} exceeds limit")));
    }
    let mut msg = vec![0u8; len];
    r.read_exact(&mut msg)?;
    Ok(msg)
}

/// Server-side read on a socket with a short read timeout: waits for the next
/// message while `stop` is clear. Returns `None` on stop or orderly close.
pub fn read_message_until(stream: &mut TcpStream, stop: &AtomicBool) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        if stop.load(Ordering::Relaxed) {
            return Ok(None);
        }
        match stream.read(&mut len[got..]) {
            Ok(0) => return Ok(None),
            Ok(n) => got += n,
            Err(e) if is_timeout(&e) || e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) if got == 0 && is_disconnect(&e) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_MESSAGE_LEN {
        return Err(Error::protocol(format!("message length {len} exceeds limit")));
    }
    let mut msg = vec![0u8; len];
    let mut got = 0;
    while got < len {
        if stop.load(Ordering::Relaxed) {
            return Ok(None);
        }
        match stream.read(&mut msg[got..]) {
            Ok(0) => return Err(Error::Transport(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if is_timeout(&e) || e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(msg))
}

pub(crate) fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted | io::ErrorKind::BrokenPipe
    )
}

/// Accepts `tcp://host:port` or a bare `host:port`.
pub fn parse_endpoint(endpoint: &str) -> Result<SocketAddr> {
    let rest = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
    if rest.contains("://") {
        return Err(Error::Config(format!("unsupported endpoint scheme in {endpoint:?}")));
    }
    rest.to_socket_addrs()
        .map_err(|e| Error::Config(format!("bad endpoint {endpoint:?}: {e}")))?
        .next()
        .ok_or_else(|| Error::Config(format!("endpoint {endpoint:?} resolves to nothing")))
}

pub fn endpoint_for(addr: SocketAddr) -> String {
    format!("tcp://{addr}")
}

/// Connects, retrying refused connections until `timeout` runs out.
pub fn connect_within(addr: SocketAddr, timeout: Duration) -> Result<TcpStream> {
    let deadline = std::time::Instant::now() + timeout;
    loop {
        let left = deadline.saturating_duration_since(std::time::Instant::now());
        if left.is_zero() {
            return Err(Error::Timeout(timeout));
        }
        match TcpStream::connect_timeout(&addr, left) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if is_timeout(&e) => return Err(Error::Timeout(timeout)),
            Err(_) => std::thread::sleep(left.min(Duration::from_millis(20))),
        }
    }
}

/// One request-reply exchange on `stream` bounded by `timeout`.
pub fn exchange(stream: &mut TcpStream, request: &[u8], timeout: Duration) -> Result<Vec<u8>> {
    stream.set_write_timeout(Some(timeout))?;
    stream.set_read_timeout(Some(timeout))?;
    let map = |e: Error| match e {
        Error::Transport(io) if is_timeout(&io) => Error::Timeout(timeout),
        other => other,
    };
    write_message(stream, request).map_err(|e| map(e.into()))?;
    read_message(stream).map_err(map)
}

#[cfg(test)]
mod tests;
