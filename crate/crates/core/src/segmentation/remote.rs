//! Detection wire schema and the remote-service client.
//!
//! Request (`RGSQ`), after the 8-byte preamble:
//!
//! ```text
//! u32 config JSON length (N), u32 JPEG length (J)
//! N   {"target_classes": [..], "min_score": f}
//! J   baseline JPEG of the color frame
//! ```
//!
//! Reply (`RGDT`), after the 8-byte preamble, all little-endian:
//!
//! ```text
//! u32 width, u32 height, u32 detection count
//! per detection:
//!   u16 label length (L), L bytes UTF-8 label
//!   f64 score
//!   u32 run count (R), R x u32 run lengths
//! ```
//!
//! Runs alternate false/true starting with false (a mask that starts with a
//! true pixel has a leading zero run) and must sum to `width * height`.
//! A failing service answers with `RGER` instead.

use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Detection, ProviderConfig, SegmentationProvider};
use crate::error::{Error, Result};
use crate::imaging::{encode_color_with, ColorFrame, JpegOptions, SegMask};
use crate::transport::{
    check_error_reply, connect_within, exchange, parse_endpoint, put_preamble, Reader, MAGIC_DETECTIONS,
    MAGIC_SEG_REQUEST,
};

pub const DEFAULT_REMOTE_TIMEOUT: Duration = Duration::from_millis(500);

pub fn rle_encode(bits: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    if len > 0 || runs.is_empty() {
        runs.push(len);
    }
    runs
}

pub fn rle_decode(runs: &[u32], expected_len: usize) -> Result<Vec<bool>> {
    let total: u64 = runs.iter().map(|&r| u64::from(r)).sum();
    if total != expected_len as u64 {
        return Err(Error::protocol(format!(
            "mask runs cover {total} pixels, image has {expected_len}"
        )));
    }
    let mut bits = Vec::with_capacity(expected_len);
    for (i, &r) in runs.iter().enumerate() {
        bits.resize(bits.len() + r as usize, i % 2 == 1);
    }
    Ok(bits)
}

/// Encodes an `RGDT` reply.
pub fn encode_detections(width: u32, height: u32, detections: &[Detection]) -> Vec<u8> {
    let mut out = Vec::new();
    put_preamble(&mut out, MAGIC_DETECTIONS);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&(detections.len() as u32).to_le_bytes());
    for d in detections {
        let label = d.class_label.as_bytes();
        out.extend_from_slice(&(label.len() as u16).to_le_bytes());
        out.extend_from_slice(label);
        out.extend_from_slice(&d.score.to_le_bytes());
        let runs = rle_encode(d.mask.bits());
        out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
        for r in runs {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }
    out
}

/// Parses a service reply into full-resolution detections.
pub fn decode_remote_response(bytes: &[u8]) -> Result<Vec<Detection>> {
    check_error_reply(bytes)?;
    let mut r = Reader::new(bytes);
    r.preamble(MAGIC_DETECTIONS)?;
    let (w, h, count) = (r.u32()?, r.u32()?, r.u32()?);
    let n = w as usize * h as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let label = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::protocol("detection label is not UTF-8"))?
            .to_string();
        let score = r.f64()?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::protocol(format!("detection score {score} outside [0,1]")));
        }
        let run_count = r.u32()? as usize;
        if run_count * 4 > r.remaining() {
            return Err(Error::protocol("run list truncated"));
        }
        let runs: Vec<u32> = (0..run_count).map(|_| r.u32()).collect::<Result<_>>()?;
        let bits = rle_decode(&runs, n)?;
        out.push(Detection::new(SegMask::new(w, h, bits, label, score)?));
    }
    if r.remaining() != 0 {
        return Err(Error::protocol(format!("{} trailing bytes after detections", r.remaining())));
    }
    Ok(out)
}

/// Decoded `RGSQ` request, for service implementations and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegRequest {
    pub target_classes: Vec<String>,
    pub min_score: f64,
    #[serde(skip)]
    pub jpeg: Vec<u8>,
}

pub fn encode_seg_request(req: &SegRequest) -> Vec<u8> {
    let cfg = serde_json::to_vec(req).expect("request config serializes");
    let mut out = Vec::with_capacity(16 + cfg.len() + req.jpeg.len());
    put_preamble(&mut out, MAGIC_SEG_REQUEST);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&(req.jpeg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&req.jpeg);
    out
}

pub fn decode_seg_request(bytes: &[u8]) -> Result<SegRequest> {
    let mut r = Reader::new(bytes);
    r.preamble(MAGIC_SEG_REQUEST)?;
    let (nc, nj) = (r.u32()? as usize, r.u32()? as usize);
    let mut req: SegRequest = serde_json::from_slice(r.take(nc)?)?;
    req.jpeg = r.take(nj)?.to_vec();
    if r.remaining() != 0 {
        return Err(Error::protocol("trailing bytes after segmentation request"));
    }
    Ok(req)
}

/// Client of a segmentation service. Holds one connection; any failure
/// drops it so the next call reconnects.
#[derive(Debug)]
pub struct RemoteProvider {
    addr: SocketAddr,
    timeout: Duration,
    jpeg: JpegOptions,
    stream: Option<TcpStream>,
    requests: u64,
}

impl RemoteProvider {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self> {
        Ok(Self {
            addr: parse_endpoint(endpoint)?,
            timeout,
            jpeg: JpegOptions::default(),
            stream: None,
            requests: 0,
        })
    }

    /// Requests sent so far.
    pub fn requests(&self) -> u64 {
        self.requests
    }

    fn call(&mut self, msg: &[u8]) -> Result<Vec<u8>> {
        let mut stream = match self.stream.take() {
            Some(s) => s,
            None => connect_within(self.addr, self.timeout)?,
        };
        self.requests += 1;
        let reply = exchange(&mut stream, msg, self.timeout)?;
        self.stream = Some(stream);
        Ok(reply)
    }
}

impl SegmentationProvider for RemoteProvider {
    fn detect(&mut self, frame: &ColorFrame, cfg: &ProviderConfig) -> Result<Vec<Detection>> {
        if frame.width() == 0 || frame.height() == 0 {
            return Err(Error::contract("empty frame"));
        }
        let req = SegRequest {
            target_classes: cfg.target_classes.clone(),
            min_score: cfg.min_score,
            jpeg: encode_color_with(frame, &self.jpeg)?,
        };
        let reply = self.call(&encode_seg_request(&req)).inspect_err(|_| self.stream = None)?;
        let detections = decode_remote_response(&reply)?;
        if let Some(d) = detections.first() {
            if (d.mask.width(), d.mask.height()) != (frame.width(), frame.height()) {
                return Err(Error::protocol("detection masks do not match the frame size"));
            }
        }
        Ok(cfg.filter(detections))
    }
}
