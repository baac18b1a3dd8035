use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::FrameClient;
use crate::clock;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_CONSECUTIVE_FAILURES: usize = 5;

/// One timed request-reply cycle, measured on the consumer's clock from
/// sending the request to having both halves decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitRecord {
    pub sequence: u64,
    pub latency_ms: f64,
    /// Compressed payload sizes on the wire.
    pub color_bytes: u64,
    pub depth_bytes: u64,
    /// Raw size of the decoded pair (RGB8 + Z16).
    pub decoded_bytes: u64,
}

/// Latency statistics; percentiles are nearest-rank. With no samples every
/// field is NaN and `valid` is false.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitSummary {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitReport {
    pub records: Vec<TransitRecord>,
    pub summary: TransitSummary,
    /// Failed cycles that were retried.
    pub failures: usize,
}

pub fn summarize(latencies_ms: &[f64]) -> TransitSummary {
    if latencies_ms.is_empty() {
        return TransitSummary {
            count: 0,
            mean_ms: f64::NAN,
            p50_ms: f64::NAN,
            p95_ms: f64::NAN,
            p99_ms: f64::NAN,
            max_ms: f64::NAN,
            valid: false,
        };
    }
    let mut sorted = latencies_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = |p: f64| sorted[((p / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1];
    TransitSummary {
        count: n,
        mean_ms: latencies_ms.iter().sum::<f64>() / n as f64,
        p50_ms: rank(50.0),
        p95_ms: rank(95.0),
        p99_ms: rank(99.0),
        max_ms: sorted[n - 1],
        valid: true,
    }
}

/// Runs `n` successful request-reply cycles. Failed cycles are retried;
/// `max_consecutive_failures` failures in a row abort with the last error.
pub fn measure_transit(client: &mut FrameClient, n: usize, max_consecutive_failures: usize) -> Result<TransitReport> {
    let max_fail = max_consecutive_failures.max(1);
    let mut records = Vec::with_capacity(n);
    let mut failures = 0;
    let mut streak = 0;
    while records.len() < n {
        let start = Instant::now();
        let cycle = client.request().and_then(|wire| {
            let pair = wire.to_pair()?;
            Ok((wire, pair))
        });
        let end = Instant::now();
        match cycle {
            Ok((wire, pair)) => {
                streak = 0;
                records.push(TransitRecord {
                    sequence: wire.sequence,
                    latency_ms: clock::ms_between(start, end),
                    color_bytes: wire.color_jpeg.len() as u64,
                    depth_bytes: wire.depth_png.len() as u64,
                    decoded_bytes: (pair.color.pixels().len() + pair.depth.values().len() * 2) as u64,
                });
            }
            Err(e) => {
                failures += 1;
                streak += 1;
                log::warn!("transit cycle failed ({streak} in a row): {e}");
                if streak >= max_fail {
                    return Err(e);
                }
            }
        }
    }
    let lat: Vec<f64> = records.iter().map(|r| r.latency_ms).collect();
    Ok(TransitReport {
        summary: summarize(&lat),
        records,
        failures,
    })
}

/// CSV with header `sequence,latency_ms,color_bytes,depth_bytes,decoded_bytes`.
pub fn write_transit_csv(w: impl Write, records: &[TransitRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if records.is_empty() {
        out.write_record(["sequence", "latency_ms", "color_bytes", "depth_bytes", "decoded_bytes"])?;
    }
    for r in records {
        out.serialize(r)?;
    }
    out.flush().map_err(Error::Transport)
}

pub fn read_transit_csv(r: impl Read) -> Result<Vec<TransitRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
