use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::{aggregate_estimates, Pipeline, TargetEstimate};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::transport::{
    check_error_reply, connect_within, endpoint_for, error_message, exchange, magic_of, parse_endpoint, put_preamble,
    read_message_until, request_message, write_message, FrameClient, Reader, DEFAULT_MAX_CONSECUTIVE_FAILURES,
    MAGIC_TARGET, MAGIC_TARGET_REQUEST,
};

/// Body-to-world pose at a capture time (simulator, motion capture, odometry).
pub trait PoseSource: Send {
    fn body_pose(&mut self, capture_timestamp: u64) -> Result<Pose>;
}

impl<F> PoseSource for F
where
    F: FnMut(u64) -> Result<Pose> + Send,
{
    fn body_pose(&mut self, capture_timestamp: u64) -> Result<Pose> {
        self(capture_timestamp)
    }
}

/// A body that does not move.
#[derive(Debug, Clone)]
pub struct StaticPose(pub Pose);

impl PoseSource for StaticPose {
    fn body_pose(&mut self, _: u64) -> Result<Pose> {
        Ok(self.0.clone())
    }
}

/// Downstream consumer of estimates.
pub trait EstimateSink {
    fn emit(&mut self, estimate: &TargetEstimate) -> Result<()>;
}

impl EstimateSink for Vec<TargetEstimate> {
    fn emit(&mut self, estimate: &TargetEstimate) -> Result<()> {
        self.push(estimate.clone());
        Ok(())
    }
}

/// Length-prefixed JSON stream: `u32` little-endian byte count, then the
/// estimate as JSON.
pub struct JsonStream<W: Write>(pub W);

impl<W: Write> EstimateSink for JsonStream<W> {
    fn emit(&mut self, estimate: &TargetEstimate) -> Result<()> {
        write_estimate(&mut self.0, estimate)
    }
}

pub fn write_estimate(w: &mut impl Write, e: &TargetEstimate) -> Result<()> {
    write_message(w, e.to_json().as_bytes())?;
    Ok(())
}

/// Next estimate of a length-prefixed JSON stream; `None` at a clean end.
pub fn read_estimate(r: &mut impl Read) -> Result<Option<TargetEstimate>> {
    match crate::transport::read_message(r) {
        Ok(msg) => Ok(Some(serde_json::from_slice(&msg)?)),
        Err(Error::Transport(e)) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct LiveOptions {
    /// Frames to receive before returning; `None` runs until `stop`.
    pub frames: Option<u64>,
    pub max_consecutive_failures: usize,
    /// Emit one median estimate per `hover_samples` frame estimates instead
    /// of every estimate.
    pub hover: bool,
    pub stop: Arc<AtomicBool>,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self {
            frames: None,
            max_consecutive_failures: DEFAULT_MAX_CONSECUTIVE_FAILURES,
            hover: false,
            stop: Arc::new(AtomicBool::new(false)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub sequence: Option<u64>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LiveSummary {
    pub frames: u64,
    pub emitted: u64,
    pub skips: Vec<Skip>,
    pub transport_failures: u64,
}

/// Request, process, emit; repeat. Frames that fail to process are skipped
/// and logged. `max_consecutive_failures` transport failures in a row end
/// the loop with the last error.
pub fn run_live(
    client: &mut FrameClient,
    pipeline: &mut Pipeline,
    poses: &mut dyn PoseSource,
    sink: &mut dyn EstimateSink,
    opts: &LiveOptions,
) -> Result<LiveSummary> {
    let mut summary = LiveSummary::default();
    let mut streak = 0usize;
    let mut window: Vec<TargetEstimate> = Vec::new();
    let hover = pipeline.config().hover_samples;
    while !opts.stop.load(Ordering::Relaxed) && opts.frames.is_none_or(|n| summary.frames < n) {
        let wire = match client.request() {
            Ok(w) => {
                streak = 0;
                summary.frames += 1;
                w
            }
            Err(e) => {
                streak += 1;
                summary.transport_failures += 1;
                warn!("frame request failed ({streak} in a row): {e}");
                if streak >= opts.max_consecutive_failures.max(1) {
                    log::error!("giving up after {streak} consecutive transport failures");
                    return Err(e);
                }
                continue;
            }
        };
        let result = poses
            .body_pose(wire.capture_timestamp)
            .and_then(|body| pipeline.process_wire(&wire, &body));
        let estimate = match result {
            Ok(e) => e,
            Err(e) => {
                info!("skipping frame {}: {e}", wire.sequence);
                summary.skips.push(Skip {
                    sequence: Some(wire.sequence),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let out = if opts.hover {
            window.push(estimate);
            if window.len() < hover {
                continue;
            }
            let agg = aggregate_estimates(&window)?;
            window.clear();
            agg
        } else {
            estimate
        };
        sink.emit(&out)?;
        summary.emitted += 1;
    }
    Ok(summary)
}

struct Latest {
    json: Option<(u64, Arc<Vec<u8>>)>,
    version: u64,
}

struct ServerShared {
    latest: Mutex<Latest>,
    fresh: Condvar,
    stop: AtomicBool,
}

/// Serves the newest estimate to downstream consumers over the request-reply
/// substrate: each `RGTQ` request is answered with the newest estimate that
/// connection has not seen yet.
pub struct TargetServer {
    addr: SocketAddr,
    shared: Arc<ServerShared>,
    thread: Option<JoinHandle<()>>,
}

impl TargetServer {
    pub fn spawn(bind: &str) -> Result<Self> {
        let listener = TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(ServerShared {
            latest: Mutex::new(Latest { json: None, version: 0 }),
            fresh: Condvar::new(),
            stop: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        let thread = thread::Builder::new()
            .name("target-accept".into())
            .spawn(move || {
                let mut conns = Vec::new();
                while !s.stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let s = Arc::clone(&s);
                            conns.push(thread::spawn(move || {
                                if let Err(e) = serve_targets(stream, &s) {
                                    debug!("target connection closed: {e}");
                                }
                            }));
                        }
                        Err(_) => thread::sleep(Duration::from_millis(5)),
                    }
                }
                for c in conns {
                    let _ = c.join();
                }
            })?;
        Ok(Self {
            addr,
            shared,
            thread: Some(thread),
        })
    }

    pub fn endpoint(&self) -> String {
        endpoint_for(self.addr)
    }
}

impl EstimateSink for TargetServer {
    fn emit(&mut self, estimate: &TargetEstimate) -> Result<()> {
        let mut msg = Vec::new();
        put_preamble(&mut msg, MAGIC_TARGET);
        let json = estimate.to_json();
        msg.extend_from_slice(&(json.len() as u32).to_le_bytes());
        msg.extend_from_slice(json.as_bytes());
        let mut l = self.shared.latest.lock().expect("latest");
        l.version += 1;
        l.json = Some((l.version, Arc::new(msg)));
        self.shared.fresh.notify_all();
        Ok(())
    }
}

impl Drop for TargetServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        self.shared.fresh.notify_all();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_targets(mut stream: TcpStream, s: &ServerShared) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut seen = 0u64;
    while let Some(msg) = read_message_until(&mut stream, &s.stop)? {
        if magic_of(&msg) != Some(MAGIC_TARGET_REQUEST) {
            write_message(&mut stream, &error_message("expected a target request"))?;
            continue;
        }
        let reply = {
            let mut l = s.latest.lock().expect("latest");
            loop {
                if s.stop.load(Ordering::Relaxed) {
                    return Ok(());
                }
                if let Some((v, m)) = &l.json {
                    if *v > seen {
                        seen = *v;
                        break Arc::clone(m);
                    }
                }
                l = s.fresh.wait_timeout(l, Duration::from_millis(50)).expect("latest").0;
            }
        };
        write_message(&mut stream, &reply)?;
    }
    Ok(())
}

/// Fetches the next unseen estimate from a [`TargetServer`].
pub fn request_target(endpoint: &str, timeout: Duration) -> Result<TargetEstimate> {
    let mut stream = connect_within(parse_endpoint(endpoint)?, timeout)?;
    let reply = exchange(&mut stream, &request_message(MAGIC_TARGET_REQUEST), timeout)?;
    check_error_reply(&reply)?;
    let mut r = Reader::new(&reply);
    r.preamble(MAGIC_TARGET)?;
    let n = r.u32()? as usize;
    Ok(serde_json::from_slice(r.take(n)?)?)
}
