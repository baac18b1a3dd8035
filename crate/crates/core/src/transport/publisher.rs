use std::collections::VecDeque;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{
    endpoint_for, error_message, magic_of, read_message_until, write_message, WireFramePair, MAGIC_FRAME_REQUEST,
};
use crate::clock;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::imaging::{FramePair, JpegOptions, DEFAULT_PNG_LEVEL};

/// Producer of captured frame pairs (a device driver or the simulator).
pub trait FrameSource: Send {
    /// Blocks until the next pair is captured. `Ok(None)` ends the session.
    fn next_pair(&mut self) -> Result<Option<FramePair>>;
}

impl<F> FrameSource for F
where
    F: FnMut() -> Result<Option<FramePair>> + Send,
{
    fn next_pair(&mut self) -> Result<Option<FramePair>> {
        self()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PublisherConfig {
    /// `host:port`; port 0 picks a free port.
    pub bind: String,
    pub jpeg: JpegOptions,
    pub png_level: u8,
    /// Capture pacing; `None` pulls from the source as fast as it yields.
    pub max_rate_hz: Option<f64>,
}

impl Default for PublisherConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:0".into(),
            jpeg: JpegOptions::default(),
            png_level: DEFAULT_PNG_LEVEL,
            max_rate_hz: Some(30.0),
        }
    }
}

/// Failure injected into the next reply, for exercising consumer recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Consume the frame and close the connection without replying.
    DropReply,
    /// Reply with bytes that do not parse.
    CorruptReply,
    /// Hold the reply back for the given time.
    DelayReply(Duration),
}

#[derive(Debug, Clone, Default)]
pub struct FaultInjector(Arc<Mutex<VecDeque<Fault>>>);

impl FaultInjector {
    pub fn push(&self, f: Fault) {
        self.0.lock().expect("fault queue").push_back(f);
    }

    fn take(&self) -> Option<Fault> {
        self.0.lock().expect("fault queue").pop_front()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum SourceState {
    Live,
    Ended,
    Failed(String),
}

struct Slot {
    latest: Option<WireFramePair>,
    last_sent: u64,
    state: SourceState,
}

struct Shared {
    slot: Mutex<Slot>,
    fresh: Condvar,
    stop: Arc<AtomicBool>,
    faults: FaultInjector,
    produced: AtomicU64,
    replies: AtomicU64,
}

/// Request-reply frame publisher.
///
/// A capture thread keeps the newest encoded pair in a single-slot mailbox,
/// overwriting older unsent ones. Each request is answered with the mailbox
/// content once it is newer than the last pair sent on any connection, so a
/// sequence number is never sent twice.
pub struct Publisher {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Publisher {
    pub fn spawn(source: impl FrameSource + 'static, cfg: &PublisherConfig) -> Result<Self> {
        Self::spawn_with_stop(source, cfg, Arc::new(AtomicBool::new(false)))
    }

    pub fn spawn_with_stop(
        source: impl FrameSource + 'static,
        cfg: &PublisherConfig,
        stop: Arc<AtomicBool>,
    ) -> Result<Self> {
        if cfg.png_level > 9 {
            return Err(Error::Config(format!("png level {} outside [0,9]", cfg.png_level)));
        }
        if matches!(cfg.max_rate_hz, Some(r) if !(r > 0.0)) {
            return Err(Error::Config("max_rate_hz must be positive".into()));
        }
        let listener = TcpListener::bind(&cfg.bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            slot: Mutex::new(Slot {
                latest: None,
                last_sent: 0,
                state: SourceState::Live,
            }),
            fresh: Condvar::new(),
            stop,
            faults: FaultInjector::default(),
            produced: AtomicU64::new(0),
            replies: AtomicU64::new(0),
        });
        let capture = {
            let shared = Arc::clone(&shared);
            let cfg = cfg.clone();
            thread::Builder::new()
                .name("capture".into())
                .spawn(move || capture_loop(source, &cfg, &shared))?
        };
        let accept = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("accept".into())
                .spawn(move || accept_loop(&listener, &shared))?
        };
        Ok(Self {
            addr,
            shared,
            threads: vec![capture, accept],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        endpoint_for(self.addr)
    }

    pub fn faults(&self) -> FaultInjector {
        self.shared.faults.clone()
    }

    /// Pairs captured and encoded so far.
    pub fn produced(&self) -> u64 {
        self.shared.produced.load(Ordering::Relaxed)
    }

    /// Frame replies written so far.
    pub fn replies(&self) -> u64 {
        self.shared.replies.load(Ordering::Relaxed)
    }

    pub fn is_stopped(&self) -> bool {
        self.shared.stop.load(Ordering::Relaxed)
    }

    /// Source failure message, once the capture thread has hit one.
    pub fn source_error(&self) -> Option<String> {
        match &self.shared.slot.lock().expect("slot").state {
            SourceState::Failed(m) => Some(m.clone()),
            _ => None,
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        self.shared.fresh.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Serves frames until `stop` is set. A source failure is answered with an
/// error reply and then ends the loop with that error.
pub fn publish_loop(source: impl FrameSource + 'static, cfg: &PublisherConfig, stop: Arc<AtomicBool>) -> Result<()> {
    let publisher = Publisher::spawn_with_stop(source, cfg, Arc::clone(&stop))?;
    log::info!("publishing on {}", publisher.endpoint());
    let mut failed_at: Option<Instant> = None;
    while !stop.load(Ordering::Relaxed) {
        // give a pending request a moment to receive the error reply
        if failed_at.is_some_and(|t| t.elapsed() > Duration::from_secs(1)) {
            break;
        }
        if failed_at.is_none() && publisher.source_error().is_some() {
            failed_at = Some(Instant::now());
        }
        thread::sleep(Duration::from_millis(20));
    }
    let failure = publisher.source_error();
    publisher.stop();
    match failure {
        Some(m) => Err(Error::Remote(format!("camera source failed: {m}"))),
        None => Ok(()),
    }
}

fn capture_loop(mut source: impl FrameSource, cfg: &PublisherConfig, shared: &Shared) {
    let period = cfg.max_rate_hz.map(|hz| Duration::from_secs_f64(1.0 / hz));
    let mut due = Instant::now();
    let mut sequence = 0u64;
    let set_state = |state: SourceState| {
        shared.slot.lock().expect("slot").state = state;
        shared.fresh.notify_all();
    };
    while !shared.stop.load(Ordering::Relaxed) {
        if let Some(p) = period {
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            }
            due = due.max(now) + p;
        }
        let pair = match source.next_pair() {
            Ok(Some(pair)) => pair,
            Ok(None) => {
                debug!("frame source ended after {sequence} pairs");
                set_state(SourceState::Ended);
                return;
            }
            Err(e) => {
                warn!("frame source failed: {e}");
                set_state(SourceState::Failed(e.to_string()));
                return;
            }
        };
        sequence += 1;
        match WireFramePair::from_pair(&pair, &cfg.jpeg, cfg.png_level, Execution::default()) {
            Ok(mut wire) => {
                wire.sequence = sequence;
                shared.slot.lock().expect("slot").latest = Some(wire);
                shared.produced.fetch_add(1, Ordering::Relaxed);
                shared.fresh.notify_all();
            }
            Err(e) => warn!("encode failed, skipping pair {sequence}: {e}"),
        }
    }
}

fn accept_loop(listener: &TcpListener, shared: &Arc<Shared>) {
    let mut conns: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("consumer connected from {peer}");
                let shared = Arc::clone(shared);
                let spawned = thread::Builder::new().name("reply".into()).spawn(move || {
                    if let Err(e) = serve_connection(stream, &shared) {
                        debug!("connection from {peer} closed: {e}");
                    }
                });
                match spawned {
                    Ok(h) => conns.push(h),
                    Err(e) => warn!("cannot spawn reply thread: {e}"),
                }
                conns.retain(|h| !h.is_finished());
            }
            Err(e) if super::is_timeout(&e) => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
    for h in conns {
        let _ = h.join();
    }
}

fn serve_connection(mut stream: TcpStream, shared: &Shared) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    while let Some(msg) = read_message_until(&mut stream, &shared.stop)? {
        if magic_of(&msg) != Some(MAGIC_FRAME_REQUEST) {
            write_message(&mut stream, &error_message("expected a frame request"))?;
            continue;
        }
        let wire = match next_fresh(shared) {
            Some(Ok(w)) => w,
            Some(Err(text)) => {
                write_message(&mut stream, &error_message(&text))?;
                continue;
            }
            None => return Ok(()),
        };
        match shared.faults.take() {
            Some(Fault::DropReply) => {
                debug!("fault: dropping reply for {}", wire.sequence);
                return Ok(());
            }
            Some(Fault::CorruptReply) => {
                write_message(&mut stream, b"XXXX\x01\x00\x00\x00garbage")?;
                continue;
            }
            Some(Fault::DelayReply(d)) => thread::sleep(d),
            None => {}
        }
        let mut wire = wire;
        wire.sent_timestamp = clock::now_ns();
        write_message(&mut stream, &wire.encode())?;
        shared.replies.fetch_add(1, Ordering::Relaxed);
    }
    Ok(())
}

/// Waits for a pair newer than anything sent. `None` on shutdown; `Err` with
/// a message when the source can no longer produce one.
fn next_fresh(shared: &Shared) -> Option<std::result::Result<WireFramePair, String>> {
    let mut slot = shared.slot.lock().expect("slot");
    loop {
        if shared.stop.load(Ordering::Relaxed) {
            return None;
        }
        let last = slot.last_sent;
        if let Some(w) = slot.latest.take_if(|w| w.sequence > last) {
            slot.last_sent = w.sequence;
            return Some(Ok(w));
        }
        match &slot.state {
            SourceState::Live => {}
            SourceState::Ended => return Some(Err("frame source exhausted".into())),
            SourceState::Failed(m) => {
                let text = format!("camera source failed: {m}");
                shared.stop.store(true, Ordering::Relaxed);
                shared.fresh.notify_all();
                return Some(Err(text));
            }
        }
        slot = shared
            .fresh
            .wait_timeout(slot, Duration::from_millis(50))
            .expect("slot")
            .0;
    }
}
