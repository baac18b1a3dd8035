use std::net::TcpListener;
use std::sync::atomic::AtomicU64;
use std::thread;
use std::time::{Duration, Instant};

use super::*;
use crate::imaging::{ColorFrame, DepthFrame};

fn small_pair(seq: u64) -> FramePair {
    let (w, h) = (16u32, 12u32);
    let intr = Intrinsics::new(w, h, 20.0, 20.0, 8.0, 6.0, 0.001).unwrap();
    let ts = 1_000 + seq;
    let color = (0..w * h * 3).map(|i| (40 + (i / 3 % w) * 4 + (i / 3 / w) * 3 + seq as u32 % 7) as u8).collect();
    let depth = (0..w * h).map(|i| (i as u64 * 13 + seq) as u16).collect();
    FramePair::new(
        ColorFrame::new(w, h, color, ts).unwrap(),
        DepthFrame::new(w, h, depth, ts).unwrap(),
        intr,
        seq,
    )
    .unwrap()
}

fn counting_source() -> impl FrameSource {
    let n = AtomicU64::new(0);
    move || Ok(Some(small_pair(n.fetch_add(1, Ordering::Relaxed))))
}

fn fast() -> PublisherConfig {
    PublisherConfig {
        max_rate_hz: Some(500.0),
        ..PublisherConfig::default()
    }
}

#[test]
fn header_layout() {
    let w = WireFramePair {
        sequence: 0x0102030405060708,
        capture_timestamp: 9,
        sent_timestamp: 10,
        intrinsics_json: "{}".into(),
        color_jpeg: vec![1, 2, 3],
        depth_png: vec![4],
    };
    let b = w.encode();
    assert_eq!(&b[..4], b"RGFP");
    assert_eq!(&b[4..8], &[1, 0, 0, 0]);
    assert_eq!(&b[8..16], &[8, 7, 6, 5, 4, 3, 2, 1]);
    assert_eq!(b[16], 9);
    assert_eq!(b[24], 10);
    assert_eq!(&b[32..44], &[2, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0]);
    assert_eq!(&b[44..], b"{}\x01\x02\x03\x04");
    assert_eq!(WireFramePair::decode(&b).unwrap(), w);
}

#[test]
fn decode_rejects_malformed() {
    let good = WireFramePair {
        sequence: 1,
        capture_timestamp: 2,
        sent_timestamp: 3,
        intrinsics_json: "{}".into(),
        color_jpeg: vec![1],
        depth_png: vec![2],
    };
    let b = good.encode();
    let mut bad_magic = b.clone();
    bad_magic[0] = b'X';
    assert!(matches!(WireFramePair::decode(&bad_magic), Err(Error::Protocol(_))));
    let mut bad_version = b.clone();
    bad_version[4] = 9;
    assert!(matches!(WireFramePair::decode(&bad_version), Err(Error::Protocol(_))));
    assert!(matches!(WireFramePair::decode(&b[..b.len() - 1]), Err(Error::Protocol(_))));
    assert!(matches!(WireFramePair::decode(&b[..20]), Err(Error::Protocol(_))));
    let mut extra = b.clone();
    extra.push(0);
    assert!(WireFramePair::decode(&extra).is_err());
    let empty = WireFramePair {
        depth_png: vec![],
        ..good
    };
    assert!(matches!(
        WireFramePair::decode(&empty.encode()),
        Err(Error::Codec { stage: CodecStage::DecodeDepth, .. })
    ));
}

#[test]
fn pair_roundtrip_through_wire() {
    let pair = small_pair(3);
    let w = WireFramePair::from_pair(&pair, &JpegOptions::default(), 2, Execution::Sequential).unwrap();
    let back = WireFramePair::decode(&w.encode()).unwrap();
    assert_eq!(back.intrinsics_json, pair.intrinsics.to_json());
    let p = back.to_pair().unwrap();
    assert_eq!(p.depth, pair.depth);
    assert_eq!(p.color.timestamp, pair.color.timestamp);
    assert!(crate::imaging::psnr(p.color.pixels(), pair.color.pixels()) > 30.0);
    let par = WireFramePair::from_pair(&pair, &JpegOptions::default(), 2, Execution::Parallel).unwrap();
    assert_eq!(par, w);
}

#[test]
fn endpoints() {
    assert_eq!(parse_endpoint("tcp://127.0.0.1:5555").unwrap().port(), 5555);
    assert_eq!(parse_endpoint("127.0.0.1:7").unwrap().port(), 7);
    assert!(parse_endpoint("udp://127.0.0.1:7").is_err());
    assert!(parse_endpoint("nonsense").is_err());
}

#[test]
fn sequential_requests_increase() {
    let p = Publisher::spawn(counting_source(), &fast()).unwrap();
    let mut c = FrameClient::new(&p.endpoint(), Duration::from_secs(2)).unwrap();
    let a = c.request().unwrap().sequence;
    let b = c.request().unwrap().sequence;
    assert!(b > a);
    assert_eq!(c.resets(), 0);
}

#[test]
fn slow_consumer_sees_gaps() {
    let p = Publisher::spawn(counting_source(), &fast()).unwrap();
    let mut c = FrameClient::new(&p.endpoint(), Duration::from_secs(2)).unwrap();
    let mut seqs = Vec::new();
    for _ in 0..4 {
        seqs.push(c.request().unwrap().sequence);
        thread::sleep(Duration::from_millis(40));
    }
    assert!(seqs.windows(2).all(|w| w[1] > w[0]));
    assert!(seqs.windows(2).any(|w| w[1] > w[0] + 1), "{seqs:?}");
}

#[test]
fn fast_consumer_never_sees_duplicates() {
    let cfg = PublisherConfig {
        max_rate_hz: Some(50.0),
        ..PublisherConfig::default()
    };
    let p = Publisher::spawn(counting_source(), &cfg).unwrap();
    let mut c = FrameClient::new(&p.endpoint(), Duration::from_secs(2)).unwrap();
    let mut seqs = Vec::new();
    for _ in 0..10 {
        seqs.push(c.request().unwrap().sequence);
    }
    assert!(seqs.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn stopped_publisher_times_out_within_bound() {
    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let timeout = Duration::from_millis(150);
    let t = Instant::now();
    let err = request_frame(&endpoint_for(addr), timeout).unwrap_err();
    assert!(matches!(err, Error::Timeout(_)), "{err}");
    assert!(t.elapsed() < timeout + Duration::from_millis(200));
}

#[test]
fn recovers_after_each_fault_kind() {
    let p = Publisher::spawn(counting_source(), &fast()).unwrap();
    let mut c = FrameClient::new(&p.endpoint(), Duration::from_millis(300)).unwrap();
    let mut last = c.request().unwrap().sequence;
    for fault in [Fault::DropReply, Fault::CorruptReply, Fault::DelayReply(Duration::from_millis(600))] {
        p.faults().push(fault);
        assert!(c.request().is_err(), "{fault:?}");
        let next = c.request().unwrap().sequence;
        assert!(next > last);
        last = next;
    }
    assert_eq!(c.resets(), 3);
}

#[test]
fn source_failure_becomes_error_reply() {
    let mut n = 0;
    let source = move || {
        n += 1;
        if n > 2 {
            Err(Error::Config("camera unplugged".into()))
        } else {
            Ok(Some(small_pair(n)))
        }
    };
    let p = Publisher::spawn(source, &fast()).unwrap();
    let mut c = FrameClient::new(&p.endpoint(), Duration::from_secs(2)).unwrap();
    let mut saw_error = false;
    for _ in 0..4 {
        match c.request() {
            Ok(_) => {}
            Err(Error::Remote(m)) => {
                assert!(m.contains("camera unplugged"));
                saw_error = true;
                break;
            }
            Err(e) => panic!("unexpected {e}"),
        }
    }
    assert!(saw_error);
    thread::sleep(Duration::from_millis(100));
    assert!(p.is_stopped());
}

#[test]
fn stale_reply_is_rejected() {
    // a misbehaving server that replays sequence 5
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (mut s, _) = l.accept().unwrap();
        let w = WireFramePair {
            sequence: 5,
            capture_timestamp: 0,
            sent_timestamp: 0,
            intrinsics_json: "{}".into(),
            color_jpeg: vec![1],
            depth_png: vec![1],
        };
        for _ in 0..2 {
            read_message(&mut s).unwrap();
            write_message(&mut s, &w.encode()).unwrap();
        }
    });
    let mut c = FrameClient::new(&endpoint_for(addr), Duration::from_secs(1)).unwrap();
    assert_eq!(c.request().unwrap().sequence, 5);
    assert!(matches!(c.request(), Err(Error::Stale { got: 5, last: 5 })));
    server.join().unwrap();
}

#[test]
fn summary_nearest_rank() {
    let lat: Vec<f64> = (1..=100).map(f64::from).collect();
    let s = summarize(&lat);
    assert_eq!((s.p50_ms, s.p95_ms, s.p99_ms, s.max_ms), (50.0, 95.0, 99.0, 100.0));
    assert_eq!(s.mean_ms, 50.5);
    let one = summarize(&[3.0]);
    assert_eq!((one.p50_ms, one.p99_ms), (3.0, 3.0));
    let none = summarize(&[]);
    assert!(!none.valid && none.mean_ms.is_nan() && none.p99_ms.is_nan());
}

#[test]
fn transit_zero_and_csv_roundtrip() {
    let p = Publisher::spawn(counting_source(), &fast()).unwrap();
    let mut c = FrameClient::new(&p.endpoint(), Duration::from_secs(2)).unwrap();
    let empty = measure_transit(&mut c, 0, 5).unwrap();
    assert!(empty.records.is_empty() && !empty.summary.valid);
    let r = measure_transit(&mut c, 5, 5).unwrap();
    assert_eq!(r.records.len(), 5);
    assert!(r.records.iter().all(|x| x.latency_ms >= 0.0 && x.decoded_bytes == 16 * 12 * 5));
    let mut buf = Vec::new();
    write_transit_csv(&mut buf, &r.records).unwrap();
    assert!(buf.starts_with(b"sequence,latency_ms,color_bytes,depth_bytes,decoded_bytes\n"));
    assert_eq!(read_transit_csv(&buf[..]).unwrap(), r.records);
}

#[test]
fn transit_gives_up_after_consecutive_failures() {
    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let mut c = FrameClient::new(&endpoint_for(addr), Duration::from_millis(30)).unwrap();
    assert!(matches!(measure_transit(&mut c, 3, 2), Err(Error::Timeout(_))));
    assert_eq!(c.resets(), 2);
}

#[test]
fn unknown_request_gets_error_reply() {
    let p = Publisher::spawn(counting_source(), &fast()).unwrap();
    let mut s = connect_within(p.local_addr(), Duration::from_secs(1)).unwrap();
    let reply = exchange(&mut s, &request_message(*b"NOPE"), Duration::from_secs(1)).unwrap();
    assert!(matches!(check_error_reply(&reply), Err(Error::Remote(_))));
}
