#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rgbd_grasp::geometry::{FrameId, Intrinsics, Pose, Vec3};
use rgbd_grasp::imaging::FramePair;
use rgbd_grasp::segmentation::GroundTruthProvider;
use rgbd_grasp::simulator::{render_with, NoiseConfig, Scene, Stamp};
use rgbd_grasp::transport::{FrameSource, PublisherConfig};
use rgbd_grasp::Execution;

pub const TARGET: Vec3 = Vec3::new(0.0, 0.0, 1.0);

pub fn camera() -> Pose {
    Pose::camera_facing_x(TARGET - Vec3::new(1.2, 0.0, 0.0))
}

/// The camera pose retagged as the body pose (identity extrinsics).
pub fn body() -> Pose {
    let c = camera();
    Pose::new(*c.rotation(), *c.translation(), FrameId::Body, FrameId::World).unwrap()
}

pub fn quarter_vga() -> Intrinsics {
    Intrinsics::new(320, 240, 192.5, 192.5, 160.0, 120.0, 0.001).unwrap()
}

pub fn fast_publisher() -> PublisherConfig {
    PublisherConfig {
        max_rate_hz: Some(200.0),
        ..PublisherConfig::default()
    }
}

/// Renders the bottle from a fixed pose with fresh noise per frame and
/// registers each frame's oracle masks with `gt` when given.
pub fn bottle_source(gt: Option<GroundTruthProvider>, produced: Arc<AtomicU64>) -> impl FrameSource {
    let scene = Scene::bottle_at(TARGET);
    let pose = camera();
    let intr = quarter_vga();
    move || -> rgbd_grasp::Result<Option<FramePair>> {
        let seq = produced.fetch_add(1, Ordering::Relaxed) + 1;
        let stamp = Stamp {
            timestamp: 1_000_000 * seq,
            sequence: seq,
        };
        let noise = NoiseConfig { sigma: 0.002, seed: seq };
        let (pair, truth) = render_with(Execution::default(), &scene, &pose, &intr, &noise, stamp)?;
        if let Some(gt) = &gt {
            gt.register(stamp.timestamp, truth.detections());
        }
        Ok(Some(pair))
    }
}
