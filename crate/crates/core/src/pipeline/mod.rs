//! End-to-end processing: detect, build and clean the object cloud, plan a
//! grasp, and express the result in the world frame.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clock;
use crate::cloud::{build_cloud_with, clean_cloud_with, FilterParams, PointCloud};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{FrameId, Pose, Vec3};
use crate::graspplan::{plan_grasp, GraspAssumptions, GraspPlan, DEFAULT_SLAB_THICKNESS};
use crate::imaging::FramePair;
use crate::segmentation::{provider_from_config, ProviderConfig, SegmentationProvider};
use crate::transport::WireFramePair;

mod bench;
mod live;

pub use bench::{
    bench_frames, bench_stages, BenchFrame, Budget, StageReport, StageRow, DECODE_CLOUD_PLAN, STAGE_NAMES,
};
pub use live::{
    read_estimate, request_target, run_live, write_estimate, EstimateSink, JsonStream, LiveOptions, LiveSummary,
    PoseSource, Skip, StaticPose, TargetServer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub provider: ProviderConfig,
    pub filter: FilterParams,
    /// Meters.
    pub slab_thickness: f64,
    /// Camera to body.
    pub extrinsics: Pose,
    /// Estimates aggregated while hovering.
    pub hover_samples: usize,
    pub assumptions: GraspAssumptions,
    pub execution: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            provider: ProviderConfig::default(),
            filter: FilterParams::default(),
            slab_thickness: DEFAULT_SLAB_THICKNESS,
            extrinsics: Pose::identity(FrameId::Camera, FrameId::Body),
            hover_samples: 10,
            assumptions: GraspAssumptions::default(),
            execution: Execution::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.provider.validate()?;
        self.filter.validate()?;
        if !(self.slab_thickness > 0.0) {
            return Err(Error::Config("slab thickness must be positive".into()));
        }
        if (self.extrinsics.from_frame(), self.extrinsics.to_frame()) != (FrameId::Camera, FrameId::Body) {
            return Err(Error::Config("extrinsics must map camera to body".into()));
        }
        if self.hover_samples == 0 {
            return Err(Error::Config("hover_samples must be at least 1".into()));
        }
        if !(self.assumptions.max_extent > 0.0) {
            return Err(Error::Config("gripper aperture must be positive".into()));
        }
        Ok(())
    }

    /// Reads TOML or JSON, chosen by file extension (`.json` or anything else).
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Wall time per stage, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub decode_ms: f64,
    pub detect_ms: f64,
    pub cloud_ms: f64,
    pub plan_ms: f64,
    pub transform_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.decode_ms + self.detect_ms + self.cloud_ms + self.plan_ms + self.transform_ms
    }

    pub fn get(&self, stage: &str) -> Option<f64> {
        Some(match stage {
            "decode" => self.decode_ms,
            "detect" => self.detect_ms,
            "cloud" => self.cloud_ms,
            "plan" => self.plan_ms,
            "transform" => self.transform_ms,
            _ => return None,
        })
    }
}

/// One localized target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEstimate {
    pub sequence: u64,
    pub capture_timestamp: u64,
    pub class_label: String,
    pub world_centroid: Vec3,
    pub world_axis: Vec3,
    pub world_candidates: PointCloud,
    /// Plan in the camera frame.
    pub grasp: GraspPlan,
    pub timings: StageTimings,
}

impl TargetEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("estimate serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    provider: Box<dyn SegmentationProvider>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        let provider = provider_from_config(&cfg.provider)?;
        Self::with_provider(cfg, provider)
    }

    pub fn with_provider(cfg: PipelineConfig, provider: Box<dyn SegmentationProvider>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, provider })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Decodes a wire pair, then processes it; decode time is recorded.
    pub fn process_wire(&mut self, wire: &WireFramePair, body_pose_world: &Pose) -> Result<TargetEstimate> {
        let t = Instant::now();
        let pair = wire.to_pair()?;
        let decode_ms = clock::ms_between(t, Instant::now());
        let mut est = self.process_frame(&pair, body_pose_world)?;
        est.timings.decode_ms = decode_ms;
        Ok(est)
    }

    pub fn process_frame(&mut self, pair: &FramePair, body_pose_world: &Pose) -> Result<TargetEstimate> {
        process_frame(pair, body_pose_world, &self.cfg, self.provider.as_mut())
    }
}

pub fn process_frame(
    pair: &FramePair,
    body_pose_world: &Pose,
    cfg: &PipelineConfig,
    provider: &mut dyn SegmentationProvider,
) -> Result<TargetEstimate> {
    if (body_pose_world.from_frame(), body_pose_world.to_frame()) != (FrameId::Body, FrameId::World) {
        return Err(Error::contract("body pose must map body to world"));
    }
    let exec = cfg.execution;
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let detections = provider.detect(&pair.color, &cfg.provider)?;
    let target = detections
        .into_iter()
        .next()
        .ok_or_else(|| Error::TargetNotFound(cfg.provider.target_classes.clone()))?;
    timings.detect_ms = clock::ms_between(t, Instant::now());

    let t = Instant::now();
    let raw = build_cloud_with(exec, pair, &target.mask, &cfg.filter)?;
    let cloud = clean_cloud_with(exec, &raw, &cfg.filter)?;
    timings.cloud_ms = clock::ms_between(t, Instant::now());

    let t = Instant::now();
    let grasp = plan_grasp(&cloud, &cfg.assumptions, cfg.slab_thickness)?;
    timings.plan_ms = clock::ms_between(t, Instant::now());

    let t = Instant::now();
    let camera_world = body_pose_world.compose(&cfg.extrinsics)?;
    let world_centroid = camera_world.transform_point(&grasp.centroid);
    let world_axis = camera_world.transform_vector(&grasp.axis);
    let world_candidates = grasp.candidates.transformed(&camera_world)?;
    timings.transform_ms = clock::ms_between(t, Instant::now());

    Ok(TargetEstimate {
        sequence: pair.sequence,
        capture_timestamp: pair.color.timestamp,
        class_label: target.class_label,
        world_centroid,
        world_axis,
        world_candidates,
        grasp,
        timings,
    })
}

/// Component-wise median of the world centroids; the plan of the sample
/// closest to that median is kept. Even counts average the two middle values.
pub fn aggregate_estimates(samples: &[TargetEstimate]) -> Result<TargetEstimate> {
    let first = samples.first().ok_or_else(|| Error::contract("no estimates to aggregate"))?;
    if samples.iter().any(|s| s.class_label != first.class_label) {
        return Err(Error::contract("aggregated estimates must share a class"));
    }
    let median = |k: usize| {
        let mut v: Vec<f64> = samples.iter().map(|s| s.world_centroid[k]).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let m = Vec3::new(median(0), median(1), median(2));
    let nearest = samples
        .iter()
        .min_by(|a, b| (a.world_centroid - m).norm().total_cmp(&(b.world_centroid - m).norm()))
        .expect("nonempty");
    let mut out = nearest.clone();
    out.world_centroid = m;
    Ok(out)
}
