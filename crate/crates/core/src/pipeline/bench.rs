use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Pipeline, PipelineConfig, StageTimings};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{FrameId, Intrinsics, Pose, Vec3};
use crate::imaging::{JpegOptions, DEFAULT_PNG_LEVEL};
use crate::segmentation::{Detection, GroundTruthProvider};
use crate::simulator::{pose_grid, render_with, NoiseConfig, Scene, Stamp};
use crate::transport::{summarize, WireFramePair};

pub const STAGE_NAMES: [&str; 5] = ["decode", "detect", "cloud", "plan", "transform"];
/// Combined stage compared against the headline budget.
pub const DECODE_CLOUD_PLAN: &str = "decode+cloud+plan";

/// p95 budgets in milliseconds. Missing entries are unbounded.
///
/// ```toml
/// decode_cloud_plan_p95_ms = 60.0
/// [stage_p95_ms]
/// cloud = 40.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub decode_cloud_plan_p95_ms: f64,
    pub stage_p95_ms: BTreeMap<String, f64>,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            decode_cloud_plan_p95_ms: f64::INFINITY,
            stage_p95_ms: BTreeMap::new(),
        }
    }
}

impl Budget {
    pub fn from_toml(text: &str) -> Result<Self> {
        let b: Budget = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(k) = b.stage_p95_ms.keys().find(|k| !STAGE_NAMES.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown stage {k:?} in budget")));
        }
        Ok(b)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn limit(&self, stage: &str) -> Option<f64> {
        if stage == DECODE_CLOUD_PLAN {
            Some(self.decode_cloud_plan_p95_ms)
        } else {
            self.stage_p95_ms.get(stage).copied()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub budget_p95_ms: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub frames: usize,
    pub rows: Vec<StageRow>,
    /// False when there were no frames to time.
    pub valid: bool,
}

impl StageReport {
    pub fn passes(&self) -> bool {
        self.valid && self.rows.iter().all(|r| r.pass)
    }

    pub fn row(&self, stage: &str) -> Option<&StageRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["stage", "mean_ms", "p95_ms", "budget_p95_ms", "pass"])?;
        for r in &self.rows {
            out.write_record([
                r.stage.clone(),
                r.mean_ms.to_string(),
                r.p95_ms.to_string(),
                r.budget_p95_ms.map(|b| b.to_string()).unwrap_or_default(),
                r.pass.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

impl fmt::Display for StageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} frames{}", self.frames, if self.valid { "" } else { " (invalid: nothing timed)" })?;
        writeln!(f, "{:<18} {:>9} {:>9} {:>9}  ", "stage", "mean ms", "p95 ms", "budget")?;
        for r in &self.rows {
            let budget = r.budget_p95_ms.map_or("-".to_string(), |b| format!("{b:.1}"));
            let verdict = if r.pass { "ok" } else { "OVER" };
            writeln!(f, "{:<18} {:>9.2} {:>9.2} {:>9}  {verdict}", r.stage, r.mean_ms, r.p95_ms, budget)?;
        }
        Ok(())
    }
}

/// A pre-encoded frame with its oracle masks and the body pose it was taken from.
#[derive(Debug, Clone)]
pub struct BenchFrame {
    pub wire: WireFramePair,
    pub detections: Vec<Detection>,
    pub body_pose: Pose,
}

/// Renders `n` bottle frames at 640x480 from a 3x3 grid of poses around 1.2 m.
pub fn bench_frames(n: usize, seed: u64) -> Result<Vec<BenchFrame>> {
    let target = Vec3::new(0.0, 0.0, 1.0);
    let scene = Scene::bottle_at(target);
    let poses = pose_grid((1.0, 1.4), (-0.2, 0.2), (3, 3), target)?;
    let intr = Intrinsics::default();
    (0..n)
        .map(|i| {
            let pose = &poses[i % poses.len()];
            let noise = NoiseConfig {
                sigma: 0.002,
                seed: seed.wrapping_add(i as u64),
            };
            let stamp = Stamp {
                timestamp: 1_000_000 + i as u64,
                sequence: i as u64 + 1,
            };
            let (pair, truth) = render_with(Execution::default(), &scene, pose, &intr, &noise, stamp)?;
            let wire = WireFramePair::from_pair(&pair, &JpegOptions::default(), DEFAULT_PNG_LEVEL, Execution::default())?;
            let body_pose = Pose::new(*pose.rotation(), *pose.translation(), FrameId::Body, FrameId::World)?;
            Ok(BenchFrame {
                wire,
                detections: truth.detections(),
                body_pose,
            })
        })
        .collect()
}

/// Times every stage of the pipeline over `frames` with the ground-truth
/// provider and compares p95 values against `budget`.
pub fn bench_stages(frames: &[BenchFrame], cfg: &PipelineConfig, budget: &Budget) -> Result<StageReport> {
    let provider = GroundTruthProvider::new();
    for f in frames {
        provider.register(f.wire.capture_timestamp, f.detections.clone());
    }
    let mut pipeline = Pipeline::with_provider(cfg.clone(), Box::new(provider))?;
    let mut timings: Vec<StageTimings> = Vec::with_capacity(frames.len());
    for f in frames {
        timings.push(pipeline.process_wire(&f.wire, &f.body_pose)?.timings);
    }
    let mut rows = Vec::new();
    let mut push = |stage: &str, values: Vec<f64>| {
        let s = summarize(&values);
        let budget_p95_ms = budget.limit(stage);
        rows.push(StageRow {
            stage: stage.to_string(),
            mean_ms: s.mean_ms,
            p95_ms: s.p95_ms,
            budget_p95_ms,
            pass: s.valid && budget_p95_ms.is_none_or(|b| s.p95_ms <= b),
        });
    };
    for stage in STAGE_NAMES {
        push(stage, timings.iter().map(|t| t.get(stage).expect("known stage")).collect());
    }
    push(
        DECODE_CLOUD_PLAN,
        timings.iter().map(|t| t.decode_ms + t.cloud_ms + t.plan_ms).collect(),
    );
    Ok(StageReport {
        frames: frames.len(),
        rows,
        valid: !frames.is_empty(),
    })
}
