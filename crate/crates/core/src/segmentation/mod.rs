//! Instance-segmentation boundary: detections, provider configuration and
//! the two built-in providers (simulator ground truth, remote service).

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ColorFrame, PixelRect, SegMask};

mod remote;

pub use remote::{
    decode_remote_response, decode_seg_request, encode_detections, encode_seg_request, rle_decode, rle_encode,
    RemoteProvider, SegRequest, DEFAULT_REMOTE_TIMEOUT,
};

/// One detected object instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub mask: SegMask,
    pub class_label: String,
    pub score: f64,
    /// Tight box around the true mask bits; `None` for an empty mask.
    pub bbox: Option<PixelRect>,
}

impl Detection {
    pub fn new(mask: SegMask) -> Self {
        Self {
            class_label: mask.class_label.clone(),
            score: mask.score,
            bbox: mask.bbox(),
            mask,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    GroundTruth,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// `tcp://host:port` of the segmentation service; remote only.
    pub endpoint: Option<String>,
    pub target_classes: Vec<String>,
    pub min_score: f64,
    pub timeout_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::GroundTruth,
            endpoint: None,
            target_classes: vec!["bottle".into()],
            min_score: 0.5,
            timeout_ms: DEFAULT_REMOTE_TIMEOUT.as_millis() as u64,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::Config(format!("min_score {} outside [0,1]", self.min_score)));
        }
        if self.kind == ProviderKind::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(Error::Config("remote provider needs an endpoint".into()));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("provider timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Keeps target-class detections at or above `min_score`, in order.
    pub fn filter(&self, detections: Vec<Detection>) -> Vec<Detection> {
        detections
            .into_iter()
            .filter(|d| d.score >= self.min_score && self.target_classes.contains(&d.class_label))
            .collect()
    }
}

/// Source of instance masks for a color frame.
pub trait SegmentationProvider: Send {
    /// Target-class detections in provider emission order; the first one is
    /// the grasp target. No detections is an empty list, not an error.
    fn detect(&mut self, frame: &ColorFrame, cfg: &ProviderConfig) -> Result<Vec<Detection>>;
}

/// Builds the provider named by `cfg.kind`. A ground-truth provider starts
/// with an empty registry.
pub fn provider_from_config(cfg: &ProviderConfig) -> Result<Box<dyn SegmentationProvider>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        ProviderKind::GroundTruth => Box::new(GroundTruthProvider::new()),
        ProviderKind::Remote => Box::new(RemoteProvider::new(
            cfg.endpoint.as_deref().expect("validated"),
            cfg.timeout(),
        )?),
    })
}

/// Most frames the ground-truth registry retains.
const REGISTRY_CAPACITY: usize = 4096;

/// Oracle provider: returns masks registered by whoever rendered the frame,
/// keyed by capture timestamp. Frames with no registered entry fall back to
/// a fixed detection list when one is set (a static scene seen from a fixed
/// pose), otherwise yield no detections.
///
/// Clones share the registry, so a renderer can keep registering frames
/// while the pipeline owns the provider.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthProvider {
    registry: Arc<Mutex<BTreeMap<u64, Vec<Detection>>>>,
    fallback: Option<Vec<Detection>>,
}

impl GroundTruthProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(detections: Vec<Detection>) -> Self {
        Self {
            fallback: Some(detections),
            ..Self::default()
        }
    }

    pub fn register(&self, timestamp: u64, detections: Vec<Detection>) {
        let mut reg = self.registry.lock().expect("registry");
        reg.insert(timestamp, detections);
        while reg.len() > REGISTRY_CAPACITY {
            reg.pop_first();
        }
    }

    pub fn registered(&self) -> usize {
        self.registry.lock().expect("registry").len()
    }
}

impl SegmentationProvider for GroundTruthProvider {
    fn detect(&mut self, frame: &ColorFrame, cfg: &ProviderConfig) -> Result<Vec<Detection>> {
        if frame.width() == 0 || frame.height() == 0 {
            return Err(Error::contract("empty frame"));
        }
        let found = self.registry.lock().expect("registry").get(&frame.timestamp).cloned();
        let all = found.or_else(|| self.fallback.clone()).unwrap_or_default();
        for d in &all {
            if (d.mask.width(), d.mask.height()) != (frame.width(), frame.height()) {
                return Err(Error::contract("ground-truth mask does not match frame dimensions"));
            }
        }
        Ok(cfg.filter(all))
    }
}
