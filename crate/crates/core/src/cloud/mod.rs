//! Object point clouds: construction from a masked frame pair and the
//! cleanup stages (black-point removal, radius outlier removal, voxel
//! downsampling).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::{FrameId, Pose, Vec3};
use crate::imaging::{apply_mask, FramePair, SegMask};

mod ply;

pub use ply::{read_ply, write_ply};

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CloudRepr", into = "CloudRepr")]
pub struct PointCloud {
    points: Vec<Vec3>,
    colors: Option<Vec<Rgb>>,
    pub frame: FrameId,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, colors: Option<Vec<Rgb>>, frame: FrameId) -> Result<Self> {
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(Error::contract(format!(
                    "{} colors for {} points",
                    c.len(),
                    points.len()
                )));
            }
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::contract("point cloud has non-finite coordinates"));
        }
        Ok(Self { points, colors, frame })
    }

    pub fn from_points(points: Vec<Vec3>, frame: FrameId) -> Result<Self> {
        Self::new(points, None, frame)
    }

    pub fn empty(frame: FrameId) -> Self {
        Self {
            points: Vec::new(),
            colors: None,
            frame,
        }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[Rgb]> {
        self.colors.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points whose index satisfies `keep`, preserving order.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> PointCloud {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            colors: self.colors.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
            frame: self.frame,
        }
    }

    /// Concatenation; colors survive only when both sides have them.
    pub fn union(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let colors = match (&self.colors, &other.colors) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        PointCloud {
            points,
            colors,
            frame: self.frame,
        }
    }

    pub fn map_points(&self, f: impl Fn(&Vec3) -> Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(f).collect(),
            colors: self.colors.clone(),
            frame: self.frame,
        }
    }

    /// Re-expresses the cloud through `pose`; the cloud must be in `pose.from_frame()`.
    pub fn transformed(&self, pose: &Pose) -> Result<PointCloud> {
        if pose.from_frame() != self.frame {
            return Err(Error::contract(format!(
                "cloud in {:?} cannot be mapped by a {:?}->{:?} pose",
                self.frame,
                pose.from_frame(),
                pose.to_frame()
            )));
        }
        let mut out = self.map_points(|p| pose.transform_point(p));
        out.frame = pose.to_frame();
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct CloudRepr {
    frame: FrameId,
    points: Vec<[f64; 3]>,
    colors: Option<Vec<Rgb>>,
}

impl TryFrom<CloudRepr> for PointCloud {
    type Error = Error;

    fn try_from(r: CloudRepr) -> Result<Self> {
        PointCloud::new(r.points.into_iter().map(Vec3::from).collect(), r.colors, r.frame)
    }
}

impl From<PointCloud> for CloudRepr {
    fn from(c: PointCloud) -> Self {
        CloudRepr {
            frame: c.frame,
            points: c.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            colors: c.colors,
        }
    }
}

/// Parameters of the cleanup stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    /// Meters.
    pub outlier_radius: f64,
    pub outlier_min_neighbors: usize,
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    /// Depth clip, meters.
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            outlier_radius: 0.02,
            outlier_min_neighbors: 10,
            voxel_size: 0.01,
            min_depth: 0.6,
            max_depth: 4.0,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.outlier_radius > 0.0
            && self.outlier_min_neighbors > 0
            && self.voxel_size > 0.0
            && self.min_depth > 0.0
            && self.min_depth < self.max_depth
            && self.max_depth.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid filter parameters {self:?}")))
        }
    }
}

/// One camera-frame point per pixel that is inside the mask, has a depth
/// reading inside `[min_depth, max_depth]`, and is not exactly black after
/// masking.
pub fn build_cloud(pair: &FramePair, mask: &SegMask, params: &FilterParams) -> Result<PointCloud> {
    build_cloud_with(Execution::default(), pair, mask, params)
}

pub fn build_cloud_with(exec: Execution, pair: &FramePair, mask: &SegMask, params: &FilterParams) -> Result<PointCloud> {
    params.validate()?;
    let masked = apply_mask(&pair.color, mask)?;
    let intr = &pair.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let rows = exec::map_range(exec, h as usize, |v| {
        let v = v as u32;
        let mut row = Vec::new();
        for u in 0..w {
            let rgb = masked.pixel(u, v);
            if rgb == [0, 0, 0] {
                continue;
            }
            let Some(p) = intr.deproject_pixel(u, v, pair.depth.at(u, v)) else {
                continue;
            };
            if p.z < params.min_depth || p.z > params.max_depth {
                continue;
            }
            row.push((p, rgb));
        }
        row
    });
    let (points, colors): (Vec<_>, Vec<_>) = rows.into_iter().flatten().unzip();
    if points.is_empty() {
        return Err(Error::ObjectNotVisible);
    }
    PointCloud::new(points, Some(colors), FrameId::Camera)
}

type Cell = (i64, i64, i64);

fn cell_of(p: &Vec3, size: f64) -> Cell {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Keeps exactly the points with at least `min_neighbors` other points within
/// Euclidean distance `radius` (inclusive).
pub fn radius_outlier_removal(c: &PointCloud, radius: f64, min_neighbors: usize) -> PointCloud {
    radius_outlier_removal_with(Execution::default(), c, radius, min_neighbors)
}

pub fn radius_outlier_removal_with(exec: Execution, c: &PointCloud, radius: f64, min_neighbors: usize) -> PointCloud {
    assert!(radius > 0.0, "outlier radius must be positive");
    if min_neighbors == 0 {
        return c.clone();
    }
    // Slightly oversized cells: any pair within `radius` lands in adjacent cells
    // even after rounding in the division.
    let cell = radius * (1.0 + 1e-9);
    let r2 = radius * radius;
    let mut grid: HashMap<Cell, Vec<usize>> = HashMap::new();
    for (i, p) in c.points.iter().enumerate() {
        grid.entry(cell_of(p, cell)).or_default().push(i);
    }
    let keep = exec::map_range(exec, c.len(), |i| {
        let p = c.points[i];
        let (cx, cy, cz) = cell_of(&p, cell);
        let mut count = 0usize;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &j in bucket {
                        if j != i && (c.points[j] - p).norm_squared() <= r2 {
                            count += 1;
                            if count >= min_neighbors {
                                return true;
                            }
                        }
                    }
                }
            }
        }
        false
    });
    c.select(|i| keep[i])
}

/// Replaces the points of each occupied grid cube (edge `voxel`, anchored at
/// the origin) by their centroid and mean color. Output is ordered by cube index.
pub fn voxel_downsample(c: &PointCloud, voxel: f64) -> PointCloud {
    voxel_downsample_with(Execution::default(), c, voxel)
}

pub fn voxel_downsample_with(exec: Execution, c: &PointCloud, voxel: f64) -> PointCloud {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut keyed: Vec<(Cell, usize)> = c.points.iter().enumerate().map(|(i, p)| (cell_of(p, voxel), i)).collect();
    // stable: members of a cube stay in input order, so sums are reproducible
    exec::sort_by_key(exec, &mut keyed, |(k, _)| *k);

    let mut groups: Vec<&[(Cell, usize)]> = Vec::new();
    let mut start = 0;
    for i in 1..=keyed.len() {
        if i == keyed.len() || keyed[i].0 != keyed[start].0 {
            groups.push(&keyed[start..i]);
            start = i;
        }
    }

    let merged = exec::map_slice(exec, &groups, |g| {
        let n = g.len() as f64;
        let sum = g.iter().fold(Vec3::zeros(), |acc, (_, i)| acc + c.points[*i]);
        let color = c.colors.as_ref().map(|cols| {
            let mut s = [0u64; 3];
            for (_, i) in *g {
                for k in 0..3 {
                    s[k] += u64::from(cols[*i][k]);
                }
            }
            let len = g.len() as u64;
            s.map(|v| ((v + len / 2) / len) as u8)
        });
        (sum / n, color)
    });
    let colors = c.colors.as_ref().map(|_| merged.iter().map(|(_, col)| col.expect("colored")).collect());
    PointCloud {
        points: merged.into_iter().map(|(p, _)| p).collect(),
        colors,
        frame: c.frame,
    }
}

/// Outlier removal followed by voxel downsampling.
pub fn clean_cloud(c: &PointCloud, params: &FilterParams) -> Result<PointCloud> {
    clean_cloud_with(Execution::default(), c, params)
}

pub fn clean_cloud_with(exec: Execution, c: &PointCloud, params: &FilterParams) -> Result<PointCloud> {
    params.validate()?;
    let filtered = radius_outlier_removal_with(exec, c, params.outlier_radius, params.outlier_min_neighbors);
    let down = voxel_downsample_with(exec, &filtered, params.voxel_size);
    if down.is_empty() {
        return Err(Error::ObjectNotVisible);
    }
    Ok(down)
}
