//! Geometry-based grasp planning on a cleaned object cloud.
//!
//! 1. centroid and principal axis of the visible cloud;
//! 2. duplicate the cloud rotated 180° about the principal axis, which
//!    stands in for the unseen back of an axially symmetric object;
//! 3. centroid and axis of the combined cloud;
//! 4. contact candidates: combined points inside a slab normal to the axis
//!    through the combined centroid.
//!
//! A half-turn about a line through `pivot` leaves the combined centroid on
//! that line, so the pivot decides where the object's center ends up. The
//! visible surface of an axially symmetric object has a roughly circular
//! cross-section, so its axis sits half the visible width behind the front
//! surface. The pivot is placed there, on the line of sight.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{FrameId, Vec3};

pub const DEFAULT_SLAB_THICKNESS: f64 = 0.025;
const TIE_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraspAssumptions {
    /// Gripper aperture, meters.
    pub max_extent: f64,
    /// Kilograms. Informational; mass is not observable from a point cloud.
    pub max_mass: f64,
    pub axially_symmetric: bool,
}

impl Default for GraspAssumptions {
    fn default() -> Self {
        Self {
            max_extent: 0.25,
            max_mass: 0.5,
            axially_symmetric: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspPlan {
    /// Centroid of the combined (visible + mirrored) cloud.
    pub centroid: Vec3,
    /// Unit principal axis of the combined cloud.
    pub axis: Vec3,
    pub candidates: PointCloud,
    pub slab_thickness: f64,
    pub source_count: usize,
    /// Centroid of the visible cloud alone.
    pub visible_centroid: Vec3,
    /// Anchor of the half-turn axis.
    pub pivot: Vec3,
}

impl GraspPlan {
    /// Compact JSON record; candidates referenced by a PLY sidecar path.
    pub fn summary(&self, candidates_ply: Option<&str>) -> GraspPlanSummary {
        GraspPlanSummary {
            centroid: self.centroid,
            axis: self.axis,
            slab_thickness: self.slab_thickness,
            candidate_count: self.candidates.len(),
            source_count: self.source_count,
            visible_centroid: self.visible_centroid,
            candidates_ply: candidates_ply.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspPlanSummary {
    pub centroid: Vec3,
    pub axis: Vec3,
    pub slab_thickness: f64,
    pub candidate_count: usize,
    pub source_count: usize,
    pub visible_centroid: Vec3,
    pub candidates_ply: Option<String>,
}

pub fn centroid(c: &PointCloud) -> Result<Vec3> {
    if c.is_empty() {
        return Err(Error::contract("centroid of empty cloud"));
    }
    let sum = c.points().iter().fold(Vec3::zeros(), |acc, p| acc + p);
    Ok(sum / c.len() as f64)
}

fn covariance(c: &PointCloud, mean: &Vec3) -> Matrix3<f64> {
    let mut cov = Matrix3::zeros();
    for p in c.points() {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov / c.len() as f64
}

/// `(eigenvalue, unit eigenvector)` sorted by decreasing eigenvalue.
fn eigen_sorted(cov: Matrix3<f64>) -> [(f64, Vec3); 3] {
    let eig = SymmetricEigen::new(cov);
    let mut pairs: Vec<(f64, Vec3)> = (0..3)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).normalize()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    [pairs[0], pairs[1], pairs[2]]
}

/// Flips `v` so its largest-magnitude component is positive.
fn canonical_sign(v: Vec3) -> Vec3 {
    let i = v.iamax();
    if v[i] < 0.0 {
        -v
    } else {
        v
    }
}

fn lex_greater(a: &Vec3, b: &Vec3) -> bool {
    for k in 0..3 {
        if a[k] != b[k] {
            return a[k] > b[k];
        }
    }
    false
}

/// Picks the dominant axis; near-ties go to the eigenvector closest to `z`,
/// then to the lexicographically largest.
fn dominant_axis(eig: &[(f64, Vec3); 3]) -> Vec3 {
    let top = eig[0].0;
    let tol = TIE_REL_TOL * top.abs().max(f64::MIN_POSITIVE);
    let mut best = canonical_sign(eig[0].1);
    for (val, vec) in &eig[1..] {
        if top - val > tol {
            break;
        }
        let cand = canonical_sign(*vec);
        let (zc, zb) = (cand.z.abs(), best.z.abs());
        if zc > zb + 1e-12 || ((zc - zb).abs() <= 1e-12 && lex_greater(&cand, &best)) {
            best = cand;
        }
    }
    best
}

/// Dominant eigenvector of a covariance matrix, same tie-break and sign rules
/// as [`principal_axis`].
pub(crate) fn principal_direction(cov: Matrix3<f64>) -> Vec3 {
    dominant_axis(&eigen_sorted(cov))
}

/// Unit eigenvector of the point covariance with the largest eigenvalue.
pub fn principal_axis(c: &PointCloud) -> Result<Vec3> {
    if c.len() < 3 {
        return Err(Error::contract(format!("principal axis needs >= 3 points, got {}", c.len())));
    }
    let mean = centroid(c)?;
    Ok(dominant_axis(&eigen_sorted(covariance(c, &mean))))
}

/// Half-turn of every point about the line `pivot + t * axis`.
pub fn mirror_about_axis(c: &PointCloud, axis: &Vec3, pivot: &Vec3) -> PointCloud {
    let r = 2.0 * axis * axis.transpose() - Matrix3::identity();
    c.map_points(|p| pivot + r * (p - pivot))
}

/// Half-width of the central strip, as a fraction of the lateral extent,
/// whose mean depth is taken as the front of the object.
const FRONT_BAND: f64 = 0.1;

/// Anchor for the half-turn: on the line of sight (projected perpendicular
/// to `axis`) through the centroid, half the lateral extent behind the front
/// surface. For a circular cross-section that is the symmetry axis.
pub fn mirror_pivot(c: &PointCloud, center: &Vec3, axis: &Vec3, viewpoint: &Vec3) -> Vec3 {
    let view = center - viewpoint;
    let lateral = view - axis * axis.dot(&view);
    let n = lateral.norm();
    let pts = c.points();
    if n < 1e-9 || pts.is_empty() {
        // looking straight down the axis: front and back are indistinguishable
        return *center;
    }
    let w = lateral / n;
    let side = axis.cross(&w);
    let s: Vec<f64> = pts.iter().map(|p| (p - center).dot(&side)).collect();
    let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mid = 0.5 * (lo + hi);
    let band = FRONT_BAND * (hi - lo);
    // depths of the strip points on the near side of the centroid
    let (sum, k) = pts
        .iter()
        .zip(&s)
        .filter(|(_, &v)| (v - mid).abs() <= band)
        .map(|(p, _)| (p - center).dot(&w))
        .filter(|&d| d <= 0.0)
        .fold((0.0, 0usize), |(sum, k), d| (sum + d, k + 1));
    if k == 0 {
        return *center;
    }
    let front = sum / k as f64;
    center + w * (front + 0.5 * (hi - lo))
}

/// Plans a grasp on a camera-frame cloud (viewpoint at the origin).
pub fn plan_grasp(c: &PointCloud, assumptions: &GraspAssumptions, slab_thickness: f64) -> Result<GraspPlan> {
    if c.frame != FrameId::Camera {
        return Err(Error::contract(format!(
            "plan_grasp expects a camera-frame cloud, got {:?}; use plan_grasp_from",
            c.frame
        )));
    }
    plan_grasp_from(c, &Vec3::zeros(), assumptions, slab_thickness)
}

/// Plans a grasp on a cloud observed from `viewpoint` (same frame as the cloud).
pub fn plan_grasp_from(
    c: &PointCloud,
    viewpoint: &Vec3,
    assumptions: &GraspAssumptions,
    slab_thickness: f64,
) -> Result<GraspPlan> {
    if !(slab_thickness > 0.0) {
        return Err(Error::contract(format!("slab thickness {slab_thickness} must be positive")));
    }
    if !(assumptions.max_extent > 0.0) {
        return Err(Error::contract("gripper aperture must be positive"));
    }
    // 1
    let visible_centroid = centroid(c)?;
    let axis = principal_axis(c)?;
    // 2
    let pivot = mirror_pivot(c, &visible_centroid, &axis, viewpoint);
    let combined = c.union(&mirror_about_axis(c, &axis, &pivot));
    // 3
    let center = centroid(&combined)?;
    let eig = eigen_sorted(covariance(&combined, &center));
    let new_axis = dominant_axis(&eig);
    let extent = perpendicular_extent(&combined, &new_axis);
    if extent > assumptions.max_extent {
        return Err(Error::ExceedsAperture {
            extent,
            aperture: assumptions.max_extent,
        });
    }
    // 4
    let half = slab_thickness / 2.0;
    let along: Vec<f64> = combined.points().iter().map(|p| (p - center).dot(&new_axis)).collect();
    let candidates = combined.select(|i| along[i].abs() <= half);
    if candidates.is_empty() {
        return Err(Error::NoValidGrasp);
    }
    Ok(GraspPlan {
        centroid: center,
        axis: new_axis,
        candidates,
        slab_thickness,
        source_count: c.len(),
        visible_centroid,
        pivot,
    })
}

/// Widest extent of the cloud across the axis, sampled over eight directions
/// in the normal plane.
fn perpendicular_extent(c: &PointCloud, axis: &Vec3) -> f64 {
    // any orthonormal pair spanning the plane normal to the axis
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = axis.cross(&helper).normalize();
    let e2 = axis.cross(&e1);
    let width = |dir: &Vec3| {
        let (lo, hi) = c.points().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let t = p.dot(dir);
            (lo.min(t), hi.max(t))
        });
        hi - lo
    };
    (0..8)
        .map(|k| {
            let a = std::f64::consts::PI * f64::from(k) / 8.0;
            width(&(e1 * a.cos() + e2 * a.sin()))
        })
        .fold(0.0, f64::max)
}
