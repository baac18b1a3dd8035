//! Synthetic RGB-D renderer with exact ground truth.
//!
//! Every pixel casts one ray through its integer pixel coordinate, so a
//! noiseless depth reading deprojects (up to millimeter quantization) onto
//! the analytic surface. Depth is planar (distance along the optical axis).
//!
//! Scene JSON:
//!
//! ```json
//! {
//!   "objects": [
//!     {"shape": {"type": "cylinder", "radius": 0.04, "height": 0.25},
//!      "position": [0.0, 0.0, 1.0], "rotation_vector": [0.0, 0.0, 0.0],
//!      "class_label": "bottle", "albedo": [40, 140, 60]}
//!   ],
//!   "light_direction": [1.0, 0.3, -1.0],
//!   "ambient": 0.35
//! }
//! ```
//!
//! Shapes are centered on their local origin; a cylinder's axis is local z.
//! `rotation_vector` is axis times angle in radians (object to world).

use std::path::Path;

use nalgebra::{Matrix3, Rotation3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::{FrameId, Intrinsics, Pose, Vec3};
use crate::graspplan::principal_direction;
use crate::imaging::{ColorFrame, DepthFrame, FramePair, SegMask};
use crate::segmentation::Detection;

mod eval;

pub use eval::{evaluate_localization, write_eval_csv, EvalConfig, EvalReport, EvalRow, LocalizationStudy};

pub const BACKGROUND_RGB: [u8; 3] = [64, 64, 64];
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSphere {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Cylinder { radius: f64, height: f64 },
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
    /// Union of spheres.
    Blob { spheres: Vec<BlobSphere> },
}

impl Shape {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Cylinder { radius, height } => *radius > 0.0 && *height > 0.0,
            Shape::Box { size } => size.iter().all(|s| *s > 0.0),
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Blob { spheres } => {
                !spheres.is_empty()
                    && spheres
                        .iter()
                        .all(|s| s.radius > 0.0 && s.center.iter().all(|c| c.is_finite()))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shape {self:?}")))
        }
    }

    /// Nearest hit with `t > 0` of the local ray `o + t d`, with the outward normal.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Shape::Sphere { radius } => hit_sphere(&Vec3::zeros(), *radius, o, d),
            Shape::Blob { spheres } => spheres
                .iter()
                .filter_map(|s| hit_sphere(&Vec3::from(s.center), s.radius, o, d))
                .min_by(|a, b| a.0.total_cmp(&b.0)),
            Shape::Cylinder { radius, height } => hit_cylinder(*radius, height / 2.0, o, d),
            Shape::Box { size } => hit_box(&(Vec3::from(*size) / 2.0), o, d),
        }
    }

    fn contains(&self, p: &Vec3) -> bool {
        match self {
            Shape::Sphere { radius } => p.norm() < *radius,
            Shape::Blob { spheres } => spheres.iter().any(|s| (p - Vec3::from(s.center)).norm() < s.radius),
            Shape::Cylinder { radius, height } => p.xy().norm() < *radius && p.z.abs() < height / 2.0,
            Shape::Box { size } => (0..3).all(|i| p[i].abs() < size[i] / 2.0),
        }
    }

    /// Local-frame volume centroid and principal axis.
    fn mass_properties(&self) -> (Vec3, Vec3) {
        match self {
            Shape::Cylinder { .. } | Shape::Sphere { .. } => (Vec3::zeros(), Vec3::z()),
            Shape::Box { size } => {
                let i = (0..3).fold(0, |best, k| if size[k] > size[best] { k } else { best });
                let mut axis = Vec3::zeros();
                axis[i] = 1.0;
                (Vec3::zeros(), axis)
            }
            Shape::Blob { spheres } => blob_mass_properties(spheres),
        }
    }
}

fn hit_sphere(c: &Vec3, r: f64, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    let oc = o - c;
    let a = d.norm_squared();
    let b = oc.dot(d);
    let disc = b * b - a * (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = [(-b - s) / a, (-b + s) / a].into_iter().find(|t| *t > HIT_EPS)?;
    Some((t, (o + d * t - c) / r))
}

fn hit_cylinder(r: f64, hh: f64, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    let mut best: Option<(f64, Vec3)> = None;
    let mut offer = |t: f64, n: Vec3| {
        if t > HIT_EPS && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };
    let a = d.x * d.x + d.y * d.y;
    if a > 0.0 {
        let b = o.x * d.x + o.y * d.y;
        let disc = b * b - a * (o.x * o.x + o.y * o.y - r * r);
        if disc >= 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                let p = o + d * t;
                if p.z.abs() <= hh {
                    offer(t, Vec3::new(p.x / r, p.y / r, 0.0));
                }
            }
        }
    }
    if d.z != 0.0 {
        for zc in [-hh, hh] {
            let t = (zc - o.z) / d.z;
            let p = o + d * t;
            if p.x * p.x + p.y * p.y <= r * r {
                offer(t, Vec3::new(0.0, 0.0, zc.signum()));
            }
        }
    }
    best
}

fn hit_box(half: &Vec3, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut near_axis = 0;
    let mut far_axis = 0;
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((-half[i] - o[i]) / d[i], (half[i] - o[i]) / d[i]);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if lo > t_near {
            t_near = lo;
            near_axis = i;
        }
        if hi < t_far {
            t_far = hi;
            far_axis = i;
        }
    }
    if t_near > t_far || t_far <= HIT_EPS {
        return None;
    }
    let (t, axis) = if t_near > HIT_EPS { (t_near, near_axis) } else { (t_far, far_axis) };
    let mut n = Vec3::zeros();
    n[axis] = (o[axis] + d[axis] * t).signum();
    Some((t, n))
}

/// Grid integration over the union's bounding box (midpoint rule).
fn blob_mass_properties(spheres: &[BlobSphere]) -> (Vec3, Vec3) {
    const N: usize = 96;
    let lo = spheres.iter().fold(Vec3::repeat(f64::INFINITY), |m, s| {
        m.inf(&(Vec3::from(s.center) - Vec3::repeat(s.radius)))
    });
    let hi = spheres.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |m, s| {
        m.sup(&(Vec3::from(s.center) + Vec3::repeat(s.radius)))
    });
    let step = (hi - lo) / N as f64;
    let inside = |p: &Vec3| spheres.iter().any(|s| (p - Vec3::from(s.center)).norm_squared() < s.radius * s.radius);
    let mut cells = Vec::new();
    for i in 0..N {
        for j in 0..N {
            for k in 0..N {
                let p = lo + Vec3::new(
                    (i as f64 + 0.5) * step.x,
                    (j as f64 + 0.5) * step.y,
                    (k as f64 + 0.5) * step.z,
                );
                if inside(&p) {
                    cells.push(p);
                }
            }
        }
    }
    let n = cells.len() as f64;
    let mean = cells.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let cov = cells.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - mean;
        a + d * d.transpose()
    }) / n;
    (mean, principal_direction(cov))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// World position of the shape's local origin, meters.
    pub position: Vec3,
    #[serde(default = "Vec3::zeros")]
    pub rotation_vector: Vec3,
    pub class_label: String,
    pub albedo: [u8; 3],
}

impl SceneObject {
    pub fn rotation(&self) -> Matrix3<f64> {
        Rotation3::new(self.rotation_vector).into_inner()
    }

    /// World-frame volume centroid and unit principal axis.
    pub fn truth(&self) -> (Vec3, Vec3) {
        let r = self.rotation();
        let (c, a) = self.shape.mass_properties();
        (self.position + r * c, canonical(r * a))
    }

    fn local_ray(&self, r_t: &Matrix3<f64>, o: &Vec3, d: &Vec3) -> (Vec3, Vec3) {
        (r_t * (o - self.position), r_t * d)
    }
}

fn canonical(v: Vec3) -> Vec3 {
    let v = v.normalize();
    if v[v.iamax()] < 0.0 {
        -v
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    /// Direction the light travels, world frame.
    #[serde(default = "default_light")]
    pub light_direction: Vec3,
    #[serde(default = "default_ambient")]
    pub ambient: f64,
}

fn default_light() -> Vec3 {
    Vec3::new(1.0, 0.3, -1.0)
}

fn default_ambient() -> f64 {
    0.35
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            objects: Vec::new(),
            light_direction: default_light(),
            ambient: default_ambient(),
        }
    }
}

impl Scene {
    /// Upright bottle: cylinder of radius 4 cm and height 25 cm.
    pub fn bottle_at(position: Vec3) -> Self {
        Self {
            objects: vec![bottle(position)],
            ..Self::default()
        }
    }

    /// Seated teddy bear: body, head and a snout facing world -x.
    pub fn teddy_bear_at(position: Vec3) -> Self {
        let sphere = |c: [f64; 3], r: f64| BlobSphere { center: c, radius: r };
        Self {
            objects: vec![SceneObject {
                shape: Shape::Blob {
                    spheres: vec![
                        sphere([0.0, 0.0, -0.03], 0.09),
                        sphere([0.0, 0.0, 0.1], 0.065),
                        sphere([-0.055, 0.0, 0.09], 0.03),
                    ],
                },
                position,
                rotation_vector: Vec3::zeros(),
                class_label: "teddy bear".into(),
                albedo: [150, 100, 60],
            }],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for o in &self.objects {
            o.shape.validate()?;
            if o.class_label.is_empty() {
                return Err(Error::Config("scene object needs a class label".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.ambient) || !(self.light_direction.norm() > 0.0) {
            return Err(Error::Config("invalid lighting".into()));
        }
        if self.objects.len() >= usize::from(u16::MAX) {
            return Err(Error::Config("too many objects".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }
}

pub fn bottle(position: Vec3) -> SceneObject {
    SceneObject {
        shape: Shape::Cylinder {
            radius: 0.04,
            height: 0.25,
        },
        position,
        rotation_vector: Vec3::zeros(),
        class_label: "bottle".into(),
        albedo: [40, 140, 60],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Standard deviation of additive depth noise, meters.
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub class_label: String,
    pub centroid: Vec3,
    pub axis: Vec3,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub camera_pose: Pose,
    pub width: u32,
    pub height: u32,
    /// Row-major; 0 is background, `k` is scene object `k - 1`.
    pub object_ids: Vec<u16>,
    pub objects: Vec<ObjectTruth>,
}

impl GroundTruth {
    pub fn mask(&self, index: usize) -> SegMask {
        let id = index as u16 + 1;
        let bits = self.object_ids.iter().map(|&o| o == id).collect();
        SegMask::new(self.width, self.height, bits, self.objects[index].class_label.clone(), 1.0)
            .expect("ground-truth mask dims")
    }

    /// One score-1 detection per visible object, in scene order.
    pub fn detections(&self) -> Vec<Detection> {
        (0..self.objects.len())
            .filter(|&i| self.objects[i].pixel_count > 0)
            .map(|i| Detection::new(self.mask(i)))
            .collect()
    }
}

/// Capture metadata stamped on the rendered pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stamp {
    pub timestamp: u64,
    pub sequence: u64,
}

pub fn render(
    scene: &Scene,
    camera_pose: &Pose,
    intrinsics: &Intrinsics,
    noise: &NoiseConfig,
) -> Result<(FramePair, GroundTruth)> {
    render_with(Execution::default(), scene, camera_pose, intrinsics, noise, Stamp::default())
}

/// Renders one pair. Rows are independent (each has its own noise stream),
/// so the output does not depend on `exec`.
pub fn render_with(
    exec: Execution,
    scene: &Scene,
    camera_pose: &Pose,
    intrinsics: &Intrinsics,
    noise: &NoiseConfig,
    stamp: Stamp,
) -> Result<(FramePair, GroundTruth)> {
    scene.validate()?;
    if (camera_pose.from_frame(), camera_pose.to_frame()) != (FrameId::Camera, FrameId::World) {
        return Err(Error::contract("render needs a camera-to-world pose"));
    }
    if !(noise.sigma >= 0.0) {
        return Err(Error::Config("noise sigma must be nonnegative".into()));
    }
    let origin = *camera_pose.translation();
    let locals: Vec<Matrix3<f64>> = scene.objects.iter().map(|o| o.rotation().transpose()).collect();
    for (o, r_t) in scene.objects.iter().zip(&locals) {
        if o.shape.contains(&(r_t * (origin - o.position))) {
            return Err(Error::contract(format!("camera is inside the {}", o.class_label)));
        }
    }
    let light = scene.light_direction.normalize();
    let (w, h) = (intrinsics.width, intrinsics.height);
    let cam_r = *camera_pose.rotation();
    let gauss = (noise.sigma > 0.0).then(|| Normal::new(0.0, noise.sigma).expect("finite sigma"));

    let rows = exec::map_range(exec, h as usize, |v| {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        rng.set_stream(v as u64);
        let mut color = Vec::with_capacity(w as usize * 3);
        let mut depth = Vec::with_capacity(w as usize);
        let mut ids = Vec::with_capacity(w as usize);
        for u in 0..w {
            let d_cam = Vec3::new(
                (f64::from(u) - intrinsics.cx) / intrinsics.fx,
                (v as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let dir = cam_r * d_cam;
            let mut hit: Option<(f64, Vec3, usize)> = None;
            for (k, (obj, r_t)) in scene.objects.iter().zip(&locals).enumerate() {
                let (o_l, d_l) = obj.local_ray(r_t, &origin, &dir);
                if let Some((t, n_l)) = obj.shape.intersect(&o_l, &d_l) {
                    if hit.is_none_or(|(bt, _, _)| t < bt) {
                        hit = Some((t, r_t.transpose() * n_l, k));
                    }
                }
            }
            let Some((t, n, k)) = hit else {
                color.extend_from_slice(&BACKGROUND_RGB);
                depth.push(0);
                ids.push(0);
                continue;
            };
            let n = if n.dot(&dir) > 0.0 { -n } else { n };
            let lambert = (-n.dot(&light)).max(0.0);
            let shade = scene.ambient + (1.0 - scene.ambient) * lambert;
            for c in scene.objects[k].albedo {
                color.push((f64::from(c) * shade).round().clamp(0.0, 255.0) as u8);
            }
            let z = match &gauss {
                Some(g) => t + g.sample(&mut rng),
                None => t,
            };
            let raw = (z / intrinsics.depth_scale).round();
            depth.push(if raw > 0.0 && raw <= f64::from(u16::MAX) { raw as u16 } else { 0 });
            ids.push(k as u16 + 1);
        }
        (color, depth, ids)
    });

    let mut color = Vec::with_capacity(w as usize * h as usize * 3);
    let mut depth = Vec::with_capacity(w as usize * h as usize);
    let mut object_ids = Vec::with_capacity(w as usize * h as usize);
    for (c, d, i) in rows {
        color.extend(c);
        depth.extend(d);
        object_ids.extend(i);
    }
    let mut counts = vec![0usize; scene.objects.len()];
    for &id in &object_ids {
        if id > 0 {
            counts[usize::from(id) - 1] += 1;
        }
    }
    let objects = scene
        .objects
        .iter()
        .zip(counts)
        .map(|(o, pixel_count)| {
            let (centroid, axis) = o.truth();
            ObjectTruth {
                class_label: o.class_label.clone(),
                centroid,
                axis,
                pixel_count,
            }
        })
        .collect();
    let pair = FramePair::new(
        ColorFrame::new(w, h, color, stamp.timestamp)?,
        DepthFrame::new(w, h, depth, stamp.timestamp)?,
        *intrinsics,
        stamp.sequence,
    )?;
    let truth = GroundTruth {
        camera_pose: camera_pose.clone(),
        width: w,
        height: h,
        object_ids,
        objects,
    };
    Ok((pair, truth))
}

/// Camera poses on a grid relative to `target`: the camera sits `x` behind
/// the target along world x and `y` to the side, looking along +x.
/// Row-major with x outer; one step along an axis means its range minimum.
pub fn pose_grid(x_range: (f64, f64), y_range: (f64, f64), steps: (usize, usize), target: Vec3) -> Result<Vec<Pose>> {
    if !(x_range.0 <= x_range.1) || !(y_range.0 <= y_range.1) {
        return Err(Error::contract("pose grid ranges must be ordered"));
    }
    let axis = |(lo, hi): (f64, f64), n: usize| -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![lo],
            n => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        }
    };
    let ys = axis(y_range, steps.1);
    Ok(axis(x_range, steps.0)
        .into_iter()
        .flat_map(|x| ys.iter().map(move |&y| Pose::camera_facing_x(target + Vec3::new(-x, y, 0.0))))
        .collect())
}
