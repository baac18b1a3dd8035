//! ASCII PLY I/O.
//!
//! ```text
//! ply
//! format ascii 1.0
//! comment frame <camera|body|world>
//! element vertex <N>
//! property double x
//! property double y
//! property double z
//! property uchar red      (only when the cloud has colors)
//! property uchar green
//! property uchar blue
//! end_header
//! <x> <y> <z> [<r> <g> <b>]   (one line per vertex)
//! ```
//!
//! Coordinates are written with shortest round-trip formatting, so
//! `read_ply(write_ply(c)) == c` exactly.

use std::fmt::Write as _;

use super::{PointCloud, Rgb};
use crate::error::{Error, Result};
use crate::geometry::{FrameId, Vec3};

pub fn write_ply(c: &PointCloud) -> String {
    let frame = match c.frame {
        FrameId::Camera => "camera",
        FrameId::Body => "body",
        FrameId::World => "world",
    };
    let mut s = String::with_capacity(64 + c.len() * 48);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "comment frame {frame}");
    let _ = writeln!(s, "element vertex {}", c.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if c.colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in c.points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(cols) = &c.colors {
            let [r, g, b] = cols[i];
            let _ = write!(s, " {r} {g} {b}");
        }
        s.push('\n');
    }
    s
}

pub fn read_ply(text: &str) -> Result<PointCloud> {
    let bad = |m: &str| Error::protocol(format!("ply: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }
    if lines.next() != Some("format ascii 1.0") {
        return Err(bad("only ascii 1.0 is supported"));
    }
    let mut frame = FrameId::Camera;
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("end_header") => break,
            Some("comment") => {
                if parts.next() == Some("frame") {
                    frame = match parts.next() {
                        Some("camera") => FrameId::Camera,
                        Some("body") => FrameId::Body,
                        Some("world") => FrameId::World,
                        _ => return Err(bad("unknown frame")),
                    };
                }
            }
            Some("element") => {
                if parts.next() != Some("vertex") {
                    return Err(bad("only vertex elements are supported"));
                }
                count = Some(
                    parts
                        .next()
                        .and_then(|n| n.parse::<usize>().ok())
                        .ok_or_else(|| bad("bad vertex count"))?,
                );
            }
            Some("property") => props.push(parts.last().unwrap_or_default().to_string()),
            _ => return Err(bad("unexpected header line")),
        }
    }
    let count = count.ok_or_else(|| bad("missing vertex element"))?;
    let colored = match props.as_slice() {
        [x, y, z] if x == "x" && y == "y" && z == "z" => false,
        [x, y, z, r, g, b] if x == "x" && y == "y" && z == "z" && r == "red" && g == "green" && b == "blue" => true,
        _ => return Err(bad("unsupported property layout")),
    };
    let mut points = Vec::with_capacity(count);
    let mut colors: Vec<Rgb> = Vec::new();
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != if colored { 6 } else { 3 } {
            return Err(bad("wrong field count"));
        }
        let xyz: Vec<f64> = f[..3]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("bad coordinate"))?;
        points.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
        if colored {
            let mut rgb = [0u8; 3];
            for k in 0..3 {
                rgb[k] = f[3 + k].parse().map_err(|_| bad("bad color"))?;
            }
            colors.push(rgb);
        }
    }
    PointCloud::new(points, colored.then_some(colors), frame)
}
