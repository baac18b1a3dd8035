//! Color and depth frame containers, mask application, and the hybrid codec:
//! lossy baseline JPEG for color, lossless 16-bit grayscale PNG for depth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;

mod codec;

pub use codec::{
    decode_color, decode_depth, decode_mask, encode_color, encode_color_with, encode_depth, encode_mask, psnr, ChromaSubsampling, JpegOptions,
    DEFAULT_JPEG_QUALITY, DEFAULT_PNG_LEVEL,
};

/// Default bound on `|color.timestamp - depth.timestamp|` within a pair.
pub const DEFAULT_PAIR_SKEW_NS: u64 = 10_000_000;

/// Row-major 8-bit RGB frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorFrame {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    /// Monotonic capture time in nanoseconds.
    pub timestamp: u64,
}

impl ColorFrame {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, timestamp: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract("color frame has zero dimension"));
        }
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(Error::contract(format!(
                "color buffer length {} != {width}x{height}x3",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            timestamp,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3], timestamp: u64) -> Self {
        let pixels = rgb.repeat(width as usize * height as usize);
        Self::new(width, height, pixels, timestamp).expect("filled frame dims")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, u: u32, v: u32) -> [u8; 3] {
        let i = (v as usize * self.width as usize + u as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Row-major Z16 depth frame; 0 means "no measurement".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthFrame {
    width: u32,
    height: u32,
    values: Vec<u16>,
    pub timestamp: u64,
}

impl DepthFrame {
    pub fn new(width: u32, height: u32, values: Vec<u16>, timestamp: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract("depth frame has zero dimension"));
        }
        if values.len() != width as usize * height as usize {
            return Err(Error::contract(format!(
                "depth buffer length {} != {width}x{height}",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            timestamp,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    pub fn at(&self, u: u32, v: u32) -> u16 {
        self.values[v as usize * self.width as usize + u as usize]
    }
}

/// Per-pixel object mask produced by instance segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    pub class_label: String,
    pub score: f64,
}

impl SegMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>, class_label: impl Into<String>, score: f64) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::contract(format!(
                "mask length {} != {width}x{height}",
                bits.len()
            )));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::contract(format!("mask score {score} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            bits,
            class_label: class_label.into(),
            score,
        })
    }

    pub fn filled(width: u32, height: u32, value: bool, class_label: &str) -> Self {
        Self::new(width, height, vec![value; width as usize * height as usize], class_label, 1.0)
            .expect("filled mask dims")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, u: u32, v: u32) -> bool {
        self.bits[v as usize * self.width as usize + u as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Tight bounding rectangle `(u_min, v_min, u_max, v_max)`, inclusive.
    pub fn bbox(&self) -> Option<PixelRect> {
        let w = self.width as usize;
        let mut rect: Option<PixelRect> = None;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            let (u, v) = ((i % w) as u32, (i / w) as u32);
            rect = Some(match rect {
                None => PixelRect {
                    u_min: u,
                    v_min: v,
                    u_max: u,
                    v_max: v,
                },
                Some(r) => PixelRect {
                    u_min: r.u_min.min(u),
                    v_min: r.v_min.min(v),
                    u_max: r.u_max.max(u),
                    v_max: r.v_max.max(v),
                },
            });
        }
        rect
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub u_min: u32,
    pub v_min: u32,
    pub u_max: u32,
    pub v_max: u32,
}

impl PixelRect {
    pub fn area(&self) -> u64 {
        u64::from(self.u_max - self.u_min + 1) * u64::from(self.v_max - self.v_min + 1)
    }

    pub fn iou(&self, other: &PixelRect) -> f64 {
        let u0 = self.u_min.max(other.u_min);
        let v0 = self.v_min.max(other.v_min);
        let u1 = self.u_max.min(other.u_max);
        let v1 = self.v_max.min(other.v_max);
        if u0 > u1 || v0 > v1 {
            return 0.0;
        }
        let inter = u64::from(u1 - u0 + 1) * u64::from(v1 - v0 + 1);
        inter as f64 / (self.area() + other.area() - inter) as f64
    }
}

/// One synchronized color + depth capture.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub color: ColorFrame,
    pub depth: DepthFrame,
    pub intrinsics: Intrinsics,
    pub sequence: u64,
}

impl FramePair {
    pub fn new(color: ColorFrame, depth: DepthFrame, intrinsics: Intrinsics, sequence: u64) -> Result<Self> {
        Self::with_skew_bound(color, depth, intrinsics, sequence, DEFAULT_PAIR_SKEW_NS)
    }

    pub fn with_skew_bound(
        color: ColorFrame,
        depth: DepthFrame,
        intrinsics: Intrinsics,
        sequence: u64,
        max_skew_ns: u64,
    ) -> Result<Self> {
        if (color.width, color.height) != (depth.width, depth.height) {
            return Err(Error::contract(format!(
                "color {}x{} and depth {}x{} differ",
                color.width, color.height, depth.width, depth.height
            )));
        }
        if (intrinsics.width, intrinsics.height) != (color.width, color.height) {
            return Err(Error::contract("intrinsics dimensions differ from frames"));
        }
        let skew = color.timestamp.abs_diff(depth.timestamp);
        if skew > max_skew_ns {
            return Err(Error::contract(format!(
                "pair timestamp skew {skew} ns exceeds {max_skew_ns} ns"
            )));
        }
        Ok(Self {
            color,
            depth,
            intrinsics,
            sequence,
        })
    }
}

/// Blacks out every pixel where the mask is false.
pub fn apply_mask(c: &ColorFrame, m: &SegMask) -> Result<ColorFrame> {
    if (c.width, c.height) != (m.width, m.height) {
        return Err(Error::contract(format!(
            "mask {}x{} does not match frame {}x{}",
            m.width, m.height, c.width, c.height
        )));
    }
    let mut pixels = c.pixels.clone();
    for (px, &keep) in pixels.chunks_exact_mut(3).zip(&m.bits) {
        if !keep {
            px.fill(0);
        }
    }
    Ok(ColorFrame {
        width: c.width,
        height: c.height,
        pixels,
        timestamp: c.timestamp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn checker(w: u32, h: u32) -> SegMask {
        let bits = (0..h).flat_map(|v| (0..w).map(move |u| (u + v) % 2 == 0)).collect();
        SegMask::new(w, h, bits, "bottle", 0.9).unwrap()
    }

    #[test]
    fn all_true_mask_is_identity() {
        let c = ColorFrame::new(3, 2, (0..18).collect(), 5).unwrap();
        assert_eq!(apply_mask(&c, &SegMask::filled(3, 2, true, "x")).unwrap(), c);
    }

    #[test]
    fn all_false_mask_is_black() {
        let c = ColorFrame::new(3, 2, (1..19).collect(), 5).unwrap();
        let out = apply_mask(&c, &SegMask::filled(3, 2, false, "x")).unwrap();
        assert!(out.pixels().iter().all(|p| *p == 0));
        assert_eq!(out.timestamp, 5);
    }

    #[test]
    fn checkerboard_mask_matches_per_pixel_scan() {
        let (w, h) = (7, 5);
        let c = ColorFrame::filled(w, h, [128, 128, 128], 0);
        let m = checker(w, h);
        let out = apply_mask(&c, &m).unwrap();
        for v in 0..h {
            for u in 0..w {
                let want = if (u + v) % 2 == 0 { [128; 3] } else { [0; 3] };
                assert_eq!(out.pixel(u, v), want, "({u},{v})");
            }
        }
    }

    #[test]
    fn mask_dimension_mismatch() {
        let c = ColorFrame::filled(4, 4, [1, 1, 1], 0);
        assert!(matches!(apply_mask(&c, &checker(4, 3)), Err(Error::Contract(_))));
    }

    #[test]
    fn frame_constructors_validate() {
        assert!(ColorFrame::new(2, 2, vec![0; 11], 0).is_err());
        assert!(DepthFrame::new(2, 2, vec![0; 3], 0).is_err());
        assert!(SegMask::new(2, 2, vec![true; 4], "x", 1.5).is_err());
    }

    #[test]
    fn frame_pair_checks_dims_and_skew() {
        let i = Intrinsics::new(4, 3, 10.0, 10.0, 2.0, 1.5, 0.001).unwrap();
        let c = ColorFrame::filled(4, 3, [9, 9, 9], 1_000_000);
        let d = DepthFrame::new(4, 3, vec![1; 12], 0).unwrap();
        assert!(FramePair::new(c.clone(), d.clone(), i, 0).is_ok());
        let late = DepthFrame {
            timestamp: 20_000_000,
            ..d.clone()
        };
        assert!(FramePair::new(c.clone(), late.clone(), i, 0).is_err());
        assert!(FramePair::with_skew_bound(c.clone(), late, i, 0, 30_000_000).is_ok());
        let small = DepthFrame::new(2, 3, vec![1; 6], 0).unwrap();
        assert!(FramePair::new(c, small, i, 0).is_err());
    }

    #[test]
    fn bbox_is_tight() {
        let mut bits = vec![false; 20];
        bits[5 + 1] = true; // (1,1)
        bits[3 * 5 + 3] = true; // (3,3)
        let m = SegMask::new(5, 4, bits, "x", 1.0).unwrap();
        assert_eq!(
            m.bbox(),
            Some(PixelRect {
                u_min: 1,
                v_min: 1,
                u_max: 3,
                v_max: 3
            })
        );
        assert_eq!(SegMask::filled(3, 3, false, "x").bbox(), None);
        let r = m.bbox().unwrap();
        assert_eq!(r.iou(&r), 1.0);
    }

    proptest! {
        #[test]
        fn apply_mask_is_idempotent(w in 1u32..12, h in 1u32..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = ColorFrame::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect(), 0).unwrap();
            let m = SegMask::new(w, h, (0..w * h).map(|_| rng.random()).collect(), "x", 0.5).unwrap();
            let once = apply_mask(&c, &m).unwrap();
            prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
        }
    }
}
