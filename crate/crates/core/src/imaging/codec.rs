use std::io::Cursor;

use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use png::{BitDepth, DeflateCompression};
use serde::{Deserialize, Serialize};
use zune_core::colorspace::ColorSpace;
use zune_core::options::DecoderOptions;
use zune_jpeg::JpegDecoder;

use super::{ColorFrame, DepthFrame, SegMask};
use crate::error::{CodecStage, Error, Result};

pub const DEFAULT_JPEG_QUALITY: u8 = 95;
pub const DEFAULT_PNG_LEVEL: u8 = 2;

/// JPEG chroma subsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ChromaSubsampling {
    #[serde(rename = "4:4:4")]
    S444,
    #[serde(rename = "4:2:2")]
    S422,
    #[default]
    #[serde(rename = "4:2:0")]
    S420,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JpegOptions {
    pub quality: u8,
    pub subsampling: ChromaSubsampling,
}

impl Default for JpegOptions {
    fn default() -> Self {
        Self {
            quality: DEFAULT_JPEG_QUALITY,
            subsampling: ChromaSubsampling::default(),
        }
    }
}

pub fn encode_color(c: &ColorFrame, quality: u8) -> Result<Vec<u8>> {
    encode_color_with(
        c,
        &JpegOptions {
            quality,
            ..JpegOptions::default()
        },
    )
}

/// Baseline JPEG encode.
pub fn encode_color_with(c: &ColorFrame, opts: &JpegOptions) -> Result<Vec<u8>> {
    let stage = CodecStage::EncodeColor;
    if !(1..=100).contains(&opts.quality) {
        return Err(Error::codec(stage, format!("quality {} outside [1,100]", opts.quality)));
    }
    let (w, h) = match (u16::try_from(c.width), u16::try_from(c.height)) {
        (Ok(w), Ok(h)) => (w, h),
        _ => return Err(Error::codec(stage, "frame exceeds 65535 pixels per side")),
    };
    let mut out = Vec::with_capacity(c.pixels.len() / 8);
    let mut enc = Encoder::new(&mut out, opts.quality);
    enc.set_sampling_factor(match opts.subsampling {
        ChromaSubsampling::S444 => SamplingFactor::R_4_4_4,
        ChromaSubsampling::S422 => SamplingFactor::R_4_2_2,
        ChromaSubsampling::S420 => SamplingFactor::R_4_2_0,
    });
    enc.encode(&c.pixels, w, h, ColorType::Rgb)
        .map_err(|e| Error::codec(stage, e))?;
    Ok(out)
}

/// Decodes a JPEG stream into an RGB frame. The returned timestamp is 0;
/// capture times travel in the wire header.
pub fn decode_color(bytes: &[u8]) -> Result<ColorFrame> {
    let stage = CodecStage::DecodeColor;
    let opts = DecoderOptions::default()
        .set_strict_mode(true)
        .jpeg_set_out_colorspace(ColorSpace::RGB);
    let mut dec = JpegDecoder::new_with_options(Cursor::new(bytes), opts);
    let pixels = dec.decode().map_err(|e| Error::codec(stage, format!("{e:?}")))?;
    let info = dec.info().ok_or_else(|| Error::codec(stage, "missing header"))?;
    // strict mode still tolerates a stream cut inside the entropy-coded data
    if !bytes.ends_with(&[0xFF, 0xD9]) {
        return Err(Error::codec(stage, "missing end-of-image marker"));
    }
    ColorFrame::new(u32::from(info.width), u32::from(info.height), pixels, 0)
        .map_err(|e| Error::codec(stage, e))
}

/// Lossless 16-bit grayscale PNG encode. `level` 0 stores uncompressed,
/// 1..=9 are zlib levels.
pub fn encode_depth(d: &DepthFrame, level: u8) -> Result<Vec<u8>> {
    let stage = CodecStage::EncodeDepth;
    if level > 9 {
        return Err(Error::codec(stage, format!("compression level {level} outside [0,9]")));
    }
    let mut out = Vec::with_capacity(d.values.len());
    {
        let mut enc = png::Encoder::new(&mut out, d.width, d.height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(BitDepth::Sixteen);
        enc.set_deflate_compression(match level {
            0 => DeflateCompression::NoCompression,
            n => DeflateCompression::Level(n),
        });
        let mut writer = enc.write_header().map_err(|e| Error::codec(stage, e))?;
        let mut be = Vec::with_capacity(d.values.len() * 2);
        for v in &d.values {
            be.extend_from_slice(&v.to_be_bytes());
        }
        writer.write_image_data(&be).map_err(|e| Error::codec(stage, e))?;
        writer.finish().map_err(|e| Error::codec(stage, e))?;
    }
    Ok(out)
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthFrame> {
    let stage = CodecStage::DecodeDepth;
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| Error::codec(stage, e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != BitDepth::Sixteen {
        return Err(Error::codec(
            stage,
            format!("expected 16-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width, info.height);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::codec(stage, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::codec(stage, e))?;
    reader.finish().map_err(|e| Error::codec(stage, e))?;
    let values = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    DepthFrame::new(w, h, values, 0).map_err(|e| Error::codec(stage, e))
}

/// 8-bit grayscale PNG of a mask: 255 inside, 0 outside.
pub fn encode_mask(m: &SegMask) -> Result<Vec<u8>> {
    let stage = CodecStage::Mask;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, m.width, m.height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::codec(stage, e))?;
        let data: Vec<u8> = m.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        writer.write_image_data(&data).map_err(|e| Error::codec(stage, e))?;
        writer.finish().map_err(|e| Error::codec(stage, e))?;
    }
    Ok(out)
}

/// Reads an 8-bit grayscale PNG; every nonzero pixel is inside the mask.
pub fn decode_mask(bytes: &[u8], class_label: &str) -> Result<SegMask> {
    let stage = CodecStage::Mask;
    let mut reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| Error::codec(stage, e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != BitDepth::Eight {
        return Err(Error::codec(stage, "mask must be 8-bit grayscale"));
    }
    let (w, h) = (info.width, info.height);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::codec(stage, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::codec(stage, e))?;
    let bits = buf[..frame.buffer_size()].iter().map(|&v| v != 0).collect();
    SegMask::new(w, h, bits, class_label, 1.0).map_err(|e| Error::codec(stage, e))
}

/// Peak signal-to-noise ratio in dB over all channels; infinite for equal buffers.
pub fn psnr(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr needs equal-length buffers");
    let sse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    if sse == 0.0 {
        return f64::INFINITY;
    }
    let mse = sse / a.len() as f64;
    10.0 * (255.0 * 255.0 / mse).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: u32, h: u32) -> DepthFrame {
        let n = (w * h) as usize;
        let values = (0..n).map(|i| ((i as u64 * 65535) / (n as u64 - 1)) as u16).collect();
        DepthFrame::new(w, h, values, 0).unwrap()
    }

    #[test]
    fn gray_frame_psnr() {
        let c = ColorFrame::filled(640, 480, [128, 128, 128], 7);
        let bytes = encode_color(&c, 95).unwrap();
        let back = decode_color(&bytes).unwrap();
        assert_eq!((back.width(), back.height()), (640, 480));
        assert!(psnr(c.pixels(), back.pixels()) >= 45.0);
    }

    #[test]
    fn one_by_one_frame() {
        let c = ColorFrame::filled(1, 1, [200, 40, 90], 0);
        let back = decode_color(&encode_color(&c, 95).unwrap()).unwrap();
        assert_eq!((back.width(), back.height()), (1, 1));
        for (a, b) in c.pixels().iter().zip(back.pixels()) {
            assert!((i16::from(*a) - i16::from(*b)).abs() <= 8, "{a} vs {b}");
        }
    }

    #[test]
    fn subsampling_modes_decode() {
        let c = ColorFrame::new(17, 9, (0..17 * 9 * 3).map(|i| (i * 7 % 251) as u8).collect(), 0).unwrap();
        for s in [ChromaSubsampling::S444, ChromaSubsampling::S422, ChromaSubsampling::S420] {
            let bytes = encode_color_with(&c, &JpegOptions { quality: 95, subsampling: s }).unwrap();
            let back = decode_color(&bytes).unwrap();
            assert_eq!((back.width(), back.height()), (17, 9));
        }
    }

    #[test]
    fn rejects_bad_quality_and_level() {
        let c = ColorFrame::filled(2, 2, [1, 2, 3], 0);
        assert!(matches!(
            encode_color(&c, 0),
            Err(Error::Codec { stage: CodecStage::EncodeColor, .. })
        ));
        assert!(encode_color(&c, 101).is_err());
        let d = DepthFrame::new(2, 2, vec![1; 4], 0).unwrap();
        assert!(matches!(
            encode_depth(&d, 10),
            Err(Error::Codec { stage: CodecStage::EncodeDepth, .. })
        ));
    }

    #[test]
    fn depth_zero_frame_roundtrip() {
        let d = DepthFrame::new(64, 48, vec![0; 64 * 48], 0).unwrap();
        let bytes = encode_depth(&d, 2).unwrap();
        assert!(bytes.starts_with(b"\x89PNG\r\n\x1a\n"));
        assert_eq!(decode_depth(&bytes).unwrap(), d);
    }

    #[test]
    fn depth_ramp_roundtrip_and_size() {
        let d = ramp(640, 480);
        assert_eq!(d.values()[0], 0);
        assert_eq!(*d.values().last().unwrap(), 65535);
        for level in 0..=9 {
            let bytes = encode_depth(&d, level).unwrap();
            assert_eq!(decode_depth(&bytes).unwrap(), d, "level {level}");
            if level > 0 {
                assert!(bytes.len() < 614_400, "level {level}: {} bytes", bytes.len());
            }
        }
    }

    #[test]
    fn mask_png_roundtrip() {
        let bits: Vec<bool> = (0..35).map(|i| i % 3 == 0).collect();
        let m = SegMask::new(7, 5, bits, "bottle", 1.0).unwrap();
        assert_eq!(decode_mask(&encode_mask(&m).unwrap(), "bottle").unwrap(), m);
        let d = ramp(4, 4);
        assert!(decode_mask(&encode_depth(&d, 2).unwrap(), "x").is_err());
    }

    #[test]
    fn truncated_streams_fail() {
        let d = ramp(32, 32);
        let bytes = encode_depth(&d, 2).unwrap();
        for cut in [8, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_depth(&bytes[..cut]),
                Err(Error::Codec { stage: CodecStage::DecodeDepth, .. })
            ));
        }
        let c = ColorFrame::new(32, 32, (0..32 * 32 * 3).map(|i| (i % 256) as u8).collect(), 0).unwrap();
        let bytes = encode_color(&c, 95).unwrap();
        for cut in [2, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_color(&bytes[..cut]),
                Err(Error::Codec { stage: CodecStage::DecodeColor, .. })
            ));
        }
    }

    #[test]
    fn decode_depth_rejects_8bit_png() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[1, 2, 3, 4]).unwrap();
        }
        assert!(decode_depth(&out).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn depth_codec_is_bijective(w in 1u32..40, h in 1u32..40, seed in any::<u64>(), level in 0u8..=9) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values = (0..w * h).map(|_| rng.random::<u16>()).collect();
            let d = DepthFrame::new(w, h, values, 0).unwrap();
            prop_assert_eq!(decode_depth(&encode_depth(&d, level).unwrap()).unwrap(), d);
        }

        #[test]
        fn color_codec_keeps_dims_and_quality(w in 8u32..48, h in 8u32..48, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            // smooth content: JPEG at q95 is not meant for white noise
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let base: [f64; 3] = [rng.random_range(30.0..220.0), rng.random_range(30.0..220.0), rng.random_range(30.0..220.0)];
            let gx: f64 = rng.random_range(-1.0..1.0);
            let gy: f64 = rng.random_range(-1.0..1.0);
            let mut px = Vec::with_capacity((w * h * 3) as usize);
            for v in 0..h {
                for u in 0..w {
                    for b in base {
                        px.push((b + gx * f64::from(u) + gy * f64::from(v)).clamp(0.0, 255.0) as u8);
                    }
                }
            }
            let c = ColorFrame::new(w, h, px, 0).unwrap();
            let back = decode_color(&encode_color(&c, 95).unwrap()).unwrap();
            prop_assert_eq!((back.width(), back.height()), (w, h));
            prop_assert!(psnr(c.pixels(), back.pixels()) >= 40.0);
        }
    }
}
