//! Grayscale/RGB image buffers, bilinear resize, and PGM files.
//!
//! Intensity convention is ink-dark: 0.0 is black ink, 1.0 is white
//! paper. Pixels are stored channel-major (CHW) and clamped to [0, 1].

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Image buffer with pixels in [0, 1], channel-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                op: "ImageTensor::new",
                left: vec![channels, height, width],
                right: vec![pixels.len()],
            });
        }
        for p in &mut pixels {
            *p = p.clamp(0.0, 1.0);
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            pixels,
        })
    }

    /// Solid image of one intensity.
    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        ImageTensor::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
        .expect("constant image is well-formed")
    }

    /// All-white (paper) image.
    pub fn blank(channels: usize, height: usize, width: usize) -> Self {
        Self::constant(channels, height, width, 1.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Bilinear sample with clamped coordinates, per channel.
    fn sample(&self, c: usize, sy: f32, sx: f32) -> f32 {
        let y0 = (sy.floor() as isize).clamp(0, self.height as isize - 1) as usize;
        let x0 = (sx.floor() as isize).clamp(0, self.width as isize - 1) as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = (sy - y0 as f32).clamp(0.0, 1.0);
        let fx = (sx - x0 as f32).clamp(0.0, 1.0);
        let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
        let top = lerp(self.get(c, y0, x0), self.get(c, y0, x1), fx);
        let bot = lerp(self.get(c, y1, x0), self.get(c, y1, x1), fx);
        lerp(top, bot, fy)
    }

    /// Bilinear resize with corner-aligned sampling: output corners map
    /// exactly onto input corners. Resizing to the same size copies
    /// pixels unchanged.
    pub fn resize(&self, to_height: usize, to_width: usize) -> Result<ImageTensor> {
        if self.height == 0 || self.width == 0 || to_height == 0 || to_width == 0 {
            return Err(Error::InvalidInput(format!(
                "resize with zero dimension: {}x{} -> {}x{}",
                self.height, self.width, to_height, to_width
            )));
        }
        let scale_y = if to_height > 1 {
            (self.height - 1) as f32 / (to_height - 1) as f32
        } else {
            0.0
        };
        let scale_x = if to_width > 1 {
            (self.width - 1) as f32 / (to_width - 1) as f32
        } else {
            0.0
        };
        let mut pixels = Vec::with_capacity(self.channels * to_height * to_width);
        for c in 0..self.channels {
            for y in 0..to_height {
                let sy = y as f32 * scale_y;
                for x in 0..to_width {
                    let sx = x as f32 * scale_x;
                    pixels.push(self.sample(c, sy, sx));
                }
            }
        }
        ImageTensor::new(self.channels, to_height, to_width, pixels)
    }

    /// Fraction-of-ink helpers used by augmentation.
    pub fn ink_count(&self, threshold: f32) -> usize {
        self.pixels.iter().filter(|&&p| p < threshold).count()
    }
}

// ── PGM (P5, 8-bit) ─────────────────────────────────────────────────

/// Encode a single-channel image as binary PGM; pixel = round(255*v).
pub fn encode_pgm(img: &ImageTensor) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(Error::InvalidInput(format!(
            "PGM encodes grayscale only, image has {} channels",
            img.channels
        )));
    }
    let mut out = Vec::with_capacity(32 + img.pixels.len());
    out.extend_from_slice(format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend(img.pixels.iter().map(|&p| (p * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(img: &ImageTensor, path: &Path) -> Result<()> {
    let bytes = encode_pgm(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageTensor> {
    let bad = |msg: &str| Error::InvalidInput(format!("PGM: {msg}"));
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P5" {
        return Err(bad("missing P5 magic"));
    }
    let width: usize = token(bytes)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // exactly one whitespace byte after maxval
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(bad("payload shorter than width*height"));
    }
    let pixels: Vec<f32> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    ImageTensor::new(1, height, width, pixels)
}

pub fn read_pgm(path: &Path) -> Result<ImageTensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().ok();
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
