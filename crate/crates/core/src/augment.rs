//! Image transformations for training-time augmentation: rotation,
//! Gaussian blur, dilation, erosion, downscaling, underlining, plus
//! identity, each drawn with probability 1/7 per sample.
//!
//! All transforms preserve image dimensions and the [0, 1] pixel
//! range, and are pure functions of (image, seed). Ink is dark:
//! dilation grows dark pixels, erosion shrinks them.

use crate::image::ImageTensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Pixels darker than this count as ink.
const INK_THRESHOLD: f32 = 0.5;

/// Parameter ranges for the transform family. The rotation range is
/// fixed by convention at +/-10 degrees; the others are artifact
/// choices centralized here so experiments can vary them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub rotate_degrees: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub morph_kernel: usize,
    pub downscale_factor: (f64, f64),
    pub underline_offset: (usize, usize),
    pub underline_thickness: (usize, usize),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: true,
            rotate_degrees: (-10.0, 10.0),
            blur_sigma: (0.5, 2.0),
            morph_kernel: 3,
            downscale_factor: (0.3, 0.9),
            underline_offset: (1, 3),
            underline_thickness: (1, 2),
        }
    }
}

/// The seven equally likely choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    Rotate,
    Blur,
    Dilate,
    Erode,
    Downscale,
    Underline,
}

impl Transform {
    pub const ALL: [Transform; 7] = [
        Transform::Identity,
        Transform::Rotate,
        Transform::Blur,
        Transform::Dilate,
        Transform::Erode,
        Transform::Downscale,
        Transform::Underline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Rotate => "rotate",
            Transform::Blur => "blur",
            Transform::Dilate => "dilate",
            Transform::Erode => "erode",
            Transform::Downscale => "downscale",
            Transform::Underline => "underline",
        }
    }
}

/// Apply exactly one transform chosen uniformly from the seven, fully
/// determined by `sample_seed`. Disabled policies return the image
/// unchanged.
pub fn apply(policy: &AugmentPolicy, img: &ImageTensor, sample_seed: u64) -> ImageTensor {
    apply_named(policy, img, sample_seed).1
}

/// Like [`apply`] but also reports which transform was chosen.
pub fn apply_named(
    policy: &AugmentPolicy,
    img: &ImageTensor,
    sample_seed: u64,
) -> (Transform, ImageTensor) {
    if !policy.enabled {
        return (Transform::Identity, img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let choice = Transform::ALL[rng.random_range(0..7usize)];
    let out = match choice {
        Transform::Identity => img.clone(),
        Transform::Rotate => {
            let (lo, hi) = policy.rotate_degrees;
            rotate(img, rng.random_range(lo..=hi))
        }
        Transform::Blur => {
            let (lo, hi) = policy.blur_sigma;
            gaussian_blur(img, rng.random_range(lo..=hi))
        }
        Transform::Dilate => dilate(img, policy.morph_kernel),
        Transform::Erode => erode(img, policy.morph_kernel),
        Transform::Downscale => {
            let (lo, hi) = policy.downscale_factor;
            downscale(img, rng.random_range(lo..=hi))
        }
        Transform::Underline => {
            let (olo, ohi) = policy.underline_offset;
            let (tlo, thi) = policy.underline_thickness;
            let offset = rng.random_range(olo..=ohi);
            let thickness = rng.random_range(tlo..=thi);
            underline(img, offset, thickness)
        }
    };
    (choice, out)
}

/// Bilinear rotation about the image center; uncovered corners fill
/// with background white.
pub fn rotate(img: &ImageTensor, degrees: f64) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let theta = degrees.to_radians();
    let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                // inverse map: rotate output coords by -theta
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                pixels.push(sample_white_border(img, ch, sy, sx));
            }
        }
    }
    ImageTensor::new(c, h, w, pixels).expect("rotate preserves dims")
}

/// Bilinear sample treating everything outside the image as white.
fn sample_white_border(img: &ImageTensor, c: usize, sy: f32, sx: f32) -> f32 {
    let y0 = sy.floor() as isize;
    let x0 = sx.floor() as isize;
    let fy = sy - y0 as f32;
    let fx = sx - x0 as f32;
    let at = |y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= img.height() as isize || x >= img.width() as isize {
            1.0
        } else {
            img.get(c, y as usize, x as usize)
        }
    };
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
    let top = lerp(at(y0, x0), at(y0, x0 + 1), fx);
    let bot = lerp(at(y0 + 1, x0), at(y0 + 1, x0 + 1), fx);
    lerp(top, bot, fy)
}

/// Separable Gaussian blur, radius ceil(3*sigma), edge-clamp padding.
/// Written in difference form around the center tap so constant images
/// pass through bit-exactly.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut weights = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        weights.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| (w / total) as f32).collect();

    let (c, h, w) = (img.channels(), img.height(), img.width());
    let pass = |src: &dyn Fn(usize, usize, usize) -> f32, horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let center = src(ch, y, x);
                    let mut acc = center;
                    for (wi, off) in weights.iter().zip(-radius..=radius) {
                        let (sy, sx) = if horizontal {
                            (y as isize, x as isize + off)
                        } else {
                            (y as isize + off, x as isize)
                        };
                        let sy = sy.clamp(0, h as isize - 1) as usize;
                        let sx = sx.clamp(0, w as isize - 1) as usize;
                        acc += wi * (src(ch, sy, sx) - center);
                    }
                    out[(ch * h + y) * w + x] = acc;
                }
            }
        }
        out
    };

    let horizontal = pass(&|ch, y, x| img.get(ch, y, x), true);
    let hh = h;
    let ww = w;
    let vertical = pass(&move |ch, y, x| horizontal[(ch * hh + y) * ww + x], false);
    ImageTensor::new(c, h, w, vertical).expect("blur preserves dims")
}

fn morph(img: &ImageTensor, kernel: usize, take_min: bool) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let r = (kernel / 2) as isize;
    let mut pixels = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut v = img.get(ch, y, x);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = y as isize + dy;
                        let sx = x as isize + dx;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let s = img.get(ch, sy as usize, sx as usize);
                        v = if take_min { v.min(s) } else { v.max(s) };
                    }
                }
                pixels.push(v);
            }
        }
    }
    ImageTensor::new(c, h, w, pixels).expect("morph preserves dims")
}

/// Ink growth: min filter over a kernel x kernel window.
pub fn dilate(img: &ImageTensor, kernel: usize) -> ImageTensor {
    morph(img, kernel, true)
}

/// Ink shrink: max filter over a kernel x kernel window.
pub fn erode(img: &ImageTensor, kernel: usize) -> ImageTensor {
    morph(img, kernel, false)
}

/// Quality loss: bilinear downscale by `factor`, then upscale back to
/// the original dimensions.
pub fn downscale(img: &ImageTensor, factor: f64) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let dh = ((h as f64 * factor).round() as usize).max(1);
    let dw = ((w as f64 * factor).round() as usize).max(1);
    img.resize(dh, dw)
        .and_then(|small| small.resize(h, w))
        .expect("downscale dims are nonzero")
}

/// Draw a dark horizontal rule 1-3 px below the lowest ink row, across
/// the ink's column extent. Blank images get a full-width line at 90%
/// height.
pub fn underline(img: &ImageTensor, offset: usize, thickness: usize) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut lowest: Option<usize> = None;
    let mut min_x = w;
    let mut max_x = 0usize;
    for y in 0..h {
        for x in 0..w {
            let ink = (0..c).any(|ch| img.get(ch, y, x) < INK_THRESHOLD);
            if ink {
                lowest = Some(y);
                min_x = min_x.min(x);
                max_x = max_x.max(x);
            }
        }
    }
    let (row, x_lo, x_hi) = match lowest {
        Some(low) => (low.saturating_add(offset).min(h - 1), min_x, max_x),
        None => (((h as f64) * 0.9) as usize, 0, w.saturating_sub(1)),
    };
    let mut out = img.clone();
    for t in 0..thickness {
        let y = (row + t).min(h - 1);
        for x in x_lo..=x_hi.min(w - 1) {
            for ch in 0..c {
                out.set(ch, y, x, 0.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glyph_image() -> ImageTensor {
        // 12x24 white image with a dark 3px-tall stroke in the middle.
        let mut img = ImageTensor::blank(1, 12, 24);
        for y in 4..7 {
            for x in 4..20 {
                img.set(0, y, x, 0.0);
            }
        }
        img
    }

    #[test]
    fn disabled_policy_returns_identical_bytes() {
        let policy = AugmentPolicy {
            enabled: false,
            ..AugmentPolicy::default()
        };
        let img = glyph_image();
        assert_eq!(apply(&policy, &img, 7).pixels(), img.pixels());
    }

    #[test]
    fn same_seed_same_bytes() {
        let policy = AugmentPolicy::default();
        let img = glyph_image();
        for seed in 0..20 {
            let a = apply(&policy, &img, seed);
            let b = apply(&policy, &img, seed);
            assert_eq!(a.pixels(), b.pixels(), "seed {seed}");
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = glyph_image();
        let out = rotate(&img, 0.0);
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rotate_inverse_pair_roughly_restores() {
        // wide stroke on a 32x64 canvas; border effects stay small
        let mut img = ImageTensor::blank(1, 32, 64);
        for y in 12..18 {
            for x in 8..56 {
                img.set(0, y, x, 0.0);
            }
        }
        let there = rotate(&img, 8.0);
        let back = rotate(&there, -8.0);
        let mean_abs: f32 = img
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / img.pixels().len() as f32;
        assert!(mean_abs < 0.02, "mean abs diff {mean_abs}");
    }

    #[test]
    fn rotate_moves_single_pixel_to_computed_spot() {
        // 90-degree-free check: small angle, off-center dark pixel.
        let mut img = ImageTensor::blank(1, 21, 21);
        img.set(0, 10, 16, 0.0); // 6 px right of center
        let deg = 10.0f64;
        let out = rotate(&img, deg);
        // forward map of (dy=0, dx=6) under +theta: the darkest output
        // pixel should be within 1px of the rotated coordinate.
        let theta = deg.to_radians();
        let want_y = 10.0 + 6.0 * theta.sin();
        let want_x = 10.0 + 6.0 * theta.cos();
        let mut best = (0usize, 0usize, 1.0f32);
        for y in 0..21 {
            for x in 0..21 {
                if out.get(0, y, x) < best.2 {
                    best = (y, x, out.get(0, y, x));
                }
            }
        }
        assert!(
            (best.0 as f64 - want_y).abs() <= 1.0 && (best.1 as f64 - want_x).abs() <= 1.0,
            "darkest at ({}, {}), expected near ({want_y:.1}, {want_x:.1})",
            best.0,
            best.1
        );
    }

    #[test]
    fn blur_preserves_constant_exactly() {
        let img = ImageTensor::constant(1, 8, 8, 0.37);
        let out = gaussian_blur(&img, 1.3);
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn blur_impulse_matches_sampled_gaussian() {
        let n = 31;
        let mut img = ImageTensor::blank(1, n, n);
        // impulse at center on black background: use 0 background, 1 impulse
        for y in 0..n {
            for x in 0..n {
                img.set(0, y, x, 0.0);
            }
        }
        img.set(0, 15, 15, 1.0);
        let sigma = 1.5f64;
        let out = gaussian_blur(&img, sigma);
        let radius = (3.0 * sigma).ceil() as isize;
        let mut weights = Vec::new();
        for i in -radius..=radius {
            weights.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
        }
        let total: f64 = weights.iter().sum();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let want = (weights[(dy + radius) as usize] / total)
                    * (weights[(dx + radius) as usize] / total);
                let got = out.get(0, (15 + dy) as usize, (15 + dx) as usize) as f64;
                assert!(
                    (got - want).abs() < 1e-6,
                    "impulse response at ({dy},{dx}): got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn blur_reduces_total_variation() {
        let img = glyph_image();
        let tv = |im: &ImageTensor| -> f32 {
            let mut s = 0.0;
            for y in 0..im.height() {
                for x in 1..im.width() {
                    s += (im.get(0, y, x) - im.get(0, y, x - 1)).abs();
                }
            }
            s
        };
        let out = gaussian_blur(&img, 1.0);
        assert!(tv(&out) < tv(&img));
    }

    #[test]
    fn morphology_on_all_white_is_identity() {
        let img = ImageTensor::blank(1, 6, 6);
        assert_eq!(dilate(&img, 3).pixels(), img.pixels());
        assert_eq!(erode(&img, 3).pixels(), img.pixels());
    }

    #[test]
    fn single_dark_pixel_dilates_to_block() {
        let mut img = ImageTensor::blank(1, 7, 7);
        img.set(0, 3, 3, 0.0);
        let out = dilate(&img, 3);
        for y in 0..7 {
            for x in 0..7 {
                let in_block = (2..=4).contains(&y) && (2..=4).contains(&x);
                assert_eq!(out.get(0, y, x) == 0.0, in_block, "({y},{x})");
            }
        }
    }

    #[test]
    fn closing_covers_original_ink() {
        let img = glyph_image();
        let closed = erode(&dilate(&img, 3), 3);
        for y in 0..img.height() {
            for x in 0..img.width() {
                if img.get(0, y, x) < INK_THRESHOLD {
                    assert!(
                        closed.get(0, y, x) < INK_THRESHOLD,
                        "closing lost ink at ({y},{x})"
                    );
                }
            }
        }
    }

    #[test]
    fn downscale_factor_one_is_near_identity() {
        let img = glyph_image();
        let out = downscale(&img, 1.0);
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn downscale_preserves_dims_and_constants() {
        let img = ImageTensor::constant(1, 9, 17, 0.8);
        for factor in [0.3, 0.5, 0.77, 0.9] {
            let out = downscale(&img, factor);
            assert_eq!((out.height(), out.width()), (9, 17));
            for &p in out.pixels() {
                assert!((p - 0.8).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn underline_adds_ink_below_lowest_row() {
        let img = glyph_image();
        let before = img.ink_count(INK_THRESHOLD);
        let out = underline(&img, 2, 1);
        assert!(out.ink_count(INK_THRESHOLD) > before);
        assert_ne!(out.pixels(), img.pixels());
        // lowest ink row is 6; line must sit in [7, 9]
        let mut line_rows = Vec::new();
        for y in 7..img.height() {
            if (0..img.width()).any(|x| out.get(0, y, x) < INK_THRESHOLD) {
                line_rows.push(y);
            }
        }
        assert_eq!(line_rows, vec![8], "offset 2 from row 6");
    }

    #[test]
    fn underline_blank_image_uses_fallback_row() {
        let img = ImageTensor::blank(1, 20, 10);
        let out = underline(&img, 1, 1);
        let want_row = 18; // 90% of 20
        for x in 0..10 {
            assert_eq!(out.get(0, want_row, x), 0.0);
        }
    }

    #[test]
    fn all_transforms_preserve_dims_and_range() {
        let img = glyph_image();
        let policy = AugmentPolicy::default();
        for seed in 0..200 {
            let (_, out) = apply_named(&policy, &img, seed);
            assert_eq!((out.height(), out.width()), (img.height(), img.width()));
            assert!(out.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
