//! Synthetic textline rendering and corpus building.
//!
//! A built-in 5x7 bitmap font draws dark glyphs on white at an integer
//! scale, optionally sheared to mimic a second "handwritten-style"
//! data distribution. Generation is its own oracle: the manifest
//! transcript is exactly the rendered string.

pub mod font;

use crate::error::{Error, Result};
use crate::image::{write_pgm, ImageTensor};
use crate::rng::rng_from;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Fixed slant for the sheared style, in degrees.
pub const SHEAR_DEGREES: f64 = 14.0;

/// Visual style of a rendered line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Printed,
    Sheared,
}

/// Rendering parameters over the built-in bitmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphFont {
    /// Integer pixel scale of the 5x7 cells.
    pub scale: usize,
    /// Slant in degrees; 0 renders upright.
    pub shear_deg: f64,
}

impl GlyphFont {
    pub fn printed(scale: usize) -> Self {
        GlyphFont {
            scale,
            shear_deg: 0.0,
        }
    }

    pub fn sheared(scale: usize) -> Self {
        GlyphFont {
            scale,
            shear_deg: SHEAR_DEGREES,
        }
    }

    pub fn for_style(style: Style, scale: usize) -> Self {
        match style {
            Style::Printed => Self::printed(scale),
            Style::Sheared => Self::sheared(scale),
        }
    }

    pub fn supports(&self, c: char) -> bool {
        font::glyph(c).is_some()
    }

    /// Horizontal advance per glyph in base (unscaled) units: the 5
    /// columns plus 1 of spacing. Space advances without ink.
    pub fn advance(&self, _c: char) -> usize {
        font::GLYPH_W + 1
    }

    fn glyph_height_px(&self) -> usize {
        font::GLYPH_H * self.scale
    }

    /// Right shift applied to pixel row `y` (0 = top) of the glyph
    /// band; rows toward the top lean right.
    fn shear_offset(&self, y: usize) -> usize {
        let h = self.glyph_height_px();
        (self.shear_deg.to_radians().tan() * (h - 1 - y) as f64).round() as usize
    }

    fn shear_margin(&self) -> usize {
        if self.shear_deg > 0.0 {
            self.shear_offset(0)
        } else {
            0
        }
    }
}

/// Render a line of text: dark glyphs on white, left to right on one
/// baseline, `pad` pixels of margin. Deterministic in all inputs.
pub fn render(text: &str, font: &GlyphFont, pad: usize) -> Result<ImageTensor> {
    if font.scale == 0 {
        return Err(Error::Generation("font scale must be >= 1".into()));
    }
    for c in text.chars() {
        if !font.supports(c) {
            return Err(Error::Generation(format!(
                "no glyph for character {c:?} (U+{:04X})",
                c as u32
            )));
        }
    }
    let s = font.scale;
    let advance_px: usize = text.chars().map(|c| font.advance(c) * s).sum();
    let height = font.glyph_height_px() + 2 * pad;
    let width = 2 * pad + advance_px + font.shear_margin();
    let mut img = ImageTensor::blank(1, height, width.max(1));
    let mut pen = pad;
    for c in text.chars() {
        let bitmap = font::glyph(c).expect("checked above");
        for (gy, row) in bitmap.iter().enumerate() {
            for gx in 0..font::GLYPH_W {
                if row & (1 << (font::GLYPH_W - 1 - gx)) == 0 {
                    continue;
                }
                for sy in 0..s {
                    let y_in_band = gy * s + sy;
                    let shift = font.shear_offset(y_in_band);
                    for sx in 0..s {
                        img.set(0, pad + y_in_band, pen + gx * s + sx + shift, 0.0);
                    }
                }
            }
        }
        pen += font.advance(c) * s;
    }
    Ok(img)
}

/// One generated or loaded textline with its transcript.
#[derive(Debug, Clone)]
pub struct TextlineSample {
    pub image: ImageTensor,
    pub text: String,
    pub id: String,
    pub style: Style,
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_lines: usize,
    /// Inclusive word-count range per line.
    pub words_per_line: (usize, usize),
    pub seed: u64,
    pub style: Style,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default = "default_pad")]
    pub pad: usize,
}

fn default_scale() -> usize {
    2
}

fn default_pad() -> usize {
    2
}

/// A manifest record: `<image-path>\t<transcript>`, path relative to
/// the manifest file. The relative path doubles as the sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub text: String,
}

/// Generate a corpus under `out_dir`: PGM images plus `manifest.tsv`.
/// Byte-identical for identical (wordlist, config).
pub fn build_corpus(cfg: &CorpusConfig, wordlist: &[String], out_dir: &Path) -> Result<PathBuf> {
    if wordlist.is_empty() {
        return Err(Error::Generation("empty wordlist".into()));
    }
    if cfg.words_per_line.0 > cfg.words_per_line.1 || cfg.words_per_line.0 == 0 {
        return Err(Error::Generation(format!(
            "bad words_per_line range {:?}",
            cfg.words_per_line
        )));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let font = GlyphFont::for_style(cfg.style, cfg.scale);

    let lines: Vec<(String, String)> = (0..cfg.num_lines)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(cfg.seed, &[0x6c696e65, i as u64]);
            let count = rng.random_range(cfg.words_per_line.0..=cfg.words_per_line.1);
            let words: Vec<&str> = (0..count)
                .map(|_| wordlist[rng.random_range(0..wordlist.len())].as_str())
                .collect();
            (format!("images/{i:06}.pgm"), words.join(" "))
        })
        .collect();

    let rendered: Vec<(String, String, ImageTensor)> = lines
        .into_par_iter()
        .map(|(rel, text)| {
            let img = render(&text, &font, cfg.pad)?;
            Ok((rel, text, img))
        })
        .collect::<Result<_>>()?;

    let mut manifest = String::new();
    for (rel, text, img) in &rendered {
        write_pgm(img, &out_dir.join(rel))?;
        manifest.push_str(rel);
        manifest.push('\t');
        manifest.push_str(text);
        manifest.push('\n');
    }
    let manifest_path = out_dir.join("manifest.tsv");
    crate::image::write_atomic(&manifest_path, manifest.as_bytes())?;
    Ok(manifest_path)
}

/// Parse a manifest; image paths resolve relative to the manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (rel, transcript) = line.split_once('\t').ok_or_else(|| {
            Error::InvalidInput(format!(
                "manifest {path:?} line {}: missing tab separator",
                lineno + 1
            ))
        })?;
        entries.push(ManifestEntry {
            id: rel.to_string(),
            image_path: base.join(rel),
            text: transcript.to_string(),
        });
    }
    Ok(entries)
}

/// Load manifest entries into memory as samples.
pub fn load_samples(entries: &[ManifestEntry], style: Style) -> Result<Vec<TextlineSample>> {
    entries
        .par_iter()
        .map(|e| {
            Ok(TextlineSample {
                image: crate::image::read_pgm(&e.image_path)?,
                text: e.text.clone(),
                id: e.id.clone(),
                style,
            })
        })
        .collect()
}

/// Built-in 100-word vocabulary for demos and smoke tests.
pub const DEFAULT_WORDS: [&str; 100] = [
    "the", "of", "and", "to", "in", "is", "was", "for", "on", "as", "with", "by", "at", "from",
    "that", "this", "it", "are", "be", "or", "an", "not", "can", "has", "had", "will", "all",
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "total",
    "amount", "date", "time", "name", "item", "price", "cash", "card", "change", "tax", "pay",
    "paid", "bill", "sale", "unit", "line", "page", "form", "text", "word", "note", "list",
    "code", "data", "file", "test", "model", "image", "train", "value", "order", "count",
    "number", "address", "city", "state", "street", "phone", "email", "year", "month", "day",
    "hour", "minute", "second", "first", "last", "next", "open", "close", "high", "low", "left",
    "right", "up", "down", "new", "old", "good", "best", "more", "less",
];

pub fn default_wordlist() -> Vec<String> {
    DEFAULT_WORDS.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_empty_is_blank_of_twice_pad() {
        let img = render("", &GlyphFont::printed(2), 3).unwrap();
        assert_eq!(img.width(), 6);
        assert_eq!(img.height(), 7 * 2 + 6);
        assert!(img.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn render_a_matches_bitmap_at_known_offset() {
        let pad = 2;
        let scale = 3;
        let img = render("A", &GlyphFont::printed(scale), pad).unwrap();
        let bitmap = font::glyph('A').unwrap();
        for y in 0..img.height() {
            for x in 0..img.width() {
                let inside = y >= pad
                    && y < pad + 7 * scale
                    && x >= pad
                    && x < pad + 5 * scale;
                let want_ink = if inside {
                    let gy = (y - pad) / scale;
                    let gx = (x - pad) / scale;
                    bitmap[gy] & (1 << (4 - gx)) != 0
                } else {
                    false
                };
                assert_eq!(img.get(0, y, x) == 0.0, want_ink, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn width_obeys_additive_advance_law() {
        let font = GlyphFont::printed(2);
        let pad = 2;
        let a = render("a", &font, pad).unwrap();
        let ab = render("ab", &font, pad).unwrap();
        assert_eq!(ab.width(), a.width() + font.advance('b') * font.scale);
        // also under shear: margin is text-independent
        let sf = GlyphFont::sheared(2);
        let sa = render("a", &sf, pad).unwrap();
        let sab = render("ab", &sf, pad).unwrap();
        assert_eq!(sab.width(), sa.width() + sf.advance('b') * sf.scale);
    }

    #[test]
    fn unsupported_char_names_the_char() {
        let err = render("a\u{00e9}b", &GlyphFont::printed(1), 1).unwrap_err();
        match err {
            Error::Generation(msg) => assert!(msg.contains('\u{00e9}'), "{msg}"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn sheared_style_differs_from_printed() {
        let p = render("hello", &GlyphFont::printed(2), 2).unwrap();
        let s = render("hello", &GlyphFont::sheared(2), 2).unwrap();
        assert_ne!(p.width(), s.width());
    }

    #[test]
    fn corpus_zero_lines_yields_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            num_lines: 0,
            words_per_line: (1, 3),
            seed: 1,
            style: Style::Printed,
            scale: 1,
            pad: 1,
        };
        let manifest = build_corpus(&cfg, &default_wordlist(), dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&manifest).unwrap(), "");
        assert!(read_manifest(&manifest).unwrap().is_empty());
    }

    #[test]
    fn corpus_is_byte_identical_across_runs() {
        let cfg = CorpusConfig {
            num_lines: 8,
            words_per_line: (1, 4),
            seed: 99,
            style: Style::Sheared,
            scale: 2,
            pad: 2,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_corpus(&cfg, &default_wordlist(), d1.path()).unwrap();
        build_corpus(&cfg, &default_wordlist(), d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.tsv")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.tsv")).unwrap();
        assert_eq!(m1, m2);
        for e in read_manifest(&d1.path().join("manifest.tsv")).unwrap() {
            let other = d2.path().join(&e.id);
            assert_eq!(
                std::fs::read(&e.image_path).unwrap(),
                std::fs::read(&other).unwrap(),
                "image {} differs",
                e.id
            );
        }
    }

    #[test]
    fn manifest_counts_and_files_exist() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            num_lines: 5,
            words_per_line: (2, 3),
            seed: 3,
            style: Style::Printed,
            scale: 1,
            pad: 2,
        };
        let manifest = build_corpus(&cfg, &default_wordlist(), dir.path()).unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 5);
        for e in &entries {
            assert!(e.image_path.is_file(), "missing {:?}", e.image_path);
            assert!(!e.text.is_empty());
        }
        // perfect label fidelity: re-render the transcript and compare
        let font = GlyphFont::printed(1);
        for e in &entries {
            let img = crate::image::read_pgm(&e.image_path).unwrap();
            let again = render(&e.text, &font, 2).unwrap();
            assert_eq!(img.pixels(), again.pixels(), "render not reproducible");
        }
    }
}
