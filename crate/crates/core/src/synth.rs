//! Procedural stand-in dataset: one stroke glyph per class, rendered with
//! random affine jitter and pixel noise.
//!
//! Glyphs are subsets of the 20 segments joining neighbouring points of a
//! 3×3 lattice. The subsets are chosen once, from a fixed seed, so that any
//! two glyphs differ in at least [`MIN_SEGMENT_DISTANCE`] segments.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, streams};

pub const IMAGE_SIDE: u32 = 64;
pub const MIN_SEGMENT_DISTANCE: u32 = 3;

const GLYPH_TABLE_SEED: u64 = 0x6c79_7068;
const LATTICE: [f64; 3] = [0.2, 0.5, 0.8];
const STROKE_HALF_WIDTH: f64 = 0.045;
const NOISE_SIGMA: f64 = 0.04;
const MAX_SHIFT: f64 = 0.1;
const MAX_SCALE: f64 = 0.1;
const MAX_ROTATION_DEG: f64 = 10.0;

type Point = (f64, f64);

fn segments() -> Vec<(Point, Point)> {
    let p = |i: usize, j: usize| (LATTICE[i], LATTICE[j]);
    let mut segs = Vec::with_capacity(20);
    for j in 0..3 {
        for i in 0..2 {
            segs.push((p(i, j), p(i + 1, j)));
        }
    }
    for i in 0..3 {
        for j in 0..2 {
            segs.push((p(i, j), p(i, j + 1)));
        }
    }
    for i in 0..2 {
        for j in 0..2 {
            segs.push((p(i, j), p(i + 1, j + 1)));
            segs.push((p(i + 1, j), p(i, j + 1)));
        }
    }
    segs
}

/// Segment bitmasks for all classes, identical on every call.
pub fn glyph_table() -> Vec<u32> {
    let mut rng = seeded_rng(GLYPH_TABLE_SEED);
    let mut table: Vec<u32> = Vec::with_capacity(NUM_CLASSES);
    while table.len() < NUM_CLASSES {
        let strokes = rng.random_range(3..=7);
        let mut mask = 0u32;
        while mask.count_ones() < strokes {
            mask |= 1 << rng.random_range(0..20);
        }
        if table.iter().all(|&g| (g ^ mask).count_ones() >= MIN_SEGMENT_DISTANCE) {
            table.push(mask);
        }
    }
    table
}

fn distance_to_segment(p: Point, (a, b): (Point, Point)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Renders one jittered sample of `mask` as 8-bit grayscale, white strokes
/// on black.
pub fn render_glyph<R: Rng + ?Sized>(mask: u32, rng: &mut R) -> Vec<u8> {
    let all = segments();
    let strokes: Vec<_> = (0..20).filter(|i| mask & (1 << i) != 0).map(|i| all[i]).collect();

    let scale = 1.0 + rng.random_range(-MAX_SCALE..=MAX_SCALE);
    let theta = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG) * PI / 180.0;
    let shift = (
        rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
        rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
    );
    let (sin, cos) = theta.sin_cos();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");

    let side = IMAGE_SIDE as usize;
    let pixel = 1.0 / side as f64;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            // Map the pixel centre back into glyph space: undo shift, then
            // rotation and scale about the image centre.
            let u = (x as f64 + 0.5) * pixel - 0.5 - shift.0;
            let v = (y as f64 + 0.5) * pixel - 0.5 - shift.1;
            let gx = (cos * u + sin * v) / scale + 0.5;
            let gy = (-sin * u + cos * v) / scale + 0.5;
            let d = strokes
                .iter()
                .map(|&s| distance_to_segment((gx, gy), s))
                .fold(f64::INFINITY, f64::min);
            let ink = (0.5 - (d - STROKE_HALF_WIDTH) / pixel).clamp(0.0, 1.0);
            let value = (ink + noise.sample(rng)).clamp(0.0, 1.0);
            out.push((value * 255.0).round() as u8);
        }
    }
    out
}

/// Writes `classes` folders named `1`, `2`, … holding `per_class` PNGs each.
/// Returns the written paths in class-then-sample order.
pub fn synth_dataset(out: &Path, classes: usize, per_class: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if !(1..=NUM_CLASSES).contains(&classes) {
        return Err(Error::Range(format!("classes must be in 1..={NUM_CLASSES}, got {classes}")));
    }
    if per_class < 2 {
        return Err(Error::Range(format!(
            "per-class count must be at least 2 for a split, got {per_class}"
        )));
    }
    let table = glyph_table();
    let mut written = Vec::with_capacity(classes * per_class);
    for (class, &mask) in table.iter().enumerate().take(classes) {
        let dir = out.join((class + 1).to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = seeded_rng(derive_seed(seed, &[streams::SYNTH, class as u64]));
        for sample in 0..per_class {
            let pixels = render_glyph(mask, &mut rng);
            let path = dir.join(format!("{}_{sample:04}.png", class + 1));
            image::GrayImage::from_raw(IMAGE_SIDE, IMAGE_SIDE, pixels)
                .expect("buffer matches dimensions")
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::io(&path, io),
                    other => Error::format(&path, other.to_string()),
                })?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_separated() {
        let t = glyph_table();
        assert_eq!(t.len(), NUM_CLASSES);
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                assert!((t[i] ^ t[j]).count_ones() >= MIN_SEGMENT_DISTANCE);
            }
        }
        assert_eq!(t, glyph_table());
    }

    #[test]
    fn segment_count() {
        assert_eq!(segments().len(), 20);
    }

    #[test]
    fn render_has_ink_and_background() {
        let px = render_glyph(glyph_table()[0], &mut seeded_rng(1));
        assert_eq!(px.len(), (IMAGE_SIDE * IMAGE_SIDE) as usize);
        assert!(px.iter().filter(|&&p| p > 200).count() > 50);
        assert!(px.iter().filter(|&&p| p < 50).count() > 2000);
    }

    #[test]
    fn rejects_too_few_per_class() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_dataset(dir.path(), 3, 1, 0).is_err());
        assert!(synth_dataset(dir.path(), 85, 2, 0).is_err());
    }
}
