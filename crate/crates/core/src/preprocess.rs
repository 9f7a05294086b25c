//! Image preprocessing: grayscale reduction, bilinear resize to 32×32 and
//! scaling to `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INPUT_SIZE: usize = 32;

/// 8-bit image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width * height * channels != pixels.len() {
            return Err(Error::format(
                "<memory>",
                format!("{} bytes for a {width}x{height}x{channels} image", pixels.len()),
            ));
        }
        Ok(RawImage {
            width,
            height,
            channels,
            pixels,
        })
    }
}

/// Real-valued single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::format(
                "<memory>",
                format!("{} values for a {width}x{height} grid", values.len()),
            ));
        }
        Ok(Grid { width, height, values })
    }

    pub fn from_gray(img: &RawImage) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::format("<memory>", format!("expected 1 channel, got {}", img.channels)));
        }
        Grid::new(img.width, img.height, img.pixels.iter().map(|&p| p as f64).collect())
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// A `(32, 32, 1)` tensor with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedImage(pub Tensor<f32>);

impl ProcessedImage {
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }
}

/// Decodes a PNG or BMP file. Grayscale stays single-channel; everything
/// else is converted to 8-bit RGB.
pub fn decode_image(path: &Path) -> Result<RawImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let raw = match img {
        image::DynamicImage::ImageLuma8(g) => RawImage::new(width, height, 1, g.into_raw()),
        other if !other.color().has_color() => RawImage::new(width, height, 1, other.to_luma8().into_raw()),
        other => RawImage::new(width, height, 3, other.to_rgb8().into_raw()),
    };
    raw.map_err(|_| Error::format(path, "decoded buffer size mismatch"))
}

/// Luminance `0.299R + 0.587G + 0.114B`, rounded half-up.
pub fn to_grayscale(img: &RawImage) -> Result<RawImage> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => {
            let pixels = img
                .pixels
                .chunks_exact(3)
                .map(|px| {
                    let (r, g, b) = (px[0] as u32, px[1] as u32, px[2] as u32);
                    ((299 * r + 587 * g + 114 * b + 500) / 1000) as u8
                })
                .collect();
            RawImage::new(img.width, img.height, 1, pixels)
        }
        c => Err(Error::format("<memory>", format!("unsupported channel count {c}"))),
    }
}

/// Source coordinate for output index `i` under align-corners sampling.
fn source_coord(i: usize, out_len: usize, in_len: usize) -> f64 {
    if out_len == 1 {
        (in_len - 1) as f64 / 2.0
    } else {
        (i * (in_len - 1)) as f64 / (out_len - 1) as f64
    }
}

/// Left/top grid neighbour for a source coordinate, chosen so that the
/// right/bottom neighbour is always `lo + 1` (or `lo` on a 1-pixel axis).
fn bracket(coord: f64, in_len: usize) -> (usize, usize) {
    if in_len == 1 {
        return (0, 0);
    }
    let lo = (coord.floor() as usize).min(in_len - 2);
    (lo, lo + 1)
}

/// Bilinear resize with align-corners sampling.
///
/// For each output pixel the four neighbours `Q11 = (x1, y1)`,
/// `Q21 = (x2, y1)`, `Q12 = (x1, y2)`, `Q22 = (x2, y2)` are first blended
/// along x on rows `y1` and `y2`, then the two row values are blended along y.
pub fn bilinear_resize(img: &Grid, out_w: usize, out_h: usize) -> Result<Grid> {
    if img.width == 0 || img.height == 0 || img.values.is_empty() {
        return Err(Error::format("<memory>", "cannot resize an empty image"));
    }
    if out_w == 0 || out_h == 0 {
        return Err(Error::Range(format!("output size {out_w}x{out_h} must be positive")));
    }
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|j| {
            let x = source_coord(j, out_w, img.width);
            let (x1, x2) = bracket(x, img.width);
            (x1, x2, x - x1 as f64)
        })
        .collect();
    let mut values = Vec::with_capacity(out_w * out_h);
    for i in 0..out_h {
        let y = source_coord(i, out_h, img.height);
        let (y1, y2) = bracket(y, img.height);
        let ty = y - y1 as f64;
        for &(x1, x2, tx) in &cols {
            // x2 - x1 = 1, so (x2 - x)/(x2 - x1) = 1 - tx and (x - x1)/(x2 - x1) = tx.
            let f_y1 = (1.0 - tx) * img.at(x1, y1) + tx * img.at(x2, y1);
            let f_y2 = (1.0 - tx) * img.at(x1, y2) + tx * img.at(x2, y2);
            values.push((1.0 - ty) * f_y1 + ty * f_y2);
        }
    }
    Grid::new(out_w, out_h, values)
}

/// Divides by 255, producing an `(H, W, 1)` tensor.
pub fn normalize(grid: &Grid) -> Result<Tensor<f32>> {
    if let Some(bad) = grid.values.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::format("<memory>", format!("pixel value {bad} outside [0, 255]")));
    }
    Tensor::from_vec(
        &[grid.height, grid.width, 1],
        grid.values.iter().map(|&v| (v / 255.0) as f32).collect(),
    )
}

/// Grayscale, resize to 32×32, normalise.
pub fn preprocess_pipeline(img: &RawImage) -> Result<ProcessedImage> {
    let gray = to_grayscale(img)?;
    let resized = bilinear_resize(&Grid::from_gray(&gray)?, INPUT_SIZE, INPUT_SIZE)?;
    Ok(ProcessedImage(normalize(&resized)?))
}

pub fn load_and_preprocess(path: &Path) -> Result<ProcessedImage> {
    let raw = decode_image(path)?;
    preprocess_pipeline(&raw).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path, message),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_grid(w: usize, h: usize, seed: u64) -> Grid {
        let mut rng = seeded_rng(seed);
        Grid::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
    }

    #[test]
    fn grayscale_cases() {
        let gray = RawImage::new(2, 1, 1, vec![7, 200]).unwrap();
        assert_eq!(to_grayscale(&gray).unwrap(), gray);
        let white = RawImage::new(1, 1, 3, vec![255, 255, 255]).unwrap();
        assert_eq!(to_grayscale(&white).unwrap().pixels, vec![255]);
        let red = RawImage::new(1, 1, 3, vec![255, 0, 0]).unwrap();
        assert_eq!(to_grayscale(&red).unwrap().pixels, vec![76]);
        let two = RawImage::new(1, 1, 2, vec![1, 2]).unwrap();
        assert!(to_grayscale(&two).is_err());
    }

    #[test]
    fn same_size_resize_is_identity() {
        let g = random_grid(17, 11, 1);
        assert_eq!(bilinear_resize(&g, 17, 11).unwrap(), g);
    }

    #[test]
    fn constant_stays_constant() {
        let g = Grid::new(5, 7, vec![42.0; 35]).unwrap();
        for (w, h) in [(1, 1), (3, 9), (32, 32), (64, 2)] {
            let r = bilinear_resize(&g, w, h).unwrap();
            assert!(r.values.iter().all(|&v| (v - 42.0).abs() < 1e-12));
        }
    }

    #[test]
    fn two_by_two_upsample() {
        // f(x, y) = x + 2y on the 2×2 grid; output (1, 1) samples (1/3, 1/3).
        let g = Grid::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = bilinear_resize(&g, 4, 4).unwrap();
        assert!((r.at(1, 1) - 1.0).abs() < 1e-12);
        assert!((r.at(3, 3) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn resize_output_shape() {
        let g = random_grid(171, 170, 2);
        let r = bilinear_resize(&g, 32, 32).unwrap();
        assert_eq!((r.width, r.height, r.values.len()), (32, 32, 1024));
        assert!(bilinear_resize(&g, 0, 32).is_err());
    }

    #[test]
    fn normalize_endpoints() {
        let g = Grid::new(3, 1, vec![0.0, 255.0, 128.0]).unwrap();
        let t = normalize(&g).unwrap();
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
        assert!((t.data()[2] as f64 - 128.0 / 255.0).abs() < 1e-7);
        assert!(normalize(&Grid::new(1, 1, vec![256.0]).unwrap()).is_err());
        assert!(normalize(&Grid::new(1, 1, vec![-1.0]).unwrap()).is_err());
    }

    #[test]
    fn pipeline_white_and_shape() {
        let white = RawImage::new(40, 30, 3, vec![255; 3600]).unwrap();
        let p = preprocess_pipeline(&white).unwrap();
        assert_eq!(p.tensor().dims(), &[32, 32, 1]);
        assert!(p.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pipeline_matches_stage_composition() {
        let mut rng = seeded_rng(12);
        for _ in 0..5 {
            let (w, h) = (rng.random_range(5..90), rng.random_range(5..90));
            let pixels: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
            let img = RawImage::new(w, h, 3, pixels).unwrap();
            let got = preprocess_pipeline(&img).unwrap();
            // Stage by stage: integer luminance, then x-then-y interpolation by hand.
            let gray: Vec<f64> = img
                .pixels
                .chunks(3)
                .map(|p| ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as f64)
                .collect();
            for i in 0..32 {
                for j in 0..32 {
                    let y = i as f64 * (h - 1) as f64 / 31.0;
                    let x = j as f64 * (w - 1) as f64 / 31.0;
                    let (x1, y1) = ((x.floor() as usize).min(w - 2), (y.floor() as usize).min(h - 2));
                    let (x2, y2) = (x1 + 1, y1 + 1);
                    let q = |xx: usize, yy: usize| gray[yy * w + xx];
                    let fy1 = (x2 as f64 - x) * q(x1, y1) + (x - x1 as f64) * q(x2, y1);
                    let fy2 = (x2 as f64 - x) * q(x1, y2) + (x - x1 as f64) * q(x2, y2);
                    let want = ((y2 as f64 - y) * fy1 + (y - y1 as f64) * fy2) / 255.0;
                    let v = got.tensor().data()[i * 32 + j] as f64;
                    assert!((v - want).abs() < 1e-6);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn exact_on_affine_fields(
            w in 1usize..20, h in 1usize..20, ow in 1usize..40, oh in 1usize..40,
            a in -5f64..5.0, b in -3f64..3.0, c in -3f64..3.0,
        ) {
            let field = |x: f64, y: f64| a + b * x + c * y;
            let mut vals = Vec::new();
            for y in 0..h { for x in 0..w { vals.push(field(x as f64, y as f64)); } }
            let r = bilinear_resize(&Grid::new(w, h, vals).unwrap(), ow, oh).unwrap();
            for i in 0..oh {
                for j in 0..ow {
                    let want = field(source_coord(j, ow, w), source_coord(i, oh, h));
                    prop_assert!((r.at(j, i) - want).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn output_within_input_range(seed in 0u64..1000, ow in 1usize..50, oh in 1usize..50) {
            let g = random_grid(13, 9, seed);
            let lo = g.values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = g.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let r = bilinear_resize(&g, ow, oh).unwrap();
            prop_assert!(r.values.iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
        }

        #[test]
        fn normalize_monotone(a in 0f64..=255.0, b in 0f64..=255.0) {
            let t = normalize(&Grid::new(2, 1, vec![a, b]).unwrap()).unwrap();
            if a <= b { prop_assert!(t.data()[0] <= t.data()[1]); }
        }
    }
}
