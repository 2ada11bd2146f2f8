// SPDX-License-Identifier: MIT OR Apache-2.0

//! RGB images, box annotations and the preprocessing that turns an image
//! into the patch sequence fed to the encoder.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::bundle::Manifest;
use crate::tensor::Tensor;

/// Axis-aligned labelled box in pixel coordinates, half-open: `[x0, x1) × [y0, y1)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub label: String,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoxAnnotation {
    pub fn new(label: impl Into<String>, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self {
            label: label.into(),
            x0,
            y0,
            x1,
            y1,
        }
    }

    pub fn area(&self) -> u64 {
        (self.x1 - self.x0) as u64 * (self.y1 - self.y0) as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > width || self.y1 > height {
            return Err(Error::Input(format!(
                "box `{}` ({},{})-({},{}) invalid for a {width}x{height} image",
                self.label, self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(())
    }
}

/// Number of pixels covered by the union of `boxes` inside a `width × height` image.
pub fn union_area(boxes: &[BoxAnnotation], width: u32, height: u32) -> u64 {
    let mut covered = vec![false; width as usize * height as usize];
    for b in boxes {
        for y in b.y0..b.y1.min(height) {
            for x in b.x0..b.x1.min(width) {
                covered[y as usize * width as usize + x as usize] = true;
            }
        }
    }
    covered.iter().filter(|&&c| c).count() as u64
}

/// 8-bit RGB image with optional box annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    width: u32,
    height: u32,
    /// Row-major RGB triples.
    pixels: Vec<u8>,
    pub boxes: Vec<BoxAnnotation>,
}

impl ImageInput {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, boxes: Vec<BoxAnnotation>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("degenerate image {width}x{height}")));
        }
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(Error::Input(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width as usize * height as usize * 3
            )));
        }
        for b in &boxes {
            b.validate(width, height)?;
        }
        Ok(Self {
            width,
            height,
            pixels,
            boxes,
        })
    }

    pub fn solid(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self::new(width, height, pixels, Vec::new())
    }

    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw(), Vec::new())
    }

    pub fn from_encoded(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw(), Vec::new())
    }

    pub fn with_boxes(mut self, boxes: Vec<BoxAnnotation>) -> Result<Self> {
        for b in &boxes {
            b.validate(self.width, self.height)?;
        }
        self.boxes = boxes;
        Ok(self)
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

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, rgb: [u8; 3]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set_pixel(x, y, rgb);
            }
        }
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.pixels.clone()).expect("buffer size checked")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb_image().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb_image().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Geometry of the resize-then-center-crop step for one source image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub resized_w: u32,
    pub resized_h: u32,
    pub left: u32,
    pub top: u32,
    pub size: u32,
}

impl CropGeometry {
    pub fn new(width: u32, height: u32, size: u32) -> Self {
        let (resized_w, resized_h) = if width <= height {
            (size, ((height as u64 * size as u64) as f64 / width as f64).round().max(size as f64) as u32)
        } else {
            (((width as u64 * size as u64) as f64 / height as f64).round().max(size as f64) as u32, size)
        };
        Self {
            resized_w,
            resized_h,
            left: (resized_w - size) / 2,
            top: (resized_h - size) / 2,
            size,
        }
    }

    /// Maps a source-pixel box into model-input pixel space, clipped to the crop.
    /// Returns `None` when the box falls entirely outside the crop.
    pub fn map_box(&self, b: &BoxAnnotation, width: u32, height: u32) -> Option<BoxAnnotation> {
        let sx = self.resized_w as f64 / width as f64;
        let sy = self.resized_h as f64 / height as f64;
        let tx = |x: u32| ((x as f64 * sx).round() as i64 - self.left as i64).clamp(0, self.size as i64) as u32;
        let ty = |y: u32| ((y as f64 * sy).round() as i64 - self.top as i64).clamp(0, self.size as i64) as u32;
        let (x0, x1, y0, y1) = (tx(b.x0), tx(b.x1), ty(b.y0), ty(b.y1));
        (x0 < x1 && y0 < y1).then(|| BoxAnnotation::new(b.label.clone(), x0, y0, x1, y1))
    }
}

/// Bilinear resize (half-pixel centers, edge clamped) of interleaved RGB data,
/// applied separably: horizontal pass then vertical pass.
fn resize_bilinear(src: &[f32], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f32> {
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xt = taps(nw, w);
    let mut horiz = vec![0.0f32; h * nw * 3];
    for y in 0..h {
        for (x, &(x0, x1, f)) in xt.iter().enumerate() {
            for c in 0..3 {
                let a = src[(y * w + x0) * 3 + c];
                let b = src[(y * w + x1) * 3 + c];
                horiz[(y * nw + x) * 3 + c] = a + (b - a) * f;
            }
        }
    }
    let yt = taps(nh, h);
    let mut out = vec![0.0f32; nh * nw * 3];
    for (y, &(y0, y1, f)) in yt.iter().enumerate() {
        for x in 0..nw {
            for c in 0..3 {
                let a = horiz[(y0 * nw + x) * 3 + c];
                let b = horiz[(y1 * nw + x) * 3 + c];
                out[(y * nw + x) * 3 + c] = a + (b - a) * f;
            }
        }
    }
    out
}

/// Resize shortest side to `image_size` (bilinear), center crop, scale to
/// `[0, 1]`, normalize per channel, and cut into `P×P` patches in row-major
/// patch order. Each patch is flattened channel-major (`c, y, x`).
pub fn preprocess(image: &ImageInput, manifest: &Manifest) -> Result<Tensor> {
    let size = manifest.image_size;
    let crop = resized_crop(image, size);
    let p = manifest.patch_size;
    let g = manifest.grid();
    let mut data = Vec::with_capacity(g * g * manifest.patch_dim());
    for py in 0..g {
        for px in 0..g {
            for c in 0..3 {
                let (mean, std) = (manifest.preprocess_mean[c], manifest.preprocess_std[c]);
                for y in 0..p {
                    let row = py * p + y;
                    for x in 0..p {
                        let col = px * p + x;
                        let v = crop[(row * size + col) * 3 + c] / 255.0;
                        data.push((v - mean) / std);
                    }
                }
            }
        }
    }
    Tensor::new(vec![g * g, manifest.patch_dim()], data)
}

/// The `size × size` RGB crop seen by the model, as `f32` in `[0, 255]`.
fn resized_crop(image: &ImageInput, size: usize) -> Vec<f32> {
    let (w, h) = (image.width as usize, image.height as usize);
    let geo = CropGeometry::new(image.width, image.height, size as u32);
    let (nw, nh) = (geo.resized_w as usize, geo.resized_h as usize);
    let src: Vec<f32> = image.pixels.iter().map(|&p| p as f32).collect();
    let resized = if nw == w && nh == h {
        src
    } else {
        resize_bilinear(&src, w, h, nw, nh)
    };
    let (left, top) = (geo.left as usize, geo.top as usize);
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let start = ((top + y) * nw + left) * 3;
        out.extend_from_slice(&resized[start..start + size * 3]);
    }
    out
}

/// The model-input crop as an 8-bit image, for overlays and thumbnails.
pub fn model_view(image: &ImageInput, size: usize) -> Result<ImageInput> {
    let crop = resized_crop(image, size);
    let pixels = crop.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    ImageInput::new(size as u32, size as u32, pixels, Vec::new())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    /// The preprocessing mean, which normalizes to zero.
    #[default]
    Mean,
    /// Black pixels.
    Zero,
}

impl MaskFill {
    pub fn color(self, manifest: &Manifest) -> [u8; 3] {
        match self {
            MaskFill::Mean => manifest
                .preprocess_mean
                .map(|m| (m as f64 * 255.0).round().clamp(0.0, 255.0) as u8),
            MaskFill::Zero => [0, 0, 0],
        }
    }
}

/// Replaces every pixel inside the union of `boxes` with the fill color.
pub fn mask_boxes(image: &ImageInput, boxes: &[BoxAnnotation], fill: MaskFill, manifest: &Manifest) -> Result<ImageInput> {
    for b in boxes {
        b.validate(image.width, image.height)?;
    }
    let color = fill.color(manifest);
    let mut out = image.clone();
    for b in boxes {
        out.fill_rect(b.x0, b.y0, b.x1, b.y1, color);
    }
    Ok(out)
}

/// One uniformly placed rectangle whose area matches the union area of
/// `boxes` (exactly when a divisor pair fits in the image, else to within
/// half a row). Deterministic in `seed`.
pub fn random_mask_like(boxes: &[BoxAnnotation], width: u32, height: u32, seed: u64) -> Result<Vec<BoxAnnotation>> {
    if width == 0 || height == 0 {
        return Err(Error::Input("random mask in an empty image".into()));
    }
    let target = union_area(boxes, width, height);
    if target == 0 {
        return Ok(Vec::new());
    }
    let (rw, rh) = rectangle_for_area(target, width, height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.random_range(0..=width - rw);
    let y0 = rng.random_range(0..=height - rh);
    Ok(vec![BoxAnnotation::new("random", x0, y0, x0 + rw, y0 + rh)])
}

/// Width and height of a rectangle with the requested area that fits in the
/// image, preferring the aspect ratio closest to the image's own.
pub fn rectangle_for_area(area: u64, width: u32, height: u32) -> Result<(u32, u32)> {
    if area > width as u64 * height as u64 {
        return Err(Error::Input(format!(
            "mask area {area} exceeds image area {}",
            width as u64 * height as u64
        )));
    }
    let aspect = (width as f64 / height as f64).ln();
    let exact = (1..=width.min(area as u32))
        .filter(|&rw| area % rw as u64 == 0 && area / (rw as u64) <= height as u64)
        .map(|rw| (rw, (area / rw as u64) as u32))
        .min_by(|a, b| {
            let da = ((a.0 as f64 / a.1 as f64).ln() - aspect).abs();
            let db = ((b.0 as f64 / b.1 as f64).ln() - aspect).abs();
            da.total_cmp(&db)
        });
    if let Some(r) = exact {
        return Ok(r);
    }
    let rw = ((area as f64 * width as f64 / height as f64).sqrt().round() as u32).clamp(1, width);
    let rh = ((area as f64 / rw as f64).round() as u32).clamp(1, height);
    Ok((rw, rh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ActivationKind;

    fn manifest(image_size: usize, patch: usize) -> Manifest {
        Manifest {
            format_version: 1,
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 1,
            patch_size: patch,
            image_size,
            mlp_dim: 8,
            joint_dim: 8,
            activation: ActivationKind::QuickGelu,
            ln_eps: 1e-5,
            preprocess_mean: [128.0 / 255.0, 64.0 / 255.0, 200.0 / 255.0],
            preprocess_std: [0.25, 0.5, 0.3],
        }
    }

    #[test]
    fn mean_colored_image_maps_to_zero() {
        let m = manifest(8, 4);
        for (w, h) in [(8, 8), (13, 9), (5, 20)] {
            let img = ImageInput::solid(w, h, [128, 64, 200]).unwrap();
            let t = preprocess(&img, &m).unwrap();
            assert_eq!(t.shape(), &[4, 48]);
            assert!(t.data().iter().all(|&v| v == 0.0), "{w}x{h}");
        }
    }

    #[test]
    fn no_resample_path_is_pure_arithmetic() {
        let m = manifest(4, 2);
        let mut px = Vec::new();
        for i in 0..16u32 {
            px.extend([(i * 10) as u8, 0, 255]);
        }
        let img = ImageInput::new(4, 4, px, vec![]).unwrap();
        let t = preprocess(&img, &m).unwrap();
        // patch 1 covers columns 2..4 of rows 0..2; first value is R of pixel (2,0)
        let expect = (20.0f32 / 255.0 - m.preprocess_mean[0]) / m.preprocess_std[0];
        assert_eq!(t.row(1)[0], expect);
        // channel-major: G block starts after P*P red values
        let g = (0.0f32 / 255.0 - m.preprocess_mean[1]) / m.preprocess_std[1];
        assert_eq!(t.row(1)[4], g);
    }

    /// Direct per-pixel bilinear sampling in f64, written without the
    /// separable passes or the crop bookkeeping of the implementation.
    fn reference_preprocess(img: &ImageInput, m: &Manifest) -> Vec<f64> {
        let (w, h) = (img.width() as f64, img.height() as f64);
        let s = m.image_size as f64;
        let scale = s / w.min(h);
        let (nw, nh) = ((w * scale).round().max(s), (h * scale).round().max(s));
        let (left, top) = (((nw - s) / 2.0).floor(), ((nh - s) / 2.0).floor());
        let sample = |c: usize, ox: f64, oy: f64| -> f64 {
            let sx = ((ox + 0.5) * w / nw - 0.5).clamp(0.0, w - 1.0);
            let sy = ((oy + 0.5) * h / nh - 0.5).clamp(0.0, h - 1.0);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (x1, y1) = ((x0 + 1.0).min(w - 1.0), (y0 + 1.0).min(h - 1.0));
            let (fx, fy) = (sx - x0, sy - y0);
            let p = |x: f64, y: f64| img.pixel(x as u32, y as u32)[c] as f64;
            let top_row = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bot_row = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            top_row * (1.0 - fy) + bot_row * fy
        };
        let p = m.patch_size;
        let g = m.grid();
        let mut out = Vec::new();
        for py in 0..g {
            for px in 0..g {
                for c in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            let v = sample(c, left + (px * p + x) as f64, top + (py * p + y) as f64) / 255.0;
                            out.push((v - m.preprocess_mean[c] as f64) / m.preprocess_std[c] as f64);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn checkerboard_matches_reference_preprocessor() {
        let m = manifest(16, 4);
        for (w, h, cell) in [(37, 23, 3), (16, 40, 5), (50, 50, 7)] {
            let mut img = ImageInput::solid(w, h, [0, 0, 0]).unwrap();
            for y in 0..h {
                for x in 0..w {
                    if (x / cell + y / cell) % 2 == 0 {
                        img.set_pixel(x, y, [250, (x * 5) as u8, (y * 3) as u8]);
                    }
                }
            }
            let t = preprocess(&img, &m).unwrap();
            let r = reference_preprocess(&img, &m);
            let max = t.data().iter().zip(&r).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
            assert!(max < 1e-3, "{w}x{h}: {max}");
        }
    }

    #[test]
    fn degenerate_images_rejected() {
        assert!(ImageInput::new(0, 4, vec![], vec![]).is_err());
        assert!(ImageInput::solid(4, 4, [0; 3]).unwrap().with_boxes(vec![BoxAnnotation::new("x", 2, 0, 2, 1)]).is_err());
        assert!(ImageInput::solid(4, 4, [0; 3]).unwrap().with_boxes(vec![BoxAnnotation::new("x", 0, 0, 5, 1)]).is_err());
    }

    #[test]
    fn masking() {
        let m = manifest(8, 4);
        let img = ImageInput::solid(8, 8, [10, 20, 30]).unwrap();
        assert_eq!(mask_boxes(&img, &[], MaskFill::Mean, &m).unwrap(), img);

        let whole = mask_boxes(&img, &[BoxAnnotation::new("all", 0, 0, 8, 8)], MaskFill::Mean, &m).unwrap();
        assert!(preprocess(&whole, &m).unwrap().data().iter().all(|&v| v == 0.0));

        let boxes = [BoxAnnotation::new("a", 1, 1, 5, 4), BoxAnnotation::new("b", 3, 2, 7, 7)];
        let masked = mask_boxes(&img, &boxes, MaskFill::Zero, &m).unwrap();
        let mut changed = 0;
        for y in 0..8 {
            for x in 0..8 {
                let inside = boxes.iter().any(|b| b.contains(x, y));
                if masked.pixel(x, y) != img.pixel(x, y) {
                    assert!(inside);
                    changed += 1;
                } else {
                    assert!(!inside);
                }
            }
        }
        // 12 + 20 - overlap (x 3..5, y 2..4 → 4)
        assert_eq!(changed, 28);
        assert_eq!(union_area(&boxes, 8, 8), 28);
    }

    #[test]
    fn random_mask_basics() {
        assert!(random_mask_like(&[], 10, 10, 1).unwrap().is_empty());
        let b = [BoxAnnotation::new("o", 0, 0, 4, 3)];
        assert_eq!(random_mask_like(&b, 10, 10, 9).unwrap(), random_mask_like(&b, 10, 10, 9).unwrap());
        assert!(random_mask_like(&[BoxAnnotation::new("o", 0, 0, 10, 10)], 10, 10, 0).is_ok());
        assert!(rectangle_for_area(101, 10, 10).is_err());
    }

    #[test]
    fn random_mask_monte_carlo() {
        let (w, h) = (20u32, 20u32);
        let exact = [BoxAnnotation::new("o", 0, 0, 4, 3)];
        let (rw, _) = rectangle_for_area(12, w, h).unwrap();
        let mut counts = vec![0u32; (w - rw) as usize + 1];
        for seed in 0..10_000u64 {
            let r = &random_mask_like(&exact, w, h, seed).unwrap()[0];
            assert_eq!(r.area(), 12);
            assert!(r.x1 <= w && r.y1 <= h);
            counts[r.x0 as usize] += 1;
        }
        // chi-square over x0 positions: 17 bins, 16 dof, 99.9% critical value 39.25
        let expected = 10_000.0 / counts.len() as f64;
        let chi: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi < 39.25, "chi-square {chi} {counts:?}");

        // 37 is prime and larger than the image side: no exact rectangle exists
        let (rw, rh) = rectangle_for_area(37, 19, 19).unwrap();
        assert!((rw as i64 * rh as i64 - 37).unsigned_abs() <= rw as u64 / 2);
        assert_eq!(rectangle_for_area(39, 19, 19).unwrap(), (3, 13));
    }
}
