//! Image pairs, translation registration and the pixel-difference mask.
//!
//! Shift convention: a shift `(dy, dx)` means pixel `(r, c)` of the first
//! image corresponds to pixel `(r + dy, c + dx)` of the second. Only the
//! overlap region is ever compared; everything downstream stays in the
//! coordinate frame of the first image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Default intensity-distance threshold on the 0..255 scale.
pub const DEFAULT_DELTA: f64 = 30.0;
/// Default search radius for registration.
pub const DEFAULT_MAX_SHIFT: usize = 5;

/// 8-bit RGB image stored row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("image dimensions must be at least 1x1");
        }
        if data.len() != height * width * 3 {
            return invalid(format!(
                "expected {} bytes for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Decodes PNG or JPEG. Alpha is dropped and grayscale is replicated.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    fn same_dims(&self, other: &RgbImage) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[inline]
fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    let sq: i32 = a
        .iter()
        .zip(&b)
        .map(|(&x, &y)| {
            let d = x as i32 - y as i32;
            d * d
        })
        .sum();
    (sq as f64).sqrt()
}

/// Translation of the second image relative to the first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shift {
    pub dy: i32,
    pub dx: i32,
}

impl Shift {
    pub fn new(dy: i32, dx: i32) -> Self {
        Self { dy, dx }
    }

    /// Half-open row and column ranges of the first image that overlap the
    /// shifted second image.
    pub fn overlap(&self, height: usize, width: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let span = |d: i32, n: usize| {
            let lo = (-d).max(0) as usize;
            let hi = (n as i64 - d as i64).clamp(0, n as i64) as usize;
            lo.min(hi)..hi
        };
        (span(self.dy, height), span(self.dx, width))
    }
}

/// Mean per-pixel color distance over the overlap of `img1` and `img2`
/// under `shift`. Infinite when the overlap is empty.
pub fn mean_shift_distance(img1: &RgbImage, img2: &RgbImage, shift: Shift) -> f64 {
    let (rows, cols) = shift.overlap(img1.height, img1.width);
    let n = rows.len() * cols.len();
    if n == 0 {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    for r in rows {
        let r2 = (r as i64 + shift.dy as i64) as usize;
        for c in cols.clone() {
            let c2 = (c as i64 + shift.dx as i64) as usize;
            total += color_distance(img1.pixel(r, c), img2.pixel(r2, c2));
        }
    }
    total / n as f64
}

/// Finds the shift in `[-max_shift, max_shift]^2` minimizing the mean
/// per-pixel distance. Ties go to the smallest `|dy| + |dx|`, then the
/// smallest `dy`, then the smallest `dx`.
pub fn align_pair(img1: &RgbImage, img2: &RgbImage, max_shift: usize) -> Result<Shift> {
    if !img1.same_dims(img2) {
        return invalid(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            img1.height, img1.width, img2.height, img2.width
        ));
    }
    if 2 * max_shift >= img1.height.min(img1.width) && max_shift > 0 {
        return invalid(format!(
            "max shift {max_shift} must be below half the smaller image side ({})",
            img1.height.min(img1.width)
        ));
    }
    let m = max_shift as i32;
    let mut best: Option<(f64, i32, i32, i32)> = None;
    for dy in -m..=m {
        for dx in -m..=m {
            let d = mean_shift_distance(img1, img2, Shift::new(dy, dx));
            let key = (d, dy.abs() + dx.abs(), dy, dx);
            let better = match best {
                None => true,
                Some(b) => key.partial_cmp(&b) == Some(std::cmp::Ordering::Less),
            };
            if better {
                best = Some(key);
            }
        }
    }
    let (_, _, dy, dx) = best.expect("search space is never empty");
    Ok(Shift::new(dy, dx))
}

/// Two same-sized images plus the registration shift of the second.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub img1: RgbImage,
    pub img2: RgbImage,
    pub shift: Shift,
}

impl ImagePair {
    /// Pairs two images with an explicit shift.
    pub fn new(img1: RgbImage, img2: RgbImage, shift: Shift) -> Result<Self> {
        if !img1.same_dims(&img2) {
            return invalid("image dimensions differ");
        }
        let max = (img1.height.min(img1.width) / 2) as i32;
        if shift.dy.abs() > max || shift.dx.abs() > max {
            return invalid(format!("shift {shift:?} too large for the image"));
        }
        Ok(Self { img1, img2, shift })
    }

    /// Pairs two images and registers them by exhaustive translation search.
    pub fn register(img1: RgbImage, img2: RgbImage, max_shift: usize) -> Result<Self> {
        let shift = align_pair(&img1, &img2, max_shift)?;
        Ok(Self { img1, img2, shift })
    }

    pub fn height(&self) -> usize {
        self.img1.height
    }

    pub fn width(&self) -> usize {
        self.img1.width
    }

    /// Pixel of the registered second image at `(r, c)` in the first image's
    /// frame, or `None` outside the overlap.
    #[inline]
    pub fn aligned_pixel2(&self, r: usize, c: usize) -> Option<[u8; 3]> {
        let r2 = r as i64 + self.shift.dy as i64;
        let c2 = c as i64 + self.shift.dx as i64;
        if r2 < 0 || c2 < 0 || r2 >= self.img2.height as i64 || c2 >= self.img2.width as i64 {
            return None;
        }
        Some(self.img2.pixel(r2 as usize, c2 as usize))
    }

    /// Same as [`aligned_pixel2`](Self::aligned_pixel2) but clamps to the
    /// nearest edge pixel outside the overlap.
    #[inline]
    pub fn aligned_pixel2_clamped(&self, r: usize, c: usize) -> [u8; 3] {
        let r2 = (r as i64 + self.shift.dy as i64).clamp(0, self.img2.height as i64 - 1);
        let c2 = (c as i64 + self.shift.dx as i64).clamp(0, self.img2.width as i64 - 1);
        self.img2.pixel(r2 as usize, c2 as usize)
    }

    /// The same pair with the roles of the two images exchanged.
    pub fn swapped(&self) -> ImagePair {
        ImagePair {
            img1: self.img2.clone(),
            img2: self.img1.clone(),
            shift: Shift::new(-self.shift.dy, -self.shift.dx),
        }
    }
}

/// Binary H×W matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return invalid(format!("mask needs {} bits, got {}", height * width, bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.bits[r * self.width + c] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Active coordinates in row-major order.
    pub fn active(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i / w, i % w))
    }

    /// Elementwise OR; dimensions must agree.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.height != other.height || self.width != other.width {
            return invalid("mask dimensions differ");
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(BinaryMask { height: self.height, width: self.width, bits })
    }

    /// White-on-black grayscale rendering.
    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_fn(self.height, self.width, |r, c| if self.get(r, c) { [255; 3] } else { [0; 3] })
            .expect("mask dimensions are nonzero")
    }
}

/// The pixel-difference mask, zero-padded to the first image's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelDiffMask {
    pub mask: BinaryMask,
    pub delta: f64,
}

impl PixelDiffMask {
    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }
}

/// Marks pixels whose color vectors differ by more than `delta` (L2 on the
/// 0..255 scale). Pixels outside the registered overlap stay zero.
pub fn compute_diff_mask(pair: &ImagePair, delta: f64) -> Result<PixelDiffMask> {
    if delta.is_nan() || delta <= 0.0 {
        return invalid(format!("delta must be positive, got {delta}"));
    }
    let mask = BinaryMask::from_fn(pair.height(), pair.width(), |r, c| match pair.aligned_pixel2(r, c) {
        Some(p2) => color_distance(pair.img1.pixel(r, c), p2) > delta,
        None => false,
    });
    Ok(PixelDiffMask { mask, delta })
}

/// Whole-image L2 distance between two same-sized images, over all pixels and
/// channels.
pub fn image_l2_distance(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if !a.same_dims(b) {
        return invalid("image dimensions differ");
    }
    let sq: u64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    Ok((sq as f64).sqrt())
}
