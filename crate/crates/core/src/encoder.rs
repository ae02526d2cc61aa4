//! Per-image feature grids.
//!
//! The built-in encoder summarizes color statistics per grid cell. Deep
//! features computed elsewhere can be plugged in through the `SDF1` file
//! format:
//!
//! ```text
//! b"SDF1" | u32 grid_h | u32 grid_w | u32 dim | f32 × grid_h·grid_w·dim (F1) | f32 × … (F2)
//! ```
//!
//! All integers and floats are little-endian; cells are row-major with the
//! feature axis innermost.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::clustering::even_partition;
use crate::error::{invalid, Error, Result};
use crate::imaging::ImagePair;
use crate::scalar::Scalar;

pub const FEATURE_MAGIC: &[u8; 4] = b"SDF1";
/// Feature depth of the built-in encoder.
pub const DEFAULT_FEATURE_DIM: usize = 9;
pub const DEFAULT_GRID: usize = 14;

/// Feature tensors for both images of a pair, each `grid_h × grid_w × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGridPair<S> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub f1: Vec<S>,
    pub f2: Vec<S>,
}

impl<S: Scalar> FeatureGridPair<S> {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, f1: Vec<S>, f2: Vec<S>) -> Result<Self> {
        let n = grid_h * grid_w * dim;
        if n == 0 {
            return invalid("feature grid dimensions must be nonzero");
        }
        if f1.len() != n || f2.len() != n {
            return invalid(format!("expected {n} values per image, got {} and {}", f1.len(), f2.len()));
        }
        if f1.iter().chain(&f2).any(|v| !v.is_finite()) {
            return invalid("feature values must be finite");
        }
        Ok(Self { grid_h, grid_w, dim, f1, f2 })
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Number of attention locations: every cell of both images.
    pub fn locations(&self) -> usize {
        2 * self.cells()
    }

    /// Feature vector at attention location `l`; the first image's cells come
    /// first.
    #[inline]
    pub fn location(&self, l: usize) -> &[S] {
        let cells = self.cells();
        let (src, cell) = if l < cells { (&self.f1, l) } else { (&self.f2, l - cells) };
        &src[cell * self.dim..(cell + 1) * self.dim]
    }

    /// Per-image mean over cells, concatenated: length `2 · dim`.
    pub fn pooled(&self) -> Vec<S> {
        let n = S::of(self.cells() as f64);
        let mut out = vec![S::zero(); 2 * self.dim];
        for (half, src) in [&self.f1, &self.f2].into_iter().enumerate() {
            for cell in src.chunks_exact(self.dim) {
                for (o, &v) in out[half * self.dim..(half + 1) * self.dim].iter_mut().zip(cell) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= n;
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> FeatureGridPair<T> {
        let conv = |v: &Vec<S>| v.iter().map(|x| T::of(x.as_f64())).collect();
        FeatureGridPair { grid_h: self.grid_h, grid_w: self.grid_w, dim: self.dim, f1: conv(&self.f1), f2: conv(&self.f2) }
    }
}

/// Built-in encoder. Per cell and per image: channel means, channel standard
/// deviations, and the mean absolute cross-image channel difference, all
/// divided by 255, giving nine features in `[0, 1]`.
///
/// Pixels of the second image outside the registered overlap are clamped to
/// the nearest edge pixel.
pub fn encode_pair<S: Scalar>(pair: &ImagePair, grid_h: usize, grid_w: usize) -> Result<FeatureGridPair<S>> {
    let (h, w) = (pair.height(), pair.width());
    if grid_h == 0 || grid_w == 0 || grid_h > h || grid_w > w {
        return invalid(format!("grid {grid_h}x{grid_w} does not fit a {h}x{w} image"));
    }
    let rows = even_partition(h, grid_h);
    let cols = even_partition(w, grid_w);
    let d = DEFAULT_FEATURE_DIM;
    let mut f1 = Vec::with_capacity(grid_h * grid_w * d);
    let mut f2 = Vec::with_capacity(grid_h * grid_w * d);
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            let mut sum = [[0.0f64; 3]; 2];
            let mut sq = [[0.0f64; 3]; 2];
            let mut absdiff = [0.0f64; 3];
            for r in rows[gr]..rows[gr + 1] {
                for c in cols[gc]..cols[gc + 1] {
                    let p = [pair.img1.pixel(r, c), pair.aligned_pixel2_clamped(r, c)];
                    for ch in 0..3 {
                        for img in 0..2 {
                            let v = p[img][ch] as f64;
                            sum[img][ch] += v;
                            sq[img][ch] += v * v;
                        }
                        absdiff[ch] += (p[0][ch] as f64 - p[1][ch] as f64).abs();
                    }
                }
            }
            let n = ((rows[gr + 1] - rows[gr]) * (cols[gc + 1] - cols[gc])) as f64;
            for (img, out) in [&mut f1, &mut f2].into_iter().enumerate() {
                let means: Vec<f64> = (0..3).map(|ch| sum[img][ch] / n).collect();
                out.extend(means.iter().map(|m| S::of(m / 255.0)));
                out.extend((0..3).map(|ch| {
                    let var = (sq[img][ch] / n - means[ch] * means[ch]).max(0.0);
                    S::of(var.sqrt() / 255.0)
                }));
                out.extend(absdiff.iter().map(|a| S::of(a / n / 255.0)));
            }
        }
    }
    FeatureGridPair::new(grid_h, grid_w, d, f1, f2)
}

pub fn write_features<S: Scalar>(feats: &FeatureGridPair<S>, mut out: impl Write) -> Result<()> {
    out.write_all(FEATURE_MAGIC)?;
    for v in [feats.grid_h, feats.grid_w, feats.dim] {
        let v = u32::try_from(v).map_err(|_| Error::InvalidInput(format!("dimension {v} exceeds u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    for v in feats.f1.iter().chain(&feats.f2) {
        let x = v.to_f32().unwrap_or(f32::NAN);
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<S: Scalar>(mut input: impl Read) -> Result<FeatureGridPair<S>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!("feature file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("bad feature file magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (gh, gw, dim) = (u32_at(4), u32_at(8), u32_at(12));
    if gh == 0 || gw == 0 || dim == 0 {
        return Err(Error::Format(format!("zero dimension in header {gh}x{gw}x{dim}")));
    }
    let n = gh
        .checked_mul(gw)
        .and_then(|x| x.checked_mul(dim))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let expected = 16 + 8 * n;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "feature file for {gh}x{gw}x{dim} needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let take = |values: &mut dyn Iterator<Item = f32>| -> Result<Vec<S>> {
        values
            .take(n)
            .map(|x| {
                if x.is_finite() {
                    Ok(S::of(x as f64))
                } else {
                    Err(Error::Format("non-finite feature value".into()))
                }
            })
            .collect()
    };
    let f1 = take(&mut values)?;
    let f2 = take(&mut values)?;
    Ok(FeatureGridPair { grid_h: gh, grid_w: gw, dim, f1, f2 })
}

pub fn save_features<S: Scalar>(feats: &FeatureGridPair<S>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(feats, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a feature file exported by external tooling.
pub fn load_precomputed_features<S: Scalar>(path: impl AsRef<Path>) -> Result<FeatureGridPair<S>> {
    read_features(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{RgbImage, Shift};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn constant_gray_pair() {
        let img = RgbImage::filled(20, 20, [128; 3]).unwrap();
        let pair = ImagePair::new(img.clone(), img, Shift::default()).unwrap();
        let f = encode_pair::<f64>(&pair, 4, 5).unwrap();
        for cell in f.f1.chunks(9) {
            assert!(cell[..3].iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-15));
            assert!(cell[3..].iter().all(|&v| v == 0.0));
        }
        assert_eq!(f.f1, f.f2);
    }

    #[test]
    fn identical_images_have_zero_difference() {
        let img = noise(16, 16, 3);
        let pair = ImagePair::new(img.clone(), img, Shift::default()).unwrap();
        let f = encode_pair::<f64>(&pair, 4, 4).unwrap();
        assert_eq!(f.f1, f.f2);
        assert!(f.f1.chunks(9).all(|c| c[6..].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn matches_per_cell_recomputation() {
        let (a, b) = (noise(23, 17, 1), noise(23, 17, 2));
        let pair = ImagePair::new(a.clone(), b.clone(), Shift::default()).unwrap();
        let f = encode_pair::<f64>(&pair, 5, 4).unwrap();
        // 23 rows into 5 cells: 5,5,5,4,4; 17 cols into 4 cells: 5,4,4,4
        let row_sizes = [5, 5, 5, 4, 4];
        let col_sizes = [5, 4, 4, 4];
        let mut r0 = 0;
        for (gr, &rh) in row_sizes.iter().enumerate() {
            let mut c0 = 0;
            for (gc, &cw) in col_sizes.iter().enumerate() {
                let px: Vec<([u8; 3], [u8; 3])> = (r0..r0 + rh)
                    .flat_map(|r| (c0..c0 + cw).map(move |c| (r, c)))
                    .map(|(r, c)| (a.pixel(r, c), b.pixel(r, c)))
                    .collect();
                let n = px.len() as f64;
                let cell = gr * 4 + gc;
                for ch in 0..3 {
                    let m1 = px.iter().map(|p| p.0[ch] as f64).sum::<f64>() / n;
                    let m2 = px.iter().map(|p| p.1[ch] as f64).sum::<f64>() / n;
                    let s1 = (px.iter().map(|p| (p.0[ch] as f64 - m1).powi(2)).sum::<f64>() / n).sqrt();
                    let dd = px.iter().map(|p| (p.0[ch] as f64 - p.1[ch] as f64).abs()).sum::<f64>() / n;
                    assert!((f.f1[cell * 9 + ch] - m1 / 255.0).abs() < 1e-9);
                    assert!((f.f2[cell * 9 + ch] - m2 / 255.0).abs() < 1e-9);
                    assert!((f.f1[cell * 9 + 3 + ch] - s1 / 255.0).abs() < 1e-9);
                    assert!((f.f1[cell * 9 + 6 + ch] - dd / 255.0).abs() < 1e-9);
                    assert!((f.f2[cell * 9 + 6 + ch] - dd / 255.0).abs() < 1e-9);
                }
                c0 += cw;
            }
            r0 += rh;
        }
    }

    #[test]
    fn swapping_images_swaps_grids() {
        let pair = ImagePair::new(noise(12, 12, 5), noise(12, 12, 6), Shift::default()).unwrap();
        let f = encode_pair::<f64>(&pair, 3, 3).unwrap();
        let g = encode_pair::<f64>(&pair.swapped(), 3, 3).unwrap();
        assert_eq!(f.f1, g.f2);
        assert_eq!(f.f2, g.f1);
        assert!(f.f1.iter().chain(&f.f2).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let pair = ImagePair::new(noise(14, 14, 8), noise(14, 14, 9), Shift::new(1, -1)).unwrap();
        let f = encode_pair::<f32>(&pair, 7, 7).unwrap();
        let mut buf = Vec::new();
        write_features(&f, &mut buf).unwrap();
        let back: FeatureGridPair<f32> = read_features(&buf[..]).unwrap();
        assert_eq!(back, f);
        let mut buf2 = Vec::new();
        write_features(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_or_corrupt_files_fail() {
        let f = FeatureGridPair::<f64>::new(1, 1, 2, vec![0.5, 0.25], vec![1.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_features(&f, &mut buf).unwrap();
        assert!(matches!(read_features::<f64>(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(read_features::<f64>(&buf[..10]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_features::<f64>(&bad[..]), Err(Error::Format(_))));
        let mut nan = buf.clone();
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_features::<f64>(&nan[..]), Err(Error::Format(_))));
    }

    #[test]
    fn accepts_deep_feature_depth() {
        let (gh, gw, d) = (14usize, 14usize, 2048usize);
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SDF1");
        for v in [gh as u32, gw as u32, d as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..2 * gh * gw * d {
            buf.extend_from_slice(&((i % 97) as f32 * 0.5).to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.sdf");
        std::fs::write(&path, &buf).unwrap();
        let f: FeatureGridPair<f64> = load_precomputed_features(&path).unwrap();
        assert_eq!((f.grid_h, f.grid_w, f.dim), (14, 14, 2048));
        assert_eq!(f.f1[5], 2.5);
        assert_eq!(f.f2[0], ((gh * gw * d) % 97) as f64 * 0.5);
    }

    #[test]
    fn pooled_means_per_image() {
        let f = FeatureGridPair::<f64>::new(1, 2, 1, vec![1.0, 3.0], vec![0.0, 4.0]).unwrap();
        assert_eq!(f.pooled(), vec![2.0, 2.0]);
        assert_eq!(f.location(1), &[3.0]);
        assert_eq!(f.location(2), &[0.0]);
    }
}
