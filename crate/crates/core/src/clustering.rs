//! Density-based segmentation of the pixel-difference mask into difference
//! clusters, per-cluster salience features, and projection of cluster masks
//! onto the coarse feature grid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::{BinaryMask, PixelDiffMask};
use crate::scalar::Scalar;

pub const DEFAULT_EPS: f64 = 5.0;
pub const DEFAULT_MIN_PTS: usize = 10;
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Number of salience features per cluster.
pub const NUM_SALIENCE_FEATURES: usize = 4;

/// Salience features `(length, width, area, count)`, each normalized by the
/// image size. Length is the vertical extent.
pub type SalienceFeatures = [f64; NUM_SALIENCE_FEATURES];

/// Inclusive bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceCluster {
    pub id: usize,
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
    pub active_count: usize,
    pub features: SalienceFeatures,
}

impl DifferenceCluster {
    /// Builds a cluster from its mask; `None` when the mask is empty.
    pub fn from_mask(id: usize, mask: BinaryMask) -> Option<Self> {
        let mut bbox: Option<BoundingBox> = None;
        let mut count = 0;
        for (r, c) in mask.active() {
            count += 1;
            bbox = Some(match bbox {
                None => BoundingBox { row_min: r, col_min: c, row_max: r, col_max: c },
                Some(b) => BoundingBox {
                    row_min: b.row_min.min(r),
                    col_min: b.col_min.min(c),
                    row_max: b.row_max.max(r),
                    col_max: b.col_max.max(c),
                },
            });
        }
        let bbox = bbox?;
        let mut cluster = Self { id, features: [0.0; 4], bbox, active_count: count, mask };
        cluster.features = cluster_features(&cluster, cluster.mask.height(), cluster.mask.width());
        Some(cluster)
    }
}

pub fn cluster_features(cluster: &DifferenceCluster, image_h: usize, image_w: usize) -> SalienceFeatures {
    let length = cluster.bbox.height() as f64 / image_h as f64;
    let width = cluster.bbox.width() as f64 / image_w as f64;
    let count = cluster.active_count as f64 / (image_h * image_w) as f64;
    [length, width, length * width, count]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub clusters: Vec<DifferenceCluster>,
    pub noise: BinaryMask,
}

impl ClusterSet {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn salience_features(&self) -> Vec<SalienceFeatures> {
        self.clusters.iter().map(|c| c.features).collect()
    }

    /// Union of every cluster mask (noise excluded).
    pub fn union_mask(&self) -> BinaryMask {
        let mut out = BinaryMask::zeros(self.noise.height(), self.noise.width());
        for cl in &self.clusters {
            for (r, c) in cl.mask.active() {
                out.set(r, c, true);
            }
        }
        out
    }

    /// Per-pixel label image: `Some(k)` for cluster members.
    pub fn labels(&self) -> Vec<Option<usize>> {
        let mut labels = vec![None; self.noise.height() * self.noise.width()];
        let w = self.noise.width();
        for cl in &self.clusters {
            for (r, c) in cl.mask.active() {
                labels[r * w + c] = Some(cl.id);
            }
        }
        labels
    }
}

const UNVISITED: usize = usize::MAX;
const NOISE: usize = usize::MAX - 1;

/// DBSCAN over the active pixels of `mask` with Euclidean distance.
///
/// A pixel is a core point when at least `min_pts` active pixels (itself
/// included) lie within distance `eps`. Seeds are taken in row-major order and
/// each cluster is fully expanded before the next starts, so a border pixel
/// reachable from several clusters belongs to the earliest one.
pub fn dbscan_cluster(mask: &PixelDiffMask, eps: f64, min_pts: usize) -> Result<ClusterSet> {
    dbscan_binary(&mask.mask, eps, min_pts)
}

pub fn dbscan_binary(mask: &BinaryMask, eps: f64, min_pts: usize) -> Result<ClusterSet> {
    if eps.is_nan() || eps <= 0.0 {
        return invalid(format!("eps must be positive, got {eps}"));
    }
    if min_pts == 0 {
        return invalid("min_pts must be at least 1");
    }
    let (h, w) = (mask.height(), mask.width());
    let points: Vec<(usize, usize)> = mask.active().collect();
    // pixel -> point index
    let mut index = vec![UNVISITED; h * w];
    for (i, &(r, c)) in points.iter().enumerate() {
        index[r * w + c] = i;
    }

    let reach = eps.floor() as i64;
    let eps_sq = eps * eps;
    let offsets: Vec<(i64, i64)> = (-reach..=reach)
        .flat_map(|dy| (-reach..=reach).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= eps_sq)
        .collect();
    let neighbors = |i: usize, out: &mut Vec<usize>| {
        out.clear();
        let (r, c) = points[i];
        for &(dy, dx) in &offsets {
            let (nr, nc) = (r as i64 + dy, c as i64 + dx);
            if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                continue;
            }
            let j = index[nr as usize * w + nc as usize];
            if j != UNVISITED {
                out.push(j);
            }
        }
    };

    let mut label = vec![UNVISITED; points.len()];
    let mut n_clusters = 0;
    let mut nbrs = Vec::new();
    let mut inner = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for i in 0..points.len() {
        if label[i] != UNVISITED {
            continue;
        }
        neighbors(i, &mut nbrs);
        if nbrs.len() < min_pts {
            label[i] = NOISE;
            continue;
        }
        let id = n_clusters;
        n_clusters += 1;
        label[i] = id;
        queue.extend(nbrs.iter().copied());
        while let Some(j) = queue.pop_front() {
            if label[j] == NOISE {
                label[j] = id;
            }
            if label[j] != UNVISITED {
                continue;
            }
            label[j] = id;
            neighbors(j, &mut inner);
            if inner.len() >= min_pts {
                queue.extend(inner.iter().copied().filter(|&k| label[k] == UNVISITED || label[k] == NOISE));
            }
        }
    }

    let mut masks = vec![BinaryMask::zeros(h, w); n_clusters];
    let mut noise = BinaryMask::zeros(h, w);
    for (i, &(r, c)) in points.iter().enumerate() {
        match label[i] {
            NOISE => noise.set(r, c, true),
            k => masks[k].set(r, c, true),
        }
    }
    let clusters = masks
        .into_iter()
        .enumerate()
        .map(|(id, m)| DifferenceCluster::from_mask(id, m).expect("every cluster has a core point"))
        .collect();
    Ok(ClusterSet { clusters, noise })
}

/// A cluster mask reduced to the feature grid; values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ProjectedMask<S> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<S>,
}

impl<S: Scalar> ProjectedMask<S> {
    pub fn ones(grid_h: usize, grid_w: usize) -> Self {
        Self { grid_h, grid_w, values: vec![S::one(); grid_h * grid_w] }
    }

    pub fn zeros(grid_h: usize, grid_w: usize) -> Self {
        Self { grid_h, grid_w, values: vec![S::zero(); grid_h * grid_w] }
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.values[r * self.grid_w + c]
    }

    pub fn cast<T: Scalar>(&self) -> ProjectedMask<T> {
        ProjectedMask {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            values: self.values.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

/// Splits `n` items into `parts` contiguous blocks as evenly as possible,
/// earlier blocks one larger. Returns the start offsets plus `n`.
pub fn even_partition(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let extra = n % parts;
    let mut bounds = Vec::with_capacity(parts + 1);
    let mut at = 0;
    bounds.push(0);
    for p in 0..parts {
        at += base + usize::from(p < extra);
        bounds.push(at);
    }
    bounds
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn blur(mask: &BinaryMask, sigma: f64) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let src: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return src;
    }
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[r * w + reflect(c as i64 + k as i64 - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(r as i64 + k as i64 - radius, h) * w + c])
                .sum();
        }
    }
    out
}

/// Gaussian-smooths a binary mask (unit-sum kernel truncated at 3σ, reflective
/// borders) and block-averages it onto a `grid_h × grid_w` grid.
pub fn project_mask<S: Scalar>(mask: &BinaryMask, grid_h: usize, grid_w: usize, sigma: f64) -> Result<ProjectedMask<S>> {
    if grid_h == 0 || grid_w == 0 || grid_h > mask.height() || grid_w > mask.width() {
        return invalid(format!(
            "grid {grid_h}x{grid_w} must be nonempty and no larger than the {}x{} mask",
            mask.height(),
            mask.width()
        ));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return invalid(format!("sigma must be a finite non-negative number, got {sigma}"));
    }
    let w = mask.width();
    let smooth = blur(mask, sigma);
    let rows = even_partition(mask.height(), grid_h);
    let cols = even_partition(w, grid_w);
    let mut values = Vec::with_capacity(grid_h * grid_w);
    for gr in 0..grid_h {
        for gc in 0..grid_w {
            let mut sum = 0.0;
            for r in rows[gr]..rows[gr + 1] {
                sum += smooth[r * w + cols[gc]..r * w + cols[gc + 1]].iter().sum::<f64>();
            }
            let n = (rows[gr + 1] - rows[gr]) * (cols[gc + 1] - cols[gc]);
            values.push(S::of((sum / n as f64).clamp(0.0, 1.0)));
        }
    }
    Ok(ProjectedMask { grid_h, grid_w, values })
}
