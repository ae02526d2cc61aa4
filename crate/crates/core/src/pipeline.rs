//! From a raw image pair to everything the model consumes: feature grids,
//! per-cluster projected masks and salience features.

use serde::{Deserialize, Serialize};

use crate::clustering::{dbscan_cluster, project_mask, ClusterSet, ProjectedMask, DEFAULT_EPS, DEFAULT_MIN_PTS, DEFAULT_SIGMA};
use crate::encoder::{encode_pair, FeatureGridPair, DEFAULT_GRID};
use crate::error::{invalid, Result};
use crate::imaging::{compute_diff_mask, ImagePair, RgbImage, DEFAULT_DELTA, DEFAULT_MAX_SHIFT};
use crate::prior::{salience_of, Salience};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub delta: f64,
    pub max_shift: usize,
    pub eps: f64,
    pub min_pts: usize,
    pub sigma: f64,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            max_shift: DEFAULT_MAX_SHIFT,
            eps: DEFAULT_EPS,
            min_pts: DEFAULT_MIN_PTS,
            sigma: DEFAULT_SIGMA,
            grid_h: DEFAULT_GRID,
            grid_w: DEFAULT_GRID,
        }
    }
}

/// A registered pair reduced to model inputs. Cluster `k` owns `masks[k]`,
/// `salience[k]` and `bbox_areas[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair<S> {
    pub id: String,
    pub feats: FeatureGridPair<S>,
    pub salience: Vec<Salience<S>>,
    pub masks: Vec<ProjectedMask<S>>,
    pub bbox_areas: Vec<usize>,
    pub union_mask: ProjectedMask<S>,
    pub full_mask: ProjectedMask<S>,
}

impl<S: Scalar> PreparedPair<S> {
    pub fn new(
        id: impl Into<String>,
        feats: FeatureGridPair<S>,
        salience: Vec<Salience<S>>,
        masks: Vec<ProjectedMask<S>>,
        bbox_areas: Vec<usize>,
        union_mask: ProjectedMask<S>,
    ) -> Result<Self> {
        if salience.len() != masks.len() || bbox_areas.len() != masks.len() {
            return invalid("per-cluster salience, masks and areas differ in length");
        }
        let grid = (feats.grid_h, feats.grid_w);
        if masks.iter().chain([&union_mask]).any(|m| (m.grid_h, m.grid_w) != grid) {
            return invalid("projected mask grid does not match the feature grid");
        }
        let full_mask = ProjectedMask::ones(feats.grid_h, feats.grid_w);
        Ok(Self { id: id.into(), feats, salience, masks, bbox_areas, union_mask, full_mask })
    }

    /// Number of difference clusters.
    pub fn k(&self) -> usize {
        self.masks.len()
    }

    /// Builds the model inputs from clustering output and a feature grid.
    pub fn from_clusters(id: impl Into<String>, clusters: &ClusterSet, feats: FeatureGridPair<S>, sigma: f64) -> Result<Self> {
        let (gh, gw) = (feats.grid_h, feats.grid_w);
        let masks = clusters.clusters.iter().map(|c| project_mask(&c.mask, gh, gw, sigma)).collect::<Result<Vec<_>>>()?;
        let union_mask = if clusters.is_empty() {
            ProjectedMask::zeros(gh, gw)
        } else {
            project_mask(&clusters.union_mask(), gh, gw, sigma)?
        };
        let salience = clusters.salience_features().iter().map(salience_of).collect();
        let areas = clusters.clusters.iter().map(|c| c.bbox.area()).collect();
        Self::new(id, feats, salience, masks, areas, union_mask)
    }

    pub fn cast<T: Scalar>(&self) -> PreparedPair<T> {
        PreparedPair {
            id: self.id.clone(),
            feats: self.feats.cast(),
            salience: self.salience.iter().map(|g| g.map(|v| T::of(v.as_f64()))).collect(),
            masks: self.masks.iter().map(ProjectedMask::cast).collect(),
            bbox_areas: self.bbox_areas.clone(),
            union_mask: self.union_mask.cast(),
            full_mask: self.full_mask.cast(),
        }
    }
}

/// Registration, difference mask and clustering.
pub fn cluster_pair(img1: RgbImage, img2: RgbImage, config: &VisionConfig) -> Result<(ImagePair, ClusterSet)> {
    let pair = ImagePair::register(img1, img2, config.max_shift)?;
    let mask = compute_diff_mask(&pair, config.delta)?;
    let clusters = dbscan_cluster(&mask, config.eps, config.min_pts)?;
    Ok((pair, clusters))
}

/// Full vision pipeline with the built-in encoder.
pub fn prepare_pair<S: Scalar>(id: impl Into<String>, img1: RgbImage, img2: RgbImage, config: &VisionConfig) -> Result<(PreparedPair<S>, ClusterSet)> {
    let (pair, clusters) = cluster_pair(img1, img2, config)?;
    let feats = encode_pair(&pair, config.grid_h, config.grid_w)?;
    let prepared = PreparedPair::from_clusters(id, &clusters, feats, config.sigma)?;
    Ok((prepared, clusters))
}

/// Vision pipeline with externally computed features; masks are projected
/// onto the imported grid.
pub fn prepare_with_features<S: Scalar>(
    id: impl Into<String>,
    img1: RgbImage,
    img2: RgbImage,
    feats: FeatureGridPair<S>,
    config: &VisionConfig,
) -> Result<(PreparedPair<S>, ClusterSet)> {
    let (_, clusters) = cluster_pair(img1, img2, config)?;
    let prepared = PreparedPair::from_clusters(id, &clusters, feats, config.sigma)?;
    Ok((prepared, clusters))
}
