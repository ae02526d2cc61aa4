//! On-disk cache of prepared pairs.
//!
//! Layout: `index.json` maps image ids to content keys; each key names an
//! `entries/<key>.sdf` feature file and an `entries/<key>.json` with the
//! cluster masks and salience features. A key hashes the image bytes, the
//! imported feature bytes (if any) and the vision settings, so rerunning
//! preprocessing only recomputes what changed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spotdiff::clustering::ProjectedMask;
use spotdiff::corpus::{image_paths, AnnotationRecord};
use spotdiff::encoder::{load_precomputed_features, save_features, FeatureGridPair};
use spotdiff::imaging::RgbImage;
use spotdiff::pipeline::{prepare_pair, prepare_with_features, VisionConfig};
use spotdiff::prior::Salience;
use spotdiff::PreparedPair64;

pub const INDEX_FILE: &str = "index.json";
const ENTRY_DIR: &str = "entries";
const KEY_DOMAIN: &[u8] = b"spotdiff-cache-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Builtin,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub vision: VisionConfig,
    pub features: FeatureSource,
    /// Image id to entry key.
    pub entries: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    img_id: String,
    k: usize,
    salience: Vec<Salience<f64>>,
    bbox_areas: Vec<usize>,
    masks: Vec<ProjectedMask<f64>>,
    union_mask: ProjectedMask<f64>,
}

/// What one preprocessing run did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildSummary {
    pub pairs: usize,
    pub computed: usize,
    pub reused: usize,
    pub without_differences: usize,
}

pub fn entry_key(img1: &[u8], img2: &[u8], features: Option<&[u8]>, vision: &VisionConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(KEY_DOMAIN);
    h.update(serde_json::to_vec(vision)?);
    for part in [Some(img1), Some(img2), features] {
        match part {
            Some(bytes) => {
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(bytes);
            }
            None => h.update(u64::MAX.to_le_bytes()),
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Features rounded the way the cache stores them.
pub fn as_stored(feats: &FeatureGridPair<f64>) -> FeatureGridPair<f64> {
    feats.cast::<f32>().cast()
}

pub struct BuildRequest<'a> {
    pub records: &'a [AnnotationRecord],
    pub img_dir: &'a Path,
    pub second_suffix: &'a str,
    pub features_dir: Option<&'a Path>,
    pub vision: VisionConfig,
    pub out: &'a Path,
}

pub fn build(req: &BuildRequest) -> Result<BuildSummary> {
    let entry_dir = req.out.join(ENTRY_DIR);
    fs::create_dir_all(&entry_dir).with_context(|| format!("creating {}", entry_dir.display()))?;
    let results = req
        .records
        .par_iter()
        .map(|r| build_entry(req, &entry_dir, r).with_context(|| format!("pair {}", r.img_id)))
        .collect::<Result<Vec<_>>>()?;
    let mut summary = BuildSummary { pairs: results.len(), ..Default::default() };
    let mut entries = BTreeMap::new();
    for (r, (key, k, reused)) in req.records.iter().zip(results) {
        if entries.insert(r.img_id.clone(), key).is_some() {
            bail!("duplicate img_id {} in annotations", r.img_id);
        }
        if reused {
            summary.reused += 1;
        } else {
            summary.computed += 1;
        }
        if k == 0 {
            summary.without_differences += 1;
        }
    }
    let features = if req.features_dir.is_some() { FeatureSource::Imported } else { FeatureSource::Builtin };
    let index = CacheIndex { vision: req.vision, features, entries };
    let path = req.out.join(INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(summary)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn build_entry(req: &BuildRequest, entry_dir: &Path, r: &AnnotationRecord) -> Result<(String, usize, bool)> {
    let (p1, p2) = image_paths(req.img_dir, &r.img_id, req.second_suffix);
    let (b1, b2) = (read(&p1)?, read(&p2)?);
    let feat_path = req.features_dir.map(|d| d.join(format!("{}.sdf", r.img_id)));
    let feat_bytes = feat_path.as_deref().map(read).transpose()?;
    let key = entry_key(&b1, &b2, feat_bytes.as_deref(), &req.vision)?;
    let meta_path = entry_dir.join(format!("{key}.json"));
    let sdf_path = entry_dir.join(format!("{key}.sdf"));
    if meta_path.is_file() && sdf_path.is_file() {
        let meta: EntryMeta = serde_json::from_slice(&read(&meta_path)?)?;
        return Ok((key, meta.k, true));
    }
    let img1 = RgbImage::load(&p1)?;
    let img2 = RgbImage::load(&p2)?;
    let (pair, _) = match &feat_path {
        Some(path) => {
            let feats = load_precomputed_features::<f64>(path)?;
            prepare_with_features(&r.img_id, img1, img2, feats, &req.vision)?
        }
        None => prepare_pair::<f64>(&r.img_id, img1, img2, &req.vision)?,
    };
    save_features(&pair.feats, &sdf_path)?;
    let meta = EntryMeta {
        img_id: r.img_id.clone(),
        k: pair.k(),
        salience: pair.salience,
        bbox_areas: pair.bbox_areas,
        masks: pair.masks,
        union_mask: pair.union_mask,
    };
    fs::write(&meta_path, serde_json::to_vec(&meta)?)?;
    Ok((key, meta.k, false))
}

pub struct Cache {
    dir: PathBuf,
    pub index: CacheIndex,
}

impl Cache {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {} (run preprocess first)", path.display()))?;
        let index = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    fn key(&self, img_id: &str) -> Result<&str> {
        match self.index.entries.get(img_id) {
            Some(k) => Ok(k),
            None => bail!("pair {img_id} is not in the cache at {}", self.dir.display()),
        }
    }

    pub fn features_path(&self, img_id: &str) -> Result<PathBuf> {
        Ok(self.dir.join(ENTRY_DIR).join(format!("{}.sdf", self.key(img_id)?)))
    }

    pub fn features(&self, img_id: &str) -> Result<FeatureGridPair<f64>> {
        let path = self.features_path(img_id)?;
        load_precomputed_features(&path).with_context(|| format!("reading {}", path.display()))
    }

    pub fn pair(&self, img_id: &str) -> Result<PreparedPair64> {
        let key = self.key(img_id)?;
        let meta_path = self.dir.join(ENTRY_DIR).join(format!("{key}.json"));
        let meta: EntryMeta = serde_json::from_slice(&read(&meta_path)?).with_context(|| format!("parsing {}", meta_path.display()))?;
        if meta.k != meta.masks.len() {
            bail!("corrupt cache entry {}", meta_path.display());
        }
        let feats = self.features(img_id)?;
        Ok(PreparedPair64::new(img_id, feats, meta.salience, meta.masks, meta.bbox_areas, meta.union_mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_input() {
        let v = VisionConfig::default();
        let base = entry_key(b"ab", b"c", None, &v).unwrap();
        assert_eq!(base, entry_key(b"ab", b"c", None, &v).unwrap());
        assert_eq!(base.len(), 64);
        assert_ne!(base, entry_key(b"a", b"bc", None, &v).unwrap());
        assert_ne!(base, entry_key(b"ab", b"c", Some(b""), &v).unwrap());
        assert_ne!(base, entry_key(b"ab", b"c", None, &VisionConfig { eps: 4.0, ..v }).unwrap());
    }

    #[test]
    fn stored_features_round_through_f32() {
        let f = FeatureGridPair::new(1, 1, 1, vec![0.1], vec![1.0 / 3.0]).unwrap();
        let s = as_stored(&f);
        assert_eq!(s.f1[0], 0.1f32 as f64);
        assert_eq!(as_stored(&s), s);
    }
}
