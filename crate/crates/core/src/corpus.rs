//! Annotation ingestion, tokenization, vocabulary construction, video-aware
//! splits and candidate frame-pair extraction.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::decoder::Vocabulary;
use crate::error::{invalid, Error, Result};
use crate::imaging::{image_l2_distance, RgbImage};

pub const DEFAULT_MIN_COUNT: usize = 5;
pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];
pub const DEFAULT_PAIRS_PER_VIDEO: usize = 50;
/// Video id = everything before the last underscore; ids without one are
/// their own video.
pub const DEFAULT_VIDEO_PATTERN: &str = r"^(.+)_[^_]*$";
pub const DEFAULT_SECOND_SUFFIX: &str = "_2";

/// Lowercases, splits punctuation into standalone tokens and splits on
/// whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in sentence.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// One annotated image pair as stored in the annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub img_id: String,
    pub sentences: Vec<String>,
    #[serde(skip)]
    pub video_id: String,
}

impl AnnotationRecord {
    pub fn tokenized(&self) -> Vec<Vec<String>> {
        self.sentences.iter().map(|s| tokenize(s)).filter(|t| !t.is_empty()).collect()
    }
}

/// Derives video ids from image ids: the first capture group of `pattern`,
/// or the whole id when the pattern does not match.
#[derive(Debug, Clone)]
pub struct VideoIdRule {
    pattern: Regex,
}

impl VideoIdRule {
    pub fn new(pattern: &str) -> Result<Self> {
        let pattern = Regex::new(pattern).map_err(|e| Error::InvalidInput(format!("bad video id pattern: {e}")))?;
        if pattern.captures_len() < 2 {
            return invalid("video id pattern needs a capture group");
        }
        Ok(Self { pattern })
    }

    pub fn video_of(&self, img_id: &str) -> String {
        self.pattern
            .captures(img_id)
            .and_then(|c| c.get(1))
            .map_or_else(|| img_id.to_string(), |m| m.as_str().to_string())
    }
}

impl Default for VideoIdRule {
    fn default() -> Self {
        Self::new(DEFAULT_VIDEO_PATTERN).expect("default pattern is valid")
    }
}

/// Parses an annotation file: a JSON array of `{img_id, sentences}`.
/// Blank sentences are dropped.
pub fn parse_annotations(text: &str, rule: &VideoIdRule) -> Result<Vec<AnnotationRecord>> {
    let mut records: Vec<AnnotationRecord> = serde_json::from_str(text)?;
    for r in &mut records {
        if r.img_id.is_empty() {
            return Err(Error::Format("record with empty img_id".into()));
        }
        r.sentences.retain(|s| !s.trim().is_empty());
        if r.sentences.is_empty() {
            return Err(Error::Format(format!("record {} has no sentences", r.img_id)));
        }
        r.video_id = rule.video_of(&r.img_id);
    }
    Ok(records)
}

pub fn load_annotations(path: impl AsRef<Path>, rule: &VideoIdRule) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(&std::fs::read_to_string(path)?, rule)
}

/// Paths of the two images of a record: `<dir>/<id>.png` and
/// `<dir>/<id><suffix>.png`.
pub fn image_paths(img_dir: &Path, img_id: &str, second_suffix: &str) -> (PathBuf, PathBuf) {
    (img_dir.join(format!("{img_id}.png")), img_dir.join(format!("{img_id}{second_suffix}.png")))
}

/// Word types seen at least `min_count` times in the training records, by
/// descending frequency then alphabetically.
pub fn build_vocab(train: &[AnnotationRecord], min_count: usize) -> Result<Vocabulary> {
    if train.is_empty() {
        return invalid("cannot build a vocabulary from an empty training split");
    }
    if min_count == 0 {
        return invalid("min_count must be at least 1");
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in train {
        for s in r.tokenized() {
            for t in s {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_words(kept.into_iter().map(|(w, _)| w))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<AnnotationRecord>,
    pub val: Vec<AnnotationRecord>,
    pub test: Vec<AnnotationRecord>,
}

/// Shuffles the distinct videos with a seeded generator and assigns each to
/// the split furthest below its record-count target. Empty splits with a
/// positive ratio are served first so every split gets at least one video.
pub fn split_by_video(records: &[AnnotationRecord], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1"));
    }
    let mut by_video: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        by_video.entry(r.video_id.as_str()).or_default().push(r);
    }
    if by_video.len() < 3 {
        return invalid(format!("need at least 3 videos to split, found {}", by_video.len()));
    }
    let mut videos: Vec<&str> = by_video.keys().copied().collect();
    videos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = records.len() as f64;
    let targets = ratios.map(|r| r * total);
    let mut counts = [0usize; 3];
    let mut out: [Vec<AnnotationRecord>; 3] = Default::default();
    for v in videos {
        let starving = (0..3).find(|&s| counts[s] == 0 && ratios[s] > 0.0);
        let pick = starving.unwrap_or_else(|| {
            let mut best = 0;
            for s in 1..3 {
                if targets[s] - counts[s] as f64 > targets[best] - counts[best] as f64 {
                    best = s;
                }
            }
            best
        });
        counts[pick] += by_video[v].len();
        out[pick].extend(by_video[v].iter().map(|&r| r.clone()));
    }
    let [train, val, test] = out;
    Ok(DatasetSplit { train, val, test })
}

/// A sampled frame pair that passed the distance filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePairCandidate {
    pub first: usize,
    pub second: usize,
    pub distance: f64,
}

/// Samples `count` random index pairs (distinct frames) and keeps those whose
/// whole-image L2 distance lies strictly between `lower` and `upper`.
pub fn filter_frame_pairs(frames: &[RgbImage], count: usize, lower: f64, upper: f64, seed: u64) -> Result<Vec<FramePairCandidate>> {
    if frames.len() < 2 {
        return invalid("need at least two frames");
    }
    if lower.is_nan() || upper.is_nan() || lower >= upper {
        return invalid(format!("lower threshold {lower} must be below upper {upper}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for _ in 0..count {
        let a = rng.random_range(0..frames.len());
        let mut b = rng.random_range(0..frames.len() - 1);
        if b >= a {
            b += 1;
        }
        let d = image_l2_distance(&frames[a], &frames[b])?;
        if d > lower && d < upper {
            kept.push(FramePairCandidate { first: a, second: b, distance: d });
        }
    }
    Ok(kept)
}

/// Frame files in `dir` (PNG or JPEG), sorted by name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    frames.sort();
    if frames.is_empty() {
        return invalid(format!("no frames found in {}", dir.display()));
    }
    Ok(frames)
}

/// Loads the frames of one video directory and filters random pairs.
pub fn extract_frame_pairs(
    frame_dir: &Path,
    count: usize,
    lower: f64,
    upper: f64,
    seed: u64,
) -> Result<Vec<(PathBuf, PathBuf, f64)>> {
    let paths = list_frames(frame_dir)?;
    let frames = paths.iter().map(RgbImage::load).collect::<Result<Vec<_>>>()?;
    Ok(filter_frame_pairs(&frames, count, lower, upper, seed)?
        .into_iter()
        .map(|c| (paths[c.first].clone(), paths[c.second].clone(), c.distance))
        .collect())
}

/// Aggregate corpus statistics in the layout of the dataset summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub annotations: usize,
    pub sentences_mean: f64,
    pub sentences_std: f64,
    pub vocabulary_size: usize,
    pub frequent_types: usize,
    pub frequent_token_coverage: f64,
    pub words_per_sentence_mean: f64,
    pub words_per_sentence_std: f64,
    pub long_sentence_fraction: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `frequent_min` is the occurrence count that makes a type frequent; words
/// per sentence exclude punctuation tokens.
pub fn corpus_stats(records: &[AnnotationRecord], frequent_min: usize) -> CorpusStats {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut per_annotation = Vec::new();
    let mut lengths = Vec::new();
    for r in records {
        let sents = r.tokenized();
        per_annotation.push(sents.len() as f64);
        for s in sents {
            lengths.push(s.iter().filter(|t| !t.chars().all(|c| c.is_ascii_punctuation())).count() as f64);
            for t in s {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let total: usize = counts.values().sum();
    let frequent: Vec<usize> = counts.values().copied().filter(|&n| n >= frequent_min).collect();
    let (sm, ss) = mean_std(&per_annotation);
    let (wm, ws) = mean_std(&lengths);
    CorpusStats {
        annotations: records.len(),
        sentences_mean: sm,
        sentences_std: ss,
        vocabulary_size: counts.len(),
        frequent_types: frequent.len(),
        frequent_token_coverage: if total == 0 { 0.0 } else { frequent.iter().sum::<usize>() as f64 / total as f64 },
        words_per_sentence_mean: wm,
        words_per_sentence_std: ws,
        long_sentence_fraction: if lengths.is_empty() { 0.0 } else { lengths.iter().filter(|&&l| l > 20.0).count() as f64 / lengths.len() as f64 },
    }
}
