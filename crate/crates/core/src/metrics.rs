//! Corpus-level caption metrics: BLEU-n, ROUGE-L and CIDEr.
//!
//! All functions take one hypothesis and one reference set per example and
//! compare tokens by identity only.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SCALE: f64 = 10.0;

fn check_corpus<T, R>(hyps: &[T], refs: &[R]) -> Result<()> {
    if hyps.is_empty() {
        return invalid("empty corpus");
    }
    if hyps.len() != refs.len() {
        return invalid(format!("{} hypotheses but {} reference sets", hyps.len(), refs.len()));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-n without smoothing, brevity penalty against the closest
/// reference length (shorter reference on ties).
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>], n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    if !(1..=4).contains(&n) {
        return invalid(format!("BLEU order {n} outside 1..=4"));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, rs) in hyps.iter().zip(refs) {
        if rs.is_empty() {
            return invalid("hypothesis without references");
        }
        hyp_len += hyp.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .expect("nonempty reference set");
        for i in 1..=n {
            let counts = ngram_counts(hyp, i);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in rs {
                for (g, c) in ngram_counts(r, i) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matched[i - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[i - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / n as f64;
    let brevity = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0);
    Ok((log_precision + brevity).exp())
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_pair<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over examples of the best LCS F-measure against any reference.
pub fn rouge_l<T: Eq>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, rs)| rs.iter().map(|r| rouge_pair(h, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / hyps.len() as f64)
}

/// TF-IDF weights in order of first occurrence, so sums are reproducible.
fn tfidf<'a, T: Eq + Hash>(tokens: &'a [T], n: usize, df: &HashMap<&[T], usize>, corpus: f64) -> (Vec<(&'a [T], f64)>, f64) {
    let counts = ngram_counts(tokens, n);
    let mut seen = HashSet::new();
    let mut vec = Vec::with_capacity(counts.len());
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            if seen.insert(g) {
                let idf = (corpus / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
                vec.push((g, counts[g] as f64 * idf));
            }
        }
    }
    let norm = vec.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    (vec, norm)
}

/// CIDEr: TF-IDF cosine similarity over 1- to 4-grams, averaged over
/// references and orders and scaled by 10. Document frequencies count the
/// examples whose references contain an n-gram.
pub fn cider<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    if hyps.len() < 2 {
        return invalid("CIDEr needs a corpus of at least 2 examples");
    }
    if refs.iter().any(|r| r.is_empty()) {
        return invalid("hypothesis without references");
    }
    let corpus = hyps.len() as f64;
    let mut total = 0.0;
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<&[T], usize> = HashMap::new();
        for rs in refs {
            let seen: HashSet<&[T]> = rs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (hyp, rs) in hyps.iter().zip(refs) {
            let (hv, hn) = tfidf(hyp, n, &df, corpus);
            let mut sim = 0.0;
            for r in rs {
                let (rv, rn) = tfidf(r, n, &df, corpus);
                if hn > 0.0 && rn > 0.0 {
                    let rv: HashMap<&[T], f64> = rv.into_iter().collect();
                    let dot: f64 = hv.iter().filter_map(|(g, a)| rv.get(g).map(|b| a * b)).sum();
                    sim += dot / (hn * rn);
                }
            }
            total += sim / rs.len() as f64;
        }
    }
    Ok(CIDER_SCALE * total / (corpus * CIDER_MAX_N as f64))
}

/// Metric report written by evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    pub perplexity: Option<f64>,
    #[serde(rename = "lenRatio")]
    pub len_ratio: f64,
}

/// BLEU-1..4, ROUGE-L, CIDEr and the length ratio, where each example's
/// ground-truth length is the mean length of its references.
pub fn score_corpus<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>], perplexity: Option<f64>) -> Result<MetricReport> {
    check_corpus(hyps, refs)?;
    let hyp_len: f64 = hyps.iter().map(|h| h.len() as f64).sum();
    let ref_len: f64 = refs
        .iter()
        .map(|rs| rs.iter().map(|r| r.len() as f64).sum::<f64>() / rs.len().max(1) as f64)
        .sum();
    if ref_len == 0.0 {
        return invalid("ground truth has no tokens");
    }
    Ok(MetricReport {
        bleu1: bleu(hyps, refs, 1)?,
        bleu2: bleu(hyps, refs, 2)?,
        bleu3: bleu(hyps, refs, 3)?,
        bleu4: bleu(hyps, refs, 4)?,
        rouge_l: rouge_l(hyps, refs)?,
        cider: cider(hyps, refs)?,
        perplexity,
        len_ratio: hyp_len / ref_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn corpus(pairs: &[(&str, &[&str])]) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
        (
            pairs.iter().map(|(h, _)| toks(h)).collect(),
            pairs.iter().map(|(_, rs)| rs.iter().map(|r| toks(r)).collect()).collect(),
        )
    }

    #[test]
    fn identical_corpus_scores_perfectly() {
        let (h, r) = corpus(&[("a red car left the lot", &["a red car left the lot"]), ("two men walk in", &["two men walk in"])]);
        for n in 1..=4 {
            assert_eq!(bleu(&h, &r, n).unwrap(), 1.0);
        }
        assert_eq!(rouge_l(&h, &r).unwrap(), 1.0);
        assert_eq!(cider(&h, &r).unwrap(), 10.0);
    }

    #[test]
    fn bleu_brevity_example() {
        let (h, r) = corpus(&[("the cat", &["the cat sat"])]);
        let got = bleu(&h, &r, 1).unwrap();
        assert!((got - (-0.5f64).exp()).abs() < 1e-12);
        assert!((got - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn bleu_zero_without_overlap() {
        let (h, r) = corpus(&[("x y z", &["a b c"])]);
        assert_eq!(bleu(&h, &r, 1).unwrap(), 0.0);
        let (h, r) = corpus(&[("a b", &["a c"])]);
        assert_eq!(bleu(&h, &r, 2).unwrap(), 0.0);
    }

    #[test]
    fn bleu_clips_repeated_tokens() {
        let (h, r) = corpus(&[("the the the", &["the cat sat"])]);
        assert!((bleu(&h, &r, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_closest_reference_length() {
        let (h, r) = corpus(&[("a b c d", &["a b", "a b c d e"])]);
        // |4−5| < |4−2| picks 5 → penalty exp(1 − 5/4)
        assert!((bleu(&h, &r, 1).unwrap() - (-0.25f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_argument_errors() {
        let (h, r) = corpus(&[("a", &["a"])]);
        assert!(bleu(&h, &r, 0).is_err());
        assert!(bleu(&h, &r, 5).is_err());
        assert!(bleu::<String>(&[], &[], 1).is_err());
        assert!(bleu(&h, &[], 1).is_err());
    }

    #[test]
    fn rouge_example() {
        let (h, r) = corpus(&[("a b c d", &["a c d"])]);
        let got = rouge_l(&h, &r).unwrap();
        let want = 2.44 * 0.75 / (1.0 + 1.44 * 0.75);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.8799).abs() < 1e-4);
        let (h, r) = corpus(&[("x y", &["a b"])]);
        assert_eq!(rouge_l(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn rouge_takes_best_reference() {
        let (h, r) = corpus(&[("a b", &["x y", "a b"])]);
        assert_eq!(rouge_l(&h, &r).unwrap(), 1.0);
    }

    /// Straightforward re-derivation of CIDEr over BTreeMaps.
    fn cider_oracle(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
        use std::collections::BTreeMap;
        let grams = |s: &[String], n: usize| {
            let mut m: BTreeMap<Vec<String>, f64> = BTreeMap::new();
            for i in 0..(s.len() + 1).saturating_sub(n) {
                *m.entry(s[i..i + n].to_vec()).or_default() += 1.0;
            }
            m
        };
        let big_n = hyps.len() as f64;
        let mut score = 0.0;
        for n in 1..=4 {
            let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
            for rs in refs {
                let mut seen = std::collections::BTreeSet::new();
                for r in rs {
                    seen.extend(grams(r, n).into_keys());
                }
                for g in seen {
                    *df.entry(g).or_default() += 1.0;
                }
            }
            let weigh = |m: BTreeMap<Vec<String>, f64>| -> BTreeMap<Vec<String>, f64> {
                m.into_iter()
                    .map(|(g, c)| {
                        let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                        (g, c * (big_n / d).ln())
                    })
                    .collect()
            };
            for (h, rs) in hyps.iter().zip(refs) {
                let hv = weigh(grams(h, n));
                for r in rs {
                    let rv = weigh(grams(r, n));
                    let dot: f64 = hv.iter().map(|(g, a)| a * rv.get(g).copied().unwrap_or(0.0)).sum();
                    let na = hv.values().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = rv.values().map(|v| v * v).sum::<f64>().sqrt();
                    if na > 0.0 && nb > 0.0 {
                        score += dot / (na * nb) / rs.len() as f64;
                    }
                }
            }
        }
        10.0 * score / (4.0 * big_n)
    }

    #[test]
    fn cider_matches_oracle_on_toy_corpus() {
        let (h, r) = corpus(&[
            ("a red car appeared on the left", &["a red car appeared on the left side", "the red car is new"]),
            ("a man walked away", &["the man walked away", "a person left the scene"]),
            ("the car left", &["a blue car left the lot", "the car is gone"]),
        ]);
        let got = cider(&h, &r).unwrap();
        assert!((got - cider_oracle(&h, &r)).abs() < 1e-9, "{got}");
        assert!(got > 0.0 && got < 10.0);
    }

    #[test]
    fn cider_edge_cases() {
        let (h, r) = corpus(&[("x y", &["a b"]), ("p q", &["c d"])]);
        assert_eq!(cider(&h, &r).unwrap(), 0.0);
        let (h, r) = corpus(&[("a", &["a"])]);
        assert!(cider(&h, &r).is_err());
    }

    #[test]
    fn len_ratio_and_report() {
        let (h, r) = corpus(&[("a b", &["a b c d"]), ("c d", &["c d"])]);
        let rep = score_corpus(&h, &r, Some(3.5)).unwrap();
        assert!((rep.len_ratio - 4.0 / 6.0).abs() < 1e-12);
        let json = serde_json::to_value(&rep).unwrap();
        for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider", "perplexity", "lenRatio"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sentence() -> impl Strategy<Value = Vec<u8>> {
            proptest::collection::vec(0u8..6, 0..8)
        }

        fn arb_corpus() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<Vec<u8>>>)> {
            (2usize..6).prop_flat_map(|n| {
                (
                    proptest::collection::vec(sentence(), n),
                    proptest::collection::vec(proptest::collection::vec(sentence(), 1..3), n),
                )
            })
        }

        proptest! {
            #[test]
            fn bounded((h, r) in arb_corpus()) {
                for n in 1..=4 {
                    let b = bleu(&h, &r, n).unwrap();
                    prop_assert!((0.0..=1.0).contains(&b));
                }
                let rl = rouge_l(&h, &r).unwrap();
                prop_assert!((0.0..=1.0).contains(&rl));
                let c = cider(&h, &r).unwrap();
                prop_assert!((0.0..=10.0 + 1e-9).contains(&c));
            }

            #[test]
            fn relabeling_invariance((h, r) in arb_corpus(), perm in Just((0u8..6).collect::<Vec<_>>()).prop_shuffle()) {
                let map = |s: &Vec<u8>| s.iter().map(|&t| perm[t as usize] + 100).collect::<Vec<u8>>();
                let h2: Vec<_> = h.iter().map(map).collect();
                let r2: Vec<Vec<_>> = r.iter().map(|rs| rs.iter().map(map).collect()).collect();
                for n in 1..=4 {
                    prop_assert_eq!(bleu(&h, &r, n).unwrap(), bleu(&h2, &r2, n).unwrap());
                }
                prop_assert_eq!(rouge_l(&h, &r).unwrap(), rouge_l(&h2, &r2).unwrap());
                prop_assert!((cider(&h, &r).unwrap() - cider(&h2, &r2).unwrap()).abs() < 1e-12);
            }

            #[test]
            fn unigram_bleu_is_clipped_precision_at_equal_length(h in proptest::collection::vec(proptest::collection::vec(0u8..5, 3), 1..5), seed in proptest::collection::vec(proptest::collection::vec(0u8..5, 3), 5)) {
                let r: Vec<Vec<Vec<u8>>> = (0..h.len()).map(|i| vec![seed[i].clone()]).collect();
                let mut matched = 0;
                for (hy, rs) in h.iter().zip(&r) {
                    for t in 0u8..5 {
                        let a = hy.iter().filter(|&&x| x == t).count();
                        let b = rs[0].iter().filter(|&&x| x == t).count();
                        matched += a.min(b);
                    }
                }
                let want = matched as f64 / (3 * h.len()) as f64;
                prop_assert!((bleu(&h, &r, 1).unwrap() - want).abs() < 1e-12);
            }
        }
    }
}
