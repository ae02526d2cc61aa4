use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::decoder::{greedy_decode, sentence_log_prob, Vocabulary};
use crate::training::{ModelConfig, TrainConfig};

fn model(mode: Mode, w: [f64; 4]) -> Model<f64> {
    let vocab = Vocabulary::from_words(["a", "b", "c", "d", "e", "f"]).unwrap();
    let config = ModelConfig {
        train: TrainConfig { embed_dim: 4, hidden_dim: 6, attention_dim: 3, max_len: 6, ..TrainConfig::default() },
        ..ModelConfig::default()
    };
    let mut m = Model::new(mode, vocab, 9, config).unwrap();
    m.prior.w = w;
    m
}

fn pair(rng: &mut impl Rng, salience: Vec<[f64; 4]>, areas: Vec<usize>) -> PreparedPair<f64> {
    let (gh, gw, d) = (3, 3, 9);
    let feats = FeatureGridPair::new(gh, gw, d, (0..gh * gw * d).map(|_| rng.random()).collect(), (0..gh * gw * d).map(|_| rng.random()).collect()).unwrap();
    let masks = (0..salience.len())
        .map(|k| ProjectedMask { grid_h: gh, grid_w: gw, values: (0..9).map(|i| if i % salience.len() == k { 1.0 } else { 0.1 }).collect() })
        .collect();
    PreparedPair::new("x", feats, salience, masks, areas, ProjectedMask::ones(gh, gw)).unwrap()
}

#[test]
fn single_cluster_is_used() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = model(Mode::Ddla, [0.5, -1.0, 2.0, 0.0]);
    let p = pair(&mut rng, vec![[0.2; 4]], vec![10]);
    let got = decode_single(&m, &p, &mut rng).unwrap();
    assert_eq!(got, greedy_decode(&m.decoder, &p.feats, &p.masks[0], 6).unwrap());
    assert_eq!(decode_multi(&m, &p, 1).unwrap(), vec![got]);
    assert_eq!(predict_alignment(&m, &p, &[4, 5]).unwrap(), 0);
}

#[test]
fn prior_argmax_picks_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = model(Mode::Ddla, [1.0, 0.0, 0.0, 0.0]);
    let p = pair(&mut rng, vec![[0.1, 0.0, 0.0, 0.0], [0.3, 0.0, 0.0, 0.0], [0.2, 0.0, 0.0, 0.0]], vec![5, 5, 5]);
    assert_eq!(choose_cluster(&m, &p, &mut rng).unwrap(), 1);
    assert_eq!(rank_clusters(&m, &p).unwrap(), vec![1, 2, 0]);
    assert_eq!(decode_single(&m, &p, &mut rng).unwrap(), greedy_decode(&m.decoder, &p.feats, &p.masks[1], 6).unwrap());
}

#[test]
fn uniform_ties_rank_by_id() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = model(Mode::Ddla, [0.0; 4]);
    let p = pair(&mut rng, vec![[0.1; 4], [0.5; 4], [0.9; 4]], vec![1, 2, 3]);
    let out = decode_multi(&m, &p, 2).unwrap();
    let want: Vec<_> = [0, 1].iter().map(|&k| greedy_decode(&m.decoder, &p.feats, &p.masks[k], 6).unwrap()).collect();
    assert_eq!(out, want);
    assert_eq!(decode_multi(&m, &p, 10).unwrap().len(), 3);
    assert!(decode_multi(&m, &p, 0).is_err());
}

#[test]
fn uniform_mode_orders_by_box_area() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = model(Mode::DdlaUniform, [5.0, 0.0, 0.0, 0.0]);
    let p = pair(&mut rng, vec![[0.9; 4], [0.1; 4], [0.5; 4], [0.2; 4]], vec![4, 30, 30, 8]);
    let mut oracle: Vec<usize> = (0..4).collect();
    oracle.sort_by_key(|&k| (std::cmp::Reverse(p.bbox_areas[k]), k));
    assert_eq!(rank_clusters(&m, &p).unwrap(), oracle);
}

#[test]
fn uniform_single_choice_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = model(Mode::DdlaUniform, [0.0; 4]);
    let p = pair(&mut rng, vec![[0.1; 4]; 5], vec![1; 5]);
    let draws = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..20).map(|_| choose_cluster(&m, &p, &mut r).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draws(9), draws(9));
    assert!(draws(9).iter().collect::<std::collections::HashSet<_>>().len() > 1);
}

#[test]
fn captioning_modes_use_their_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = pair(&mut rng, vec![[0.1; 4], [0.2; 4]], vec![1, 2]);
    p.union_mask.values[0] = 0.0;
    let capt = model(Mode::Capt, [0.0; 4]);
    assert_eq!(decode_multi(&capt, &p, 3).unwrap(), vec![greedy_decode(&capt.decoder, &p.feats, &p.full_mask, 6).unwrap()]);
    let masked = model(Mode::CaptMasked, [0.0; 4]);
    assert_eq!(decode_single(&masked, &p, &mut rng).unwrap(), greedy_decode(&masked.decoder, &p.feats, &p.union_mask, 6).unwrap());
    assert!(predict_alignment(&capt, &p, &[4]).is_err());
}

#[test]
fn empty_cluster_set_reports_no_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = pair(&mut rng, vec![], vec![]);
    for mode in Mode::ALL {
        let m = model(mode, [0.0; 4]);
        assert!(matches!(decode_single(&m, &p, &mut rng), Err(Error::NoClusters)));
        assert!(matches!(decode_multi(&m, &p, 2), Err(Error::NoClusters)));
    }
    assert!(matches!(predict_alignment(&model(Mode::Ddla, [0.0; 4]), &p, &[4]), Err(Error::NoClusters)));
}

#[test]
fn equal_likelihoods_leave_prior_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = model(Mode::Ddla, [0.0, 0.0, 3.0, 0.0]);
    let mut p = pair(&mut rng, vec![[0.0, 0.0, 0.1, 0.0], [0.0, 0.0, 0.7, 0.0], [0.0, 0.0, 0.3, 0.0]], vec![1; 3]);
    let shared = p.masks[0].clone();
    p.masks = vec![shared; 3];
    assert_eq!(predict_alignment(&m, &p, &[4, 6, 8]).unwrap(), 1);
}

#[test]
fn alignment_is_joint_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let w = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0, 0.0];
        let m = model(Mode::Ddla, w);
        let sal: Vec<[f64; 4]> = (0..3).map(|_| [rng.random(), rng.random(), 0.0, 0.0]).collect();
        let p = pair(&mut rng, sal, vec![1; 3]);
        let s = [4u32, 7, 5];
        let lp = m.prior.log_distribution(&p.salience).unwrap();
        let joint: Vec<f64> = (0..3).map(|k| lp[k] + sentence_log_prob(&m.decoder, &p.feats, &p.masks[k], &s).unwrap()).collect();
        let want = (0..3).fold(0, |b, k| if joint[k] > joint[b] { k } else { b });
        assert_eq!(predict_alignment(&m, &p, &s).unwrap(), want);
    }
}

#[test]
fn precision_counts_hits() {
    assert_eq!(alignment_precision(&[0, 1, 2, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
    assert!(alignment_precision(&[], &[]).is_err());
    assert!(alignment_precision(&[0], &[0, 1]).is_err());
}

fn const_feats(v: f64) -> FeatureGridPair<f64> {
    FeatureGridPair::new(1, 2, 2, vec![v; 4], vec![v; 4]).unwrap()
}

#[test]
fn nearest_neighbor_retrieval() {
    let index = NnIndex::new(vec![
        (const_feats(0.0), vec!["zero".to_string()]),
        (const_feats(1.0), vec!["one".to_string(), "uno".to_string()]),
        (const_feats(1.0), vec!["dup".to_string()]),
    ])
    .unwrap();
    assert_eq!(index.retrieve(&const_feats(0.0)).unwrap(), ["zero"]);
    assert_eq!(index.nearest(&const_feats(0.8)).unwrap(), 1);
    assert_eq!(index.nearest(&const_feats(0.4)).unwrap(), 0);
    let pick = |seed| index.retrieve_one(&const_feats(0.9), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().to_string();
    assert_eq!(pick(3), pick(3));
    assert!(["one", "uno"].contains(&pick(3).as_str()));
    assert!(NnIndex::new::<f64>(vec![]).is_err());
    assert!(index.nearest(&FeatureGridPair::new(1, 1, 1, vec![0.0], vec![0.0]).unwrap()).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn multi_with_one_sentence_equals_single(seed in 0u64..5000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = model(Mode::Ddla, [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0, 1.0]);
            let sal = (0..k).map(|_| [rng.random(), rng.random(), rng.random(), rng.random()]).collect();
            let p = pair(&mut rng, sal, vec![3; k]);
            prop_assert_eq!(decode_multi(&m, &p, 1).unwrap(), vec![decode_single(&m, &p, &mut rng).unwrap()]);
            let ranked = rank_clusters(&m, &p).unwrap();
            let mut sorted = ranked.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..k).collect::<Vec<_>>());
        }

        #[test]
        fn nearest_matches_exhaustive_search(points in proptest::collection::vec(-5.0f64..5.0, 1..8), q in -5.0f64..5.0) {
            let index = NnIndex::new(points.iter().map(|&v| (const_feats(v), vec![v.to_string()]))).unwrap();
            let dist = |v: f64| (0..4).map(|_| (v - q) * (v - q)).sum::<f64>();
            let best = points.iter().enumerate().fold(0, |b, (i, &v)| if dist(v) < dist(points[b]) { i } else { b });
            prop_assert_eq!(index.nearest(&const_feats(q)).unwrap(), best);
        }
    }
}
