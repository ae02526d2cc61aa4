//! Log-linear salience prior over difference clusters:
//! `p(k) ∝ exp(w · g_k)` where `g_k` are the cluster's salience features.

use serde::{Deserialize, Serialize};

use crate::clustering::NUM_SALIENCE_FEATURES;
use crate::error::{Error, Result};
use crate::scalar::{softmax, Scalar};

pub type Salience<S> = [S; NUM_SALIENCE_FEATURES];

/// Converts the clustering output into model scalars.
pub fn salience_of<S: Scalar>(g: &[f64; NUM_SALIENCE_FEATURES]) -> Salience<S> {
    g.map(S::of)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct SaliencePrior<S> {
    pub w: Salience<S>,
}

impl<S: Scalar> Default for SaliencePrior<S> {
    /// All-zero weights, i.e. the uniform prior.
    fn default() -> Self {
        Self { w: [S::zero(); NUM_SALIENCE_FEATURES] }
    }
}

impl<S: Scalar> SaliencePrior<S> {
    pub fn new(w: Salience<S>) -> Self {
        Self { w }
    }

    pub fn logits(&self, features: &[Salience<S>]) -> Vec<S> {
        features.iter().map(|g| self.w.iter().zip(g).map(|(&a, &b)| a * b).sum()).collect()
    }

    pub fn distribution(&self, features: &[Salience<S>]) -> Result<Vec<S>> {
        prior_distribution(self, features)
    }

    /// `log p_k` for every cluster.
    pub fn log_distribution(&self, features: &[Salience<S>]) -> Result<Vec<S>> {
        if features.is_empty() {
            return Err(Error::NoClusters);
        }
        let logits = self.logits(features);
        let lse = crate::scalar::log_sum_exp(&logits);
        Ok(logits.into_iter().map(|l| l - lse).collect())
    }
}

pub fn prior_distribution<S: Scalar>(prior: &SaliencePrior<S>, features: &[Salience<S>]) -> Result<Vec<S>> {
    if features.is_empty() {
        return Err(Error::NoClusters);
    }
    Ok(softmax(&prior.logits(features)))
}

/// `∇_w log p_k = g_k − Σ_j p_j g_j`.
pub fn prior_log_grad<S: Scalar>(prior: &SaliencePrior<S>, features: &[Salience<S>], k: usize) -> Result<Salience<S>> {
    let p = prior_distribution(prior, features)?;
    if k >= features.len() {
        return Err(Error::InvalidInput(format!("cluster {k} out of range for K = {}", features.len())));
    }
    let mut grad = features[k];
    for (pj, gj) in p.iter().zip(features) {
        for (out, &g) in grad.iter_mut().zip(gj) {
            *out -= *pj * g;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut impl Rng, k: usize) -> Vec<Salience<f64>> {
        (0..k).map(|_| [rng.random(), rng.random(), rng.random(), rng.random()]).collect()
    }

    #[test]
    fn zero_weights_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SaliencePrior::<f64>::default().distribution(&random_features(&mut rng, 4)).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn single_cluster_is_certain() {
        let p = SaliencePrior::new([3.0, -1.0, 2.0, 0.5]).distribution(&[[0.1, 0.2, 0.3, 0.4]]).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn two_cluster_softmax() {
        let prior = SaliencePrior::new([1.0, 0.0, 0.0, 0.0]);
        let p = prior.distribution(&[[0.1, 0.0, 0.0, 0.0], [0.2, 0.0, 0.0, 0.0]]).unwrap();
        // direct evaluation
        let (a, b) = (0.1f64.exp(), 0.2f64.exp());
        assert!((p[0] - a / (a + b)).abs() < 1e-15);
        assert!((p[0] - 0.475021).abs() < 1e-6);
        assert!((p[1] - 0.524979).abs() < 1e-6);
    }

    #[test]
    fn empty_cluster_set_is_an_error() {
        assert!(matches!(SaliencePrior::<f64>::default().distribution(&[]), Err(Error::NoClusters)));
        assert!(prior_log_grad(&SaliencePrior::<f64>::default(), &[], 0).is_err());
    }

    #[test]
    fn gradient_degenerate_cases() {
        let prior = SaliencePrior::<f64>::new([0.3, -0.2, 1.0, 4.0]);
        assert_eq!(prior_log_grad(&prior, &[[0.5, 0.1, 0.2, 0.3]], 0).unwrap(), [0.0; 4]);
        let same = vec![[0.5, 0.1, 0.2, 0.3]; 3];
        for k in 0..3 {
            assert!(prior_log_grad(&prior, &same, k).unwrap().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let k = rng.random_range(2..6);
            let feats = random_features(&mut rng, k);
            let w: Salience<f64> = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let target = rng.random_range(0..k);
            let grad = prior_log_grad(&SaliencePrior::new(w), &feats, target).unwrap();
            let step = 1e-5;
            for i in 0..4 {
                let eval = |delta: f64| {
                    let mut w2 = w;
                    w2[i] += delta;
                    let logits: Vec<f64> = feats.iter().map(|g| (0..4).map(|j| w2[j] * g[j]).sum()).collect();
                    let z: f64 = logits.iter().map(|l| l.exp()).sum();
                    (logits[target].exp() / z).ln()
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                let scale = fd.abs().max(grad[i].abs()).max(1e-8);
                assert!((fd - grad[i]).abs() / scale < 1e-6, "coord {i}: fd {fd} vs {}", grad[i]);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_w() -> impl Strategy<Value = [f64; 4]> {
            [-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0]
        }

        proptest! {
            #[test]
            fn shifting_all_features_leaves_prior_unchanged(w in arb_w(), seed in 0u64..1000, t in arb_w()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let feats = random_features(&mut rng, 5);
                let shifted: Vec<_> = feats.iter().map(|g| [g[0] + t[0], g[1] + t[1], g[2] + t[2], g[3] + t[3]]).collect();
                let prior = SaliencePrior::new(w);
                let p = prior.distribution(&feats).unwrap();
                let q = prior.distribution(&shifted).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn probability_order_follows_logits(w in arb_w(), seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let feats = random_features(&mut rng, 6);
                let prior = SaliencePrior::new(w);
                let p = prior.distribution(&feats).unwrap();
                let l = prior.logits(&feats);
                for i in 0..6 {
                    for j in 0..6 {
                        if l[i] > l[j] {
                            prop_assert!(p[i] >= p[j]);
                        }
                    }
                }
            }

            #[test]
            fn expected_score_is_zero(w in arb_w(), seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let feats = random_features(&mut rng, 4);
                let prior = SaliencePrior::new(w);
                let p = prior.distribution(&feats).unwrap();
                let mut total = [0.0; 4];
                for (k, &pk) in p.iter().enumerate() {
                    let g = prior_log_grad(&prior, &feats, k).unwrap();
                    for (t, gi) in total.iter_mut().zip(g) {
                        *t += pk * gi;
                    }
                }
                prop_assert!(total.iter().all(|v| v.abs() < 1e-9));
            }
        }
    }
}
