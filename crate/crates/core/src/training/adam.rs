use crate::decoder::DecoderParams;
use crate::scalar::Scalar;

use super::{Gradient, Model, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self { learning_rate: c.learning_rate, beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    config: AdamConfig,
    steps: i32,
    m: Gradient<S>,
    v: Gradient<S>,
}

/// Per-step constants; `c1` and `c2` are the bias corrections.
#[derive(Clone, Copy)]
struct StepCoeffs<S> {
    lr: S,
    b1: S,
    b2: S,
    c1: S,
    c2: S,
    eps: S,
}

impl<S: Scalar> StepCoeffs<S> {
    fn update(&self, params: &mut [S], grad: &[S], m: &mut [S], v: &mut [S]) {
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = self.b1 * *m + (S::one() - self.b1) * g;
            *v = self.b2 * *v + (S::one() - self.b2) * g * g;
            let m_hat = *m / self.c1;
            let v_hat = *v / self.c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, like: &DecoderParams<S>) -> Self {
        Self { config, steps: 0, m: Gradient::zeros(like.config), v: Gradient::zeros(like.config) }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One descent step. The prior is only updated in modes that learn it.
    pub fn step(&mut self, model: &mut Model<S>, grad: &Gradient<S>) {
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let c1 = S::one() - b1.powi(self.steps);
        let c2 = S::one() - b2.powi(self.steps);
        let k = StepCoeffs { lr: S::of(c.learning_rate), b1, b2, c1, c2, eps: S::of(c.eps) };
        let params = model.decoder.groups_mut();
        let grads = grad.decoder.groups();
        let ms = self.m.decoder.groups_mut();
        let vs = self.v.decoder.groups_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            k.update(&mut p.data, &g.data, &mut m.data, &mut v.data);
        }
        if model.mode.learns_prior() {
            k.update(&mut model.prior.w, &grad.prior, &mut self.m.prior, &mut self.v.prior);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut p, mut m, mut v) = ([1.0f64, -2.0, 0.5], [0.0; 3], [0.0; 3]);
        let g = [0.3, -4.0, 0.0];
        let k = StepCoeffs { lr: 0.01, b1: 0.9, b2: 0.999, c1: 0.1, c2: 0.001, eps: 1e-8 };
        k.update(&mut p, &g, &mut m, &mut v);
        // m̂ = g and v̂ = g², so the step is lr·sign(g) up to eps
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let orig = [1.0f32, -2.0, 3.25];
        let mut p = orig;
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        let k = StepCoeffs { lr: 0.0, b1: 0.9, b2: 0.999, c1: 0.1, c2: 0.001, eps: 1e-8 };
        k.update(&mut p, &[1.0, 2.0, -3.0], &mut m, &mut v);
        assert_eq!(p, orig);
    }
}
