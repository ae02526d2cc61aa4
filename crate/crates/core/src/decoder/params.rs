use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_ATTENTION_DIM: usize = 32;
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub attention_dim: usize,
}

impl DecoderConfig {
    /// Desk-scale default sizes for the given vocabulary and feature depth.
    pub fn new(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            feature_dim,
            attention_dim: DEFAULT_ATTENTION_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.embed_dim, self.hidden_dim, self.feature_dim, self.attention_dim];
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!("decoder dimensions must be nonzero: {self:?}")));
        }
        if self.vocab_size < crate::decoder::vocab::RESERVED.len() {
            return Err(Error::InvalidInput("vocabulary must hold the reserved tokens".into()));
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    /// `y = self · x` for a `rows × cols` matrix.
    pub fn mul_vec(&self, x: &[S], y: &mut [S]) {
        for (r, out) in y.iter_mut().enumerate() {
            *out = self.row(r).iter().zip(x).map(|(&a, &b)| a * b).sum();
        }
    }

    /// `y += selfᵀ · x`.
    pub fn add_tmul_vec(&self, x: &[S], y: &mut [S]) {
        for (r, &xr) in x.iter().enumerate() {
            if xr == S::zero() {
                continue;
            }
            for (out, &a) in y.iter_mut().zip(self.row(r)) {
                *out += xr * a;
            }
        }
    }

    /// `self += scale · a ⊗ b` with `a` of length `rows`, `b` of length `cols`.
    pub fn add_outer(&mut self, a: &[S], b: &[S], scale: S) {
        for (r, &ar) in a.iter().enumerate() {
            let f = ar * scale;
            if f == S::zero() {
                continue;
            }
            for (out, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *out += f * bc;
            }
        }
    }

    /// Nested-list form, one inner list per row.
    pub fn to_nested(&self) -> Vec<Vec<S>> {
        self.data.chunks(self.cols).map(<[S]>::to_vec).collect()
    }

    pub fn from_nested(rows: &[Vec<S>], want_rows: usize, want_cols: usize) -> Result<Self> {
        if rows.len() != want_rows || rows.iter().any(|r| r.len() != want_cols) {
            return Err(Error::Format(format!("expected a {want_rows}x{want_cols} array")));
        }
        Ok(Self { rows: want_rows, cols: want_cols, data: rows.concat() })
    }
}

macro_rules! decoder_params {
    ($($name:ident),* $(,)?) => {
        /// Every learnable decoder array.
        ///
        /// Gate rows are laid out `[input; forget; cell; output]`, each
        /// `hidden_dim` long. The recurrent input at each step is
        /// `[embedding; context]`.
        #[derive(Debug, Clone, PartialEq)]
        pub struct DecoderParams<S> {
            pub config: DecoderConfig,
            $(pub $name: Matrix<S>,)*
        }

        impl<S: Scalar> DecoderParams<S> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn groups(&self) -> Vec<(&'static str, &Matrix<S>)> {
                vec![$((stringify!($name), &self.$name)),*]
            }

            pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Matrix<S>)> {
                vec![$((stringify!($name), &mut self.$name)),*]
            }
        }
    };
}

decoder_params!(
    embedding,
    gate_input,
    gate_hidden,
    gate_bias,
    init_h_weight,
    init_h_bias,
    init_c_weight,
    init_c_bias,
    att_hidden,
    att_feature,
    att_score,
    out_weight,
    out_bias,
);

impl<S: Scalar> DecoderParams<S> {
    pub fn zeros(config: DecoderConfig) -> Self {
        let DecoderConfig { vocab_size: v, embed_dim: e, hidden_dim: h, feature_dim: d, attention_dim: a } = config;
        Self {
            config,
            embedding: Matrix::zeros(v, e),
            gate_input: Matrix::zeros(4 * h, e + d),
            gate_hidden: Matrix::zeros(4 * h, h),
            gate_bias: Matrix::zeros(1, 4 * h),
            init_h_weight: Matrix::zeros(h, 2 * d),
            init_h_bias: Matrix::zeros(1, h),
            init_c_weight: Matrix::zeros(h, 2 * d),
            init_c_bias: Matrix::zeros(1, h),
            att_hidden: Matrix::zeros(h, a),
            att_feature: Matrix::zeros(d, a),
            att_score: Matrix::zeros(1, a),
            out_weight: Matrix::zeros(h, v),
            out_bias: Matrix::zeros(1, v),
        }
    }

    /// Uniform init in `[-0.1, 0.1]` from a seeded generator, forget-gate
    /// bias shifted by +1.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        for (_, m) in p.groups_mut() {
            for v in &mut m.data {
                *v = S::of(rng.random_range(-INIT_RANGE..=INIT_RANGE));
            }
        }
        let h = config.hidden_dim;
        for v in &mut p.gate_bias.data[h..2 * h] {
            *v += S::one();
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|(_, m)| m.data.len()).sum()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for (_, m) in self.groups_mut() {
            for v in &mut m.data {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, m)| m.data.iter().all(|v| v.is_finite()))
    }

    /// Shape of the named group under `config`.
    pub fn expected_shape(config: &DecoderConfig, name: &str) -> Option<(usize, usize)> {
        let z = Self::zeros(*config);
        z.groups().into_iter().find(|(n, _)| *n == name).map(|(_, m)| (m.rows, m.cols))
    }

    pub fn cast<T: Scalar>(&self) -> DecoderParams<T> {
        let mut out = DecoderParams::<T>::zeros(self.config);
        for ((_, dst), (_, src)) in out.groups_mut().into_iter().zip(self.groups()) {
            dst.data = src.data.iter().map(|v| T::of(v.as_f64())).collect();
        }
        out
    }
}
