use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the model math runs on: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`; never fails for finite or infinite input.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax with max-shifted exponentials, written into `out`.
pub fn softmax_into<S: Scalar>(xs: &[S], out: &mut [S]) {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax<S: Scalar>(xs: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); xs.len()];
    softmax_into(xs, &mut out);
    out
}

/// Index of the largest value, ties resolved to the lowest index.
pub fn argmax<S: PartialOrd + Copy>(xs: &[S]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some(b) if x.partial_cmp(&xs[b]) != Some(std::cmp::Ordering::Greater) => {}
            _ => best = Some(i),
        }
    }
    best
}
