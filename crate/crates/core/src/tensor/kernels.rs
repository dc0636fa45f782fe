//! Row-level numeric kernels shared by the tape ops and the incremental
//! (cache-based) inference path.

use super::{Scalar, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GeLU, `0.5 x (1 + tanh(z))`, evaluated as the equal
/// `x * sigmoid(2 z)` so only one `exp` is needed.
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let u = F::of(2.0 * SQRT_2_OVER_PI) * (x + F::of(GELU_CUBIC) * x * x * x);
    x / (F::one() + (-u).exp())
}

pub(crate) fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c = F::of(2.0 * SQRT_2_OVER_PI);
    let a = F::of(GELU_CUBIC);
    let u = c * (x + a * x * x * x);
    let s = F::one() / (F::one() + (-u).exp());
    s + x * s * (F::one() - s) * c * (F::one() + F::of(3.0) * a * x * x)
}

/// Normalizes `x` to zero mean and unit variance, then applies `gain`/`bias`.
/// Returns `(mean, 1 / sqrt(var + eps))`.
pub fn layer_norm_row<F: Scalar>(x: &[F], gain: &[F], bias: &[F], out: &mut [F]) -> (F, F) {
    let n = F::from_usize(x.len()).expect("row length");
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let rstd = F::one() / (var + F::of(LAYER_NORM_EPS)).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * rstd * g + b;
    }
    (mean, rstd)
}

/// Numerically stable softmax over a slice. An empty slice is left alone.
pub fn softmax_in_place<F: Scalar>(xs: &mut [F]) {
    let Some(max) = xs.iter().copied().reduce(F::max) else {
        return;
    };
    let mut total = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// `log softmax(logits)` with the log-sum-exp shift.
pub fn log_softmax_row<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<F>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Precomputed rotary angles for positions `0..=max_pos`.
#[derive(Clone, Debug)]
pub struct RotaryTable<F> {
    half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Scalar> RotaryTable<F> {
    pub const BASE: f64 = 10_000.0;

    pub fn new(head_dim: usize, max_pos: usize) -> Result<Self> {
        if !head_dim.is_multiple_of(2) || head_dim == 0 {
            return Err(Error::Config(format!("rotary encoding needs an even head dimension, got {head_dim}")));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity((max_pos + 1) * half);
        let mut sin = Vec::with_capacity((max_pos + 1) * half);
        for pos in 0..=max_pos {
            for i in 0..half {
                let freq = Self::BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(F::of(angle.cos()));
                sin.push(F::of(angle.sin()));
            }
        }
        Ok(Self { half, cos, sin })
    }

    pub fn max_pos(&self) -> usize {
        self.cos.len() / self.half - 1
    }

    pub fn head_dim(&self) -> usize {
        self.half * 2
    }
}

/// Rotates consecutive pairs of every head in `row` by `pos * freq_i`
/// (or by the negated angle when `inverse` is set).
pub fn rotary_row<F: Scalar>(row: &mut [F], pos: usize, table: &RotaryTable<F>, inverse: bool) {
    let half = table.half;
    let cos = &table.cos[pos * half..(pos + 1) * half];
    let sin = &table.sin[pos * half..(pos + 1) * half];
    for head in row.chunks_exact_mut(2 * half) {
        for (i, pair) in head.chunks_exact_mut(2).enumerate() {
            let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }
}

/// Applies rotary position encoding to a `[T, heads, head_dim]` tensor,
/// row `i` being rotated by angle `positions[i] * 10000^(-2j / head_dim)`.
pub fn rotary_apply<F: Scalar>(x: &Tensor<F>, positions: &[usize]) -> Result<Tensor<F>> {
    let &[len, _heads, head_dim] = x.shape() else {
        return Err(Error::Shape(format!("rotary expects [T, heads, head_dim], got {:?}", x.shape())));
    };
    if positions.len() != len {
        return Err(Error::Shape(format!("{} positions for {len} rows", positions.len())));
    }
    let max_pos = positions.iter().copied().max().unwrap_or(0);
    let table = RotaryTable::new(head_dim, max_pos)?;
    let mut out = x.clone();
    let stride = x.numel() / len;
    for (row, &pos) in out.data_mut().chunks_exact_mut(stride).zip(positions) {
        rotary_row(row, pos, &table, false);
    }
    Ok(out)
}
