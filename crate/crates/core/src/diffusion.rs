//! Conditional NELBO of absorbing-mask diffusion denoisers.
//!
//! With carry-over unmasking the prior and reconstruction terms vanish and the
//! bound reduces to one time integral:
//!
//! `sum_{l in F-S} E_{t, z_t} [ alpha'_t / (1 - alpha_t) * log <x_theta^l(z_t, t), x^l> ]`
//!
//! where positions in `S` are clamped to `x` and the rest are masked
//! independently with probability `1 - alpha_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::joint::JointTable;
use crate::model::Model;
use crate::tensor::{softmax_in_place, Scalar};

/// Lower end of the sampled time range.
pub const T_MIN: f64 = 1e-5;

/// Most free positions the exact enumerator accepts.
pub const MAX_EXACT_FREE: usize = 8;

const CONTRACT_TOL: f64 = 1e-6;

/// Survival probability `alpha(t)` and its derivative.
pub trait NoiseSchedule: Sync {
    fn alpha(&self, t: f64) -> f64;
    fn alpha_prime(&self, t: f64) -> f64;
}

/// `alpha(t) = 1 - t`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LogLinear;

impl NoiseSchedule for LogLinear {
    fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    fn alpha_prime(&self, _t: f64) -> f64 {
        -1.0
    }
}

/// `(alpha, alpha')` of the log-linear schedule.
pub fn log_linear_schedule(t: f64) -> (f64, f64) {
    (LogLinear.alpha(t), LogLinear.alpha_prime(t))
}

/// A model of clean tokens given a partially masked sequence.
pub trait Denoiser: Sync {
    /// Vocabulary size including the mask token.
    fn vocab_size(&self) -> usize;
    fn mask_id(&self) -> u32;
    /// One distribution over the vocabulary per position of `z`.
    fn predict(&self, z: &[u32], t: f64) -> Result<Vec<Vec<f64>>>;
    /// Whether `predict` reads `t`. Time-blind denoisers let the exact
    /// enumerator reuse predictions across quadrature nodes.
    fn uses_time(&self) -> bool {
        true
    }
}

/// Checks normalization, zero mask probability and carry-over unmasking.
pub fn check_prediction(z: &[u32], mask_id: u32, out: &[Vec<f64>]) -> Result<()> {
    if out.len() != z.len() {
        return Err(Error::Contract(format!("denoiser returned {} rows for {} positions", out.len(), z.len())));
    }
    for (l, (row, &tok)) in out.iter().zip(z).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > CONTRACT_TOL || row.iter().any(|p| p.is_nan() || *p < 0.0) {
            return Err(Error::Contract(format!("position {} is not a distribution (sum {total})", l + 1)));
        }
        if row.get(mask_id as usize).is_some_and(|&p| p > CONTRACT_TOL) {
            return Err(Error::Contract(format!("position {} gives the mask token probability {}", l + 1, row[mask_id as usize])));
        }
        if tok != mask_id && row.get(tok as usize).is_none_or(|&p| (p - 1.0).abs() > CONTRACT_TOL) {
            return Err(Error::Contract(format!("position {} does not carry over its unmasked token {tok}", l + 1)));
        }
    }
    Ok(())
}

fn predict_checked<D: Denoiser + ?Sized>(den: &D, z: &[u32], t: f64) -> Result<Vec<Vec<f64>>> {
    let out = den.predict(z, t)?;
    check_prediction(z, den.mask_id(), &out)?;
    Ok(out)
}

fn one_hot(vocab: usize, tok: u32) -> Vec<f64> {
    let mut v = vec![0.0; vocab];
    v[tok as usize] = 1.0;
    v
}

/// Uniform over the `num_tokens` real tokens at masked positions; the mask id is `num_tokens`.
#[derive(Clone, Copy, Debug)]
pub struct UniformDenoiser {
    pub num_tokens: usize,
}

impl Denoiser for UniformDenoiser {
    fn vocab_size(&self) -> usize {
        self.num_tokens + 1
    }

    fn mask_id(&self) -> u32 {
        self.num_tokens as u32
    }

    fn predict(&self, z: &[u32], _t: f64) -> Result<Vec<Vec<f64>>> {
        let v = self.vocab_size();
        let mut uniform = vec![1.0 / self.num_tokens as f64; v];
        uniform[self.num_tokens] = 0.0;
        Ok(z.iter().map(|&tok| if tok == self.mask_id() { uniform.clone() } else { one_hot(v, tok) }).collect())
    }

    fn uses_time(&self) -> bool {
        false
    }
}

/// Exact posterior marginals of a brute-force joint: masked position `l`
/// gets `p(x_l | unmasked positions of z)`. The mask id is the table's vocabulary size.
#[derive(Clone, Debug)]
pub struct TableDenoiser {
    pub joint: JointTable,
}

impl Denoiser for TableDenoiser {
    fn vocab_size(&self) -> usize {
        self.joint.vocab() + 1
    }

    fn mask_id(&self) -> u32 {
        self.joint.vocab() as u32
    }

    fn predict(&self, z: &[u32], _t: f64) -> Result<Vec<Vec<f64>>> {
        let mask = self.mask_id();
        let fixed: Vec<(usize, u32)> = z.iter().enumerate().filter(|(_, &v)| v != mask).map(|(i, &v)| (i + 1, v)).collect();
        z.iter()
            .enumerate()
            .map(|(i, &tok)| {
                if tok == mask {
                    let mut p = self.joint.conditional(i + 1, &fixed)?;
                    p.push(0.0);
                    Ok(p)
                } else {
                    Ok(one_hot(self.vocab_size(), tok))
                }
            })
            .collect()
    }

    fn uses_time(&self) -> bool {
        false
    }
}

/// Wraps an AC-trained model: one forward with `z` in both encoders, the
/// mask token's probability removed and renormalized, unmasked positions
/// copied through.
pub struct TracformerAcDenoiser<'m, F> {
    pub model: &'m Model<F>,
}

impl<F: Scalar> Denoiser for TracformerAcDenoiser<'_, F> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn mask_id(&self) -> u32 {
        self.model.config.mask_token
    }

    fn predict(&self, z: &[u32], _t: f64) -> Result<Vec<Vec<f64>>> {
        let logits = self.model.forward(z, z)?;
        let mask = self.mask_id() as usize;
        Ok(z.iter()
            .enumerate()
            .map(|(i, &tok)| {
                if tok as usize != mask {
                    return one_hot(self.vocab_size(), tok);
                }
                let mut p: Vec<f64> = logits.row(i).iter().map(|l| l.to_f64().unwrap_or(f64::NAN)).collect();
                p[mask] = f64::NEG_INFINITY;
                softmax_in_place(&mut p);
                p
            })
            .collect())
    }

    fn uses_time(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NelboEstimate {
    pub nelbo: f64,
    pub stderr: f64,
    pub n: usize,
}

fn free_positions<D: Denoiser + ?Sized>(den: &D, x: &[u32], given: &[usize]) -> Result<Vec<usize>> {
    let mut is_given = vec![false; x.len()];
    for &s in given {
        if s == 0 || s > x.len() {
            return Err(Error::Data(format!("given position {s} outside 1..={}", x.len())));
        }
        is_given[s - 1] = true;
    }
    if let Some(&bad) = x.iter().find(|&&v| v == den.mask_id() || v as usize >= den.vocab_size()) {
        return Err(Error::Data(format!("clean sequence holds token {bad}, which is the mask or outside the vocabulary")));
    }
    let free: Vec<usize> = (1..=x.len()).filter(|&t| !is_given[t - 1]).collect();
    if free.is_empty() {
        return Err(Error::Domain("every position is given; nothing to score".into()));
    }
    Ok(free)
}

/// `sum_{l masked} -log <x_theta^l(z), x^l>` for one noised sequence.
fn masked_nll<D: Denoiser + ?Sized>(den: &D, x: &[u32], z: &[u32], t: f64) -> Result<f64> {
    let pred = predict_checked(den, z, t)?;
    let mask = den.mask_id();
    Ok(z.iter()
        .enumerate()
        .filter(|(_, &v)| v == mask)
        .map(|(i, _)| -pred[i][x[i] as usize].ln())
        .sum())
}

/// Integrand limit at `t -> 0`: only single-position masks survive.
fn small_time_limit<D: Denoiser + ?Sized, S: NoiseSchedule + ?Sized>(den: &D, x: &[u32], free: &[usize], schedule: &S) -> Result<f64> {
    let mut total = 0.0;
    for &l in free {
        let mut z = x.to_vec();
        z[l - 1] = den.mask_id();
        total += masked_nll(den, x, &z, T_MIN)?;
    }
    Ok(-schedule.alpha_prime(0.0) * total)
}

/// Monte-Carlo estimate with `t ~ U[T_MIN, 1]`. Sample `i` draws from its own
/// stream of `seed`, so results do not depend on `threads`. The sliver
/// `[0, T_MIN)` is added as `T_MIN` times the integrand's limit at 0.
#[allow(clippy::too_many_arguments)]
pub fn conditional_nelbo_mc<D: Denoiser + ?Sized, S: NoiseSchedule + ?Sized>(
    den: &D,
    x: &[u32],
    given: &[usize],
    schedule: &S,
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<NelboEstimate> {
    if n_samples == 0 {
        return Err(Error::Config("need at least one Monte-Carlo sample".into()));
    }
    let free = free_positions(den, x, given)?;
    let draw = |i: usize| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let t = T_MIN + (1.0 - T_MIN) * rng.random::<f64>();
        let keep = schedule.alpha(t);
        let mut z = x.to_vec();
        for &l in &free {
            if rng.random::<f64>() >= keep {
                z[l - 1] = den.mask_id();
            }
        }
        let weight = -schedule.alpha_prime(t) / (1.0 - keep);
        Ok(weight * masked_nll(den, x, &z, t)?)
    };
    let values = crate::parallel_map(n_samples, threads, draw)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let scale = 1.0 - T_MIN;
    let head = T_MIN * small_time_limit(den, x, &free, schedule)?;
    Ok(NelboEstimate { nelbo: scale * mean + head, stderr: scale * (var / n).sqrt(), n: values.len() })
}

/// Exact value by enumerating every mask pattern of the free positions and
/// integrating over `t` with composite Simpson on `quad_points` nodes.
///
/// Pattern weights `(1 - alpha)^k alpha^(n - k)` times `alpha' / (1 - alpha)`
/// simplify to `(1 - alpha)^(k - 1) alpha^(n - k) alpha'`, which is finite at `t = 0`.
pub fn conditional_nelbo_exact_small<D: Denoiser + ?Sized, S: NoiseSchedule + ?Sized>(
    den: &D,
    x: &[u32],
    given: &[usize],
    schedule: &S,
    quad_points: usize,
) -> Result<f64> {
    let free = free_positions(den, x, given)?;
    if free.len() > MAX_EXACT_FREE {
        return Err(Error::Domain(format!("{} free positions; exact enumeration allows at most {MAX_EXACT_FREE}", free.len())));
    }
    if quad_points < 3 || quad_points.is_multiple_of(2) {
        return Err(Error::Config(format!("Simpson's rule needs an odd node count >= 3, got {quad_points}")));
    }
    let n = free.len();
    let patterns: Vec<(i32, Vec<u32>)> = (1u32..(1 << n))
        .map(|bits| {
            let mut z = x.to_vec();
            for (j, &l) in free.iter().enumerate() {
                if bits >> j & 1 == 1 {
                    z[l - 1] = den.mask_id();
                }
            }
            (bits.count_ones() as i32, z)
        })
        .collect();
    let cached: Option<Vec<f64>> = if den.uses_time() {
        None
    } else {
        Some(patterns.iter().map(|(_, z)| masked_nll(den, x, z, 0.5)).collect::<Result<_>>()?)
    };
    let integrand = |t: f64| -> Result<f64> {
        let (a, da) = (schedule.alpha(t), schedule.alpha_prime(t));
        let mut total = 0.0;
        for (i, (k, z)) in patterns.iter().enumerate() {
            let w = (1.0 - a).powi(k - 1) * a.powi(n as i32 - k) * -da;
            if w == 0.0 {
                continue;
            }
            let nll = match &cached {
                Some(c) => c[i],
                None => masked_nll(den, x, z, t)?,
            };
            total += w * nll;
        }
        Ok(total)
    };
    let h = 1.0 / (quad_points - 1) as f64;
    let mut sum = 0.0;
    for i in 0..quad_points {
        let c = if i == 0 || i == quad_points - 1 { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += c * integrand(i as f64 * h)?;
    }
    Ok(sum * h / 3.0)
}

/// Structural terms of the bound for one instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyReport {
    /// KL between the all-mask state at `t = 1` and the prior: zero when
    /// `alpha(1) = 0`.
    pub prior_loss: f64,
    /// `-log p(x_{F-S} | z_0 = x)`: zero under carry-over unmasking.
    pub recons_loss: f64,
    pub violations: Vec<String>,
    pub note: &'static str,
}

impl PropertyReport {
    pub fn ensure(&self) -> Result<()> {
        match self.violations.first() {
            None => Ok(()),
            Some(v) => Err(Error::Contract(v.clone())),
        }
    }
}

/// Evaluates the prior and reconstruction terms directly and records any
/// denoiser contract violation. Only the diffusion term is ever estimated.
pub fn diffusion_term_properties_check<D: Denoiser + ?Sized, S: NoiseSchedule + ?Sized>(
    den: &D,
    x: &[u32],
    given: &[usize],
    schedule: &S,
) -> Result<PropertyReport> {
    let free = free_positions(den, x, given)?;
    let mut violations = Vec::new();
    // All free positions masked at t = 1 with probability (1 - alpha(1))^n.
    let p_all_mask = (1.0 - schedule.alpha(1.0)).powi(free.len() as i32);
    let prior_loss = -p_all_mask.ln();
    if prior_loss.abs() > 1e-12 {
        violations.push(format!("schedule leaves alpha(1) = {}, so the prior term is not zero", schedule.alpha(1.0)));
    }
    let clean = den.predict(x, 0.0)?;
    let recons_loss: f64 = free.iter().map(|&l| -clean[l - 1].get(x[l - 1] as usize).copied().unwrap_or(0.0).ln()).sum();
    if let Err(e) = check_prediction(x, den.mask_id(), &clean) {
        violations.push(e.to_string());
    }
    let mut all_masked = x.to_vec();
    for &l in &free {
        all_masked[l - 1] = den.mask_id();
    }
    if let Err(e) = den.predict(&all_masked, 1.0).and_then(|p| check_prediction(&all_masked, den.mask_id(), &p)) {
        violations.push(e.to_string());
    }
    Ok(PropertyReport {
        prior_loss,
        recons_loss,
        violations,
        note: "prior and reconstruction terms vanish; only the diffusion term is estimated",
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Leaky;

    impl Denoiser for Leaky {
        fn vocab_size(&self) -> usize {
            3
        }
        fn mask_id(&self) -> u32 {
            2
        }
        fn predict(&self, z: &[u32], _t: f64) -> Result<Vec<Vec<f64>>> {
            Ok(z.iter().map(|_| vec![0.5, 0.5, 0.0]).collect())
        }
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(log_linear_schedule(0.0), (1.0, -1.0));
        assert_eq!(log_linear_schedule(1.0), (0.0, -1.0));
        assert_eq!(log_linear_schedule(0.5), (0.5, -1.0));
    }

    #[test]
    fn single_uniform_position_is_log_v() {
        let den = UniformDenoiser { num_tokens: 4 };
        let exact = conditional_nelbo_exact_small(&den, &[2], &[], &LogLinear, 101).unwrap();
        assert!((exact - 4f64.ln()).abs() < 1e-8);
        let mc = conditional_nelbo_mc(&den, &[2], &[], &LogLinear, 20_000, 1, 1).unwrap();
        assert!((mc.nelbo - 4f64.ln()).abs() < 3.0 * mc.stderr);
    }

    #[test]
    fn perfect_denoiser_scores_zero() {
        let joint = JointTable::new(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let den = TableDenoiser { joint };
        let exact = conditional_nelbo_exact_small(&den, &[0, 1], &[], &LogLinear, 11).unwrap();
        assert!(exact.abs() < 1e-12);
    }

    #[test]
    fn only_free_position_contributes() {
        let den = UniformDenoiser { num_tokens: 5 };
        let a = conditional_nelbo_exact_small(&den, &[1, 2, 3], &[1, 3], &LogLinear, 51).unwrap();
        assert!((a - 5f64.ln()).abs() < 1e-8);
        assert!(matches!(conditional_nelbo_mc(&den, &[1, 2], &[1, 2], &LogLinear, 5, 0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn mc_is_thread_independent_and_non_negative() {
        let den = UniformDenoiser { num_tokens: 3 };
        let a = conditional_nelbo_mc(&den, &[0, 1, 2, 1], &[2], &LogLinear, 400, 9, 1).unwrap();
        let b = conditional_nelbo_mc(&den, &[0, 1, 2, 1], &[2], &LogLinear, 400, 9, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.nelbo >= 0.0);
    }

    #[test]
    fn contract_violations_are_flagged() {
        let report = diffusion_term_properties_check(&Leaky, &[0, 1], &[], &LogLinear).unwrap();
        assert!(!report.violations.is_empty());
        assert!(matches!(report.ensure(), Err(Error::Contract(_))));
        assert!(matches!(conditional_nelbo_mc(&Leaky, &[0, 1], &[], &LogLinear, 10, 0, 1), Err(Error::Contract(_))));
        let ok = diffusion_term_properties_check(&UniformDenoiser { num_tokens: 3 }, &[0, 1], &[], &LogLinear).unwrap();
        assert_eq!((ok.prior_loss, ok.recons_loss), (0.0, 0.0));
        assert!(ok.ensure().is_ok());
    }

    #[test]
    fn exact_guards() {
        let den = UniformDenoiser { num_tokens: 2 };
        assert!(matches!(conditional_nelbo_exact_small(&den, &[0; 9], &[], &LogLinear, 11), Err(Error::Domain(_))));
        assert!(matches!(conditional_nelbo_exact_small(&den, &[0; 3], &[], &LogLinear, 10), Err(Error::Config(_))));
    }
}
