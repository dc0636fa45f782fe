//! Context-set sampling: span masking, the mixed unconditional/span
//! strategy, fixed fractional ranges, and token corruption.
//!
//! Positions are 1-indexed and spans are half-open `[start, end)`.

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Span-length distribution. Both variants have support `{1, 2, ...}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SpanDistribution {
    /// `P(k) = (1/mean) (1 - 1/mean)^(k-1)`.
    Geometric { mean: f64 },
    /// A logistic(mean, sigma) draw rounded to the nearest integer,
    /// redrawn while below 1.
    DLogistic { mean: f64, sigma: f64 },
}

impl SpanDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Geometric { mean } if mean >= 1.0 && mean.is_finite() => Ok(()),
            Self::DLogistic { mean, sigma } if mean >= 1.0 && mean.is_finite() && sigma > 0.0 && sigma.is_finite() => Ok(()),
            other => Err(Error::Config(format!("invalid span distribution {other:?}"))),
        }
    }

    /// Draws one span length. Call [`SpanDistribution::validate`] first.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            Self::Geometric { mean } => {
                let failures = Geometric::new(1.0 / mean).expect("validated mean").sample(rng);
                usize::try_from(failures).unwrap_or(usize::MAX - 1) + 1
            }
            Self::DLogistic { mean, sigma } => loop {
                let u: f64 = rng.random();
                if u <= 0.0 {
                    continue;
                }
                let k = (mean + sigma * (u / (1.0 - u)).ln()).round();
                if k >= 1.0 {
                    break if k >= usize::MAX as f64 { usize::MAX - 1 } else { k as usize };
                }
            },
        }
    }
}

/// A context set, its complement and the spans that produced the complement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSample {
    pub len: usize,
    /// Disjoint half-open `[start, end)` spans, sorted by start.
    pub spans: Vec<(usize, usize)>,
    /// Sorted masked positions.
    pub blank_ids: Vec<usize>,
    /// Sorted given positions.
    pub context: Vec<usize>,
}

impl MaskSample {
    /// Builds a sample from a membership vector (`masked[t - 1]`).
    pub fn from_mask(masked: &[bool]) -> Self {
        let len = masked.len();
        let mut spans = Vec::new();
        let mut t = 1;
        while t <= len {
            if masked[t - 1] {
                let start = t;
                while t <= len && masked[t - 1] {
                    t += 1;
                }
                spans.push((start, t));
            } else {
                t += 1;
            }
        }
        let (blank_ids, context) = (1..=len).partition(|&t| masked[t - 1]);
        Self { len, spans, blank_ids, context }
    }

    /// Every position masked.
    pub fn full(len: usize) -> Self {
        Self::from_mask(&vec![true; len])
    }

    /// Nothing masked except `blank`.
    pub fn from_blanks(len: usize, blank: &[usize]) -> Result<Self> {
        let mut masked = vec![false; len];
        for &t in blank {
            if t == 0 || t > len {
                return Err(Error::Data(format!("position {t} outside 1..={len}")));
            }
            masked[t - 1] = true;
        }
        Ok(Self::from_mask(&masked))
    }

    pub fn is_blank(&self, t: usize) -> bool {
        self.blank_ids.binary_search(&t).is_ok()
    }

    /// Membership vector, index `t - 1`.
    pub fn mask_vector(&self) -> Vec<bool> {
        let mut v = vec![false; self.len];
        for &t in &self.blank_ids {
            v[t - 1] = true;
        }
        v
    }
}

/// Number of positions a span mask of ratio `p` covers.
pub fn mask_target(len: usize, p: f64) -> usize {
    ((p * len as f64).round() as usize).clamp(1, len)
}

/// Samples spans until `max(1, round(p * len))` positions are masked.
///
/// Starts are uniform on `1..=len`; a start inside an existing span or a
/// span overlapping one is rejected. The last accepted span is trimmed from
/// its end so the count is exact.
///
/// When every remaining gap is shorter than any length the distribution
/// realistically draws, rejection never ends. After [`span_patience`]
/// rejections a span that runs into an existing one is cut short before it
/// instead of being rejected, which guarantees termination.
pub fn sample_span_mask<R: Rng + ?Sized>(len: usize, p: f64, dist: SpanDistribution, rng: &mut R) -> Result<MaskSample> {
    if len == 0 {
        return Err(Error::Config("span masking needs a positive length".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("mask ratio {p} outside (0, 1]")));
    }
    dist.validate()?;
    let target = mask_target(len, p);
    let mut masked = vec![false; len];
    let mut count = 0;
    let mut rejections = 0;
    let patience = span_patience(len);
    let mut last = (0, 0);
    while count < target {
        let start = rng.random_range(1..=len);
        if masked[start - 1] {
            continue;
        }
        let mut end = start.saturating_add(dist.sample(rng)).min(len + 1);
        if let Some(hit) = masked[start - 1..end - 1].iter().position(|&m| m) {
            rejections += 1;
            if rejections <= patience {
                continue;
            }
            end = start + hit;
        }
        masked[start - 1..end - 1].iter_mut().for_each(|m| *m = true);
        count += end - start;
        last = (start, end);
    }
    for t in (last.1 - (count - target))..last.1 {
        masked[t - 1] = false;
    }
    Ok(MaskSample::from_mask(&masked))
}

/// Overlap rejections tolerated before spans are cut to fit.
pub fn span_patience(len: usize) -> usize {
    100 * len + 1000
}

/// Which branch of the mixed strategy produced a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixedBranch {
    Full,
    High,
    Moderate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedDraw {
    pub branch: MixedBranch,
    pub sample: MaskSample,
}

/// Mean span length of both span branches of the mixed strategy.
pub const MIXED_SPAN_MEAN: f64 = 50.0;

/// 30% fully masked, 20% span mask at ratio 0.85, 50% span mask at ratio 0.5.
pub fn sample_mixed_mask<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<MixedDraw> {
    let dist = SpanDistribution::Geometric { mean: MIXED_SPAN_MEAN };
    let r: f64 = rng.random();
    if r < 0.3 {
        if len == 0 {
            return Err(Error::Config("span masking needs a positive length".into()));
        }
        return Ok(MixedDraw { branch: MixedBranch::Full, sample: MaskSample::full(len) });
    }
    let (branch, p) = if r < 0.5 { (MixedBranch::High, 0.85) } else { (MixedBranch::Moderate, 0.5) };
    Ok(MixedDraw { branch, sample: sample_span_mask(len, p, dist, rng)? })
}

/// Masks `floor(a*len)+1 ..= floor(b*len)` for each `[a, b)` range.
pub fn fixed_range_mask(ranges: &[(f64, f64)], len: usize) -> Result<MaskSample> {
    for (i, &(a, b)) in ranges.iter().enumerate() {
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
            return Err(Error::Config(format!("mask range [{a}, {b}) is not inside [0, 1]")));
        }
        for &(c, d) in &ranges[..i] {
            if a < d && c < b {
                return Err(Error::Config(format!("mask ranges [{c}, {d}) and [{a}, {b}) overlap")));
            }
        }
    }
    let mut masked = vec![false; len];
    for &(a, b) in ranges {
        let lo = (a * len as f64).floor() as usize;
        let hi = (b * len as f64).floor() as usize;
        masked[lo..hi].iter_mut().for_each(|m| *m = true);
    }
    Ok(MaskSample::from_mask(&masked))
}

/// Parses `"0.25:0.75,0.9:1"` into fractional ranges.
pub fn parse_ranges(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|part| {
            let (a, b) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("mask range `{part}` is not of the form a:b")))?;
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number `{s}` in mask range")));
            Ok((num(a)?, num(b)?))
        })
        .collect()
}

/// Copy of `tokens` with every blank position replaced by `mask_id`.
pub fn apply_mask(tokens: &[u32], blank_ids: &[usize], mask_id: u32) -> Result<Vec<u32>> {
    let mut out = tokens.to_vec();
    for &t in blank_ids {
        if t == 0 || t > tokens.len() {
            return Err(Error::Data(format!("blank position {t} outside 1..={}", tokens.len())));
        }
        out[t - 1] = mask_id;
    }
    Ok(out)
}

/// A configured way of drawing context sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskStrategy {
    Span { ratio: f64, span: SpanDistribution },
    Mixed {},
    Ranges { ranges: Vec<(f64, f64)> },
    /// Nothing given: every position is predicted.
    Full {},
}

impl MaskStrategy {
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<MaskSample> {
        match self {
            Self::Span { ratio, span } => sample_span_mask(len, *ratio, *span, rng),
            Self::Mixed {} => Ok(sample_mixed_mask(len, rng)?.sample),
            Self::Ranges { ranges } => fixed_range_mask(ranges, len),
            Self::Full {} => Ok(MaskSample::full(len)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn geo(mean: f64) -> SpanDistribution {
        SpanDistribution::Geometric { mean }
    }

    #[test]
    fn exact_count_and_union() {
        let s = sample_span_mask(10, 0.5, geo(3.0), &mut rng(0)).unwrap();
        assert_eq!(s.blank_ids.len(), 5);
        let from_spans: Vec<usize> = s.spans.iter().flat_map(|&(a, b)| a..b).collect();
        assert_eq!(from_spans, s.blank_ids);
        assert_eq!(s.blank_ids.len() + s.context.len(), 10);
    }

    #[test]
    fn unit_mean_gives_unit_spans() {
        let mut r = rng(1);
        for _ in 0..100 {
            assert_eq!(geo(1.0).sample(&mut r), 1);
        }
    }

    #[test]
    fn tiny_ratio_still_masks_one() {
        let s = sample_span_mask(7, 0.01, geo(2.0), &mut rng(2)).unwrap();
        assert_eq!(s.blank_ids.len(), 1);
        assert_eq!(mask_target(1024, 0.85), 870);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = sample_span_mask(64, 0.4, geo(4.0), &mut rng(9)).unwrap();
        let b = sample_span_mask(64, 0.4, geo(4.0), &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dlogistic_support() {
        let d = SpanDistribution::DLogistic { mean: 2.0, sigma: 3.0 };
        let mut r = rng(3);
        assert!((0..10_000).all(|_| d.sample(&mut r) >= 1));
        assert!(SpanDistribution::DLogistic { mean: 2.0, sigma: 0.0 }.validate().is_err());
        assert!(geo(0.5).validate().is_err());
    }

    #[test]
    fn bad_ratio_is_config_error() {
        assert!(matches!(sample_span_mask(8, 0.0, geo(2.0), &mut rng(0)), Err(Error::Config(_))));
        assert!(matches!(sample_span_mask(8, 1.5, geo(2.0), &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn full_ratio_masks_everything() {
        let s = sample_span_mask(20, 1.0, geo(3.0), &mut rng(4)).unwrap();
        assert_eq!(s.blank_ids, (1..=20).collect::<Vec<_>>());
        assert!(s.context.is_empty());
    }

    #[test]
    fn fixed_ranges() {
        let s = fixed_range_mask(&[(0.25, 0.75)], 128).unwrap();
        assert_eq!(s.blank_ids, (33..=96).collect::<Vec<_>>());
        let s = fixed_range_mask(&[(0.0, 1.0)], 5).unwrap();
        assert_eq!(s.blank_ids.len(), 5);
        let s = fixed_range_mask(&[(0.0, 0.25), (0.75, 1.0)], 8).unwrap();
        assert_eq!(s.blank_ids, vec![1, 2, 7, 8]);
        assert_eq!(s.spans, vec![(1, 3), (7, 9)]);
        assert!(fixed_range_mask(&[(0.0, 0.5), (0.4, 0.6)], 8).is_err());
        assert!(fixed_range_mask(&[(0.5, 1.2)], 8).is_err());
        assert_eq!(parse_ranges("0.25:0.75, 0.9:1").unwrap(), vec![(0.25, 0.75), (0.9, 1.0)]);
        assert!(parse_ranges("0.3").is_err());
    }

    #[test]
    fn apply_mask_cases() {
        let x = [5u32, 6, 7];
        assert_eq!(apply_mask(&x, &[], 1).unwrap(), x);
        assert_eq!(apply_mask(&x, &[1, 2, 3], 1).unwrap(), [1, 1, 1]);
        assert_eq!(apply_mask(&x, &[2], 1).unwrap(), [5, 1, 7]);
        assert!(matches!(apply_mask(&x, &[4], 1), Err(Error::Data(_))));
    }

    #[test]
    fn mixed_full_branch_masks_all() {
        let mut r = rng(5);
        let mut seen = false;
        for _ in 0..50 {
            let d = sample_mixed_mask(100, &mut r).unwrap();
            match d.branch {
                MixedBranch::Full => {
                    seen = true;
                    assert_eq!(d.sample.blank_ids.len(), 100);
                }
                MixedBranch::High => assert_eq!(d.sample.blank_ids.len(), 85),
                MixedBranch::Moderate => assert_eq!(d.sample.blank_ids.len(), 50),
            }
        }
        assert!(seen);
    }

    #[test]
    fn narrow_length_distributions_terminate() {
        let dist = SpanDistribution::DLogistic { mean: 28.0, sigma: 0.8 };
        let mut r = rng(4);
        for _ in 0..50 {
            assert_eq!(sample_span_mask(969, 0.85, dist, &mut r).unwrap().blank_ids.len(), 824);
        }
    }

    #[test]
    fn long_spans_on_short_sequences() {
        let mut r = rng(3);
        for _ in 0..500 {
            assert_eq!(sample_span_mask(16, 0.85, geo(50.0), &mut r).unwrap().blank_ids.len(), 14);
        }
    }

    #[test]
    fn strategy_json_round_trip() {
        let s = MaskStrategy::Span { ratio: 0.5, span: geo(3.0) };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<MaskStrategy>(&json).unwrap(), s);
        assert!(serde_json::from_str::<MaskStrategy>(r#"{"kind":"mixed","extra":1}"#).is_err());
    }
}
