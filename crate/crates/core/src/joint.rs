//! Brute-force joint distributions over short sequences. Their exact
//! conditionals serve as reference models for the evaluators.

use rand::Rng;

use crate::error::{Error, Result};

/// Largest table the enumerators will build.
pub const MAX_STATES: usize = 1 << 20;

/// Explicit probability of every sequence in `vocab^len`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    len: usize,
    vocab: usize,
    probs: Vec<f64>,
}

impl JointTable {
    pub fn new(len: usize, vocab: usize, probs: Vec<f64>) -> Result<Self> {
        let states = Self::states(len, vocab)?;
        if probs.len() != states {
            return Err(Error::Shape(format!("{} probabilities for {states} sequences", probs.len())));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Domain("joint probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("joint probabilities sum to {total}")));
        }
        Ok(Self { len, vocab, probs })
    }

    fn states(len: usize, vocab: usize) -> Result<usize> {
        if len == 0 || vocab == 0 {
            return Err(Error::Config("joint tables need positive length and vocabulary".into()));
        }
        (0..len)
            .try_fold(1usize, |acc, _| acc.checked_mul(vocab).filter(|&n| n <= MAX_STATES))
            .ok_or_else(|| Error::Config(format!("vocab {vocab} ^ length {len} is too large to enumerate")))
    }

    /// Strictly positive random joint (normalized exponentials of normals).
    pub fn random<R: Rng + ?Sized>(len: usize, vocab: usize, rng: &mut R) -> Result<Self> {
        let states = Self::states(len, vocab)?;
        let raw: Vec<f64> = (0..states).map(|_| (2.0 * rng.random::<f64>() - 1.0).exp() * rng.random::<f64>().max(1e-3)).collect();
        let total: f64 = raw.iter().sum();
        Self::new(len, vocab, raw.into_iter().map(|p| p / total).collect())
    }

    /// Product of per-position marginals.
    pub fn independent(marginals: &[Vec<f64>]) -> Result<Self> {
        let len = marginals.len();
        let vocab = marginals.first().map_or(0, Vec::len);
        let states = Self::states(len, vocab)?;
        let probs = (0..states)
            .map(|i| Self::decode_index(i, len, vocab).iter().enumerate().map(|(p, &v)| marginals[p][v as usize]).product())
            .collect();
        Self::new(len, vocab, probs)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn decode_index(mut i: usize, len: usize, vocab: usize) -> Vec<u32> {
        let mut x = vec![0u32; len];
        for slot in x.iter_mut().rev() {
            *slot = (i % vocab) as u32;
            i /= vocab;
        }
        x
    }

    fn sequences(&self) -> impl Iterator<Item = (Vec<u32>, f64)> + '_ {
        self.probs.iter().enumerate().map(|(i, &p)| (Self::decode_index(i, self.len, self.vocab), p))
    }

    /// Probability that every `(position, token)` pair holds (1-indexed positions).
    pub fn event_prob(&self, fixed: &[(usize, u32)]) -> f64 {
        self.sequences().filter(|(x, _)| fixed.iter().all(|&(t, v)| x[t - 1] == v)).map(|(_, p)| p).sum()
    }

    /// `p(x_target = v | fixed)` for every `v`.
    pub fn conditional(&self, target: usize, fixed: &[(usize, u32)]) -> Result<Vec<f64>> {
        if target == 0 || target > self.len {
            return Err(Error::Data(format!("position {target} outside 1..={}", self.len)));
        }
        let mut out = vec![0.0; self.vocab];
        for (x, p) in self.sequences() {
            if fixed.iter().all(|&(t, v)| x[t - 1] == v) {
                out[x[target - 1] as usize] += p;
            }
        }
        let total: f64 = out.iter().sum();
        if total <= 0.0 {
            return Err(Error::Domain("conditioning event has probability zero".into()));
        }
        Ok(out.into_iter().map(|p| p / total).collect())
    }

    /// `log p(x_{targets} | x_{given})` (1-indexed position lists).
    pub fn log_conditional(&self, x: &[u32], targets: &[usize], given: &[usize]) -> Result<f64> {
        let pick = |ts: &[usize]| ts.iter().map(|&t| (t, x[t - 1])).collect::<Vec<_>>();
        let joint = self.event_prob(&[pick(targets), pick(given)].concat());
        let cond = self.event_prob(&pick(given));
        if cond <= 0.0 {
            return Err(Error::Domain("conditioning event has probability zero".into()));
        }
        Ok(joint.ln() - cond.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conditionals_follow_bayes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let j = JointTable::random(3, 3, &mut rng).unwrap();
        let x = [2u32, 0, 1];
        let chain = j.log_conditional(&x, &[1], &[]).unwrap()
            + j.log_conditional(&x, &[2], &[1]).unwrap()
            + j.log_conditional(&x, &[3], &[1, 2]).unwrap();
        assert!((chain - j.event_prob(&[(1, 2), (2, 0), (3, 1)]).ln()).abs() < 1e-12);
        let c = j.conditional(2, &[(1, 2)]).unwrap();
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((c[0].ln() - j.log_conditional(&x, &[2], &[1]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn independent_table_factorizes() {
        let j = JointTable::independent(&[vec![0.25, 0.75], vec![0.5, 0.5]]).unwrap();
        assert!((j.event_prob(&[(1, 1), (2, 0)]) - 0.375).abs() < 1e-15);
        assert!(JointTable::new(2, 2, vec![0.5; 4]).is_err());
        assert!(JointTable::random(30, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
