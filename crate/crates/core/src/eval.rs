//! Conditional and unconditional perplexity, and order-consistency gaps.

use std::collections::HashMap;
use std::fmt::Write as _;

use itertools::Itertools;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::infer::{ac_predict, car_score};
use crate::joint::JointTable;
use crate::masking::{MaskSample, MaskStrategy};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::train::Objective;

/// Longest sequence for which every ordering is enumerated by default.
pub const MAX_ALL_ORDERS_LEN: usize = 6;

/// Default sequence length for conditional evaluation.
pub const DEFAULT_EVAL_LEN: usize = 128;

/// Pooled perplexity over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub objective: Objective,
    pub mask: String,
    pub perplexity: f64,
    pub total_nll: f64,
    pub tokens: usize,
    pub sequences: usize,
    /// Sequences with no scored position after exclusions.
    pub skipped: usize,
    /// Summed NLL and scored-token count per sequence, in dataset order.
    pub per_sequence: Vec<SequenceNll>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceNll {
    pub nll: f64,
    pub tokens: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-token NLL of the blanks of one sequence, excluding pad and
/// optionally EOS targets.
pub fn sequence_nll<F: Scalar>(
    model: &Model<F>,
    objective: Objective,
    x: &[u32],
    sample: &MaskSample,
    exclude_eos: bool,
) -> Result<SequenceNll> {
    let keep = |t: usize| x[t - 1] != PAD_ID && !(exclude_eos && x[t - 1] == EOS_ID);
    let scored: Vec<f64> = match objective {
        Objective::Car => car_score(model, x, sample)?.into_iter().filter(|&(t, _)| keep(t)).map(|(_, lp)| -lp).collect(),
        Objective::Ac => ac_predict(model, x, sample)?
            .into_iter()
            .filter(|&(t, _)| keep(t))
            .map(|(t, p)| -p[x[t - 1] as usize].ln())
            .collect(),
    };
    let nll = scored.iter().sum::<f64>();
    if !nll.is_finite() {
        return Err(Error::NonFinite(format!("sequence NLL is {nll}")));
    }
    Ok(SequenceNll { nll, tokens: scored.len() })
}

fn describe(strategy: &MaskStrategy) -> String {
    serde_json::to_string(strategy).unwrap_or_else(|_| format!("{strategy:?}"))
}

fn evaluate<F: Scalar>(
    model: &Model<F>,
    sequences: &[Vec<u32>],
    objective: Objective,
    strategy: &MaskStrategy,
    seed: u64,
    exclude_eos: bool,
    threads: usize,
) -> Result<EvalReport> {
    let per_sequence = crate::parallel_map(sequences.len(), threads, |i| {
        let x = &sequences[i];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let sample = strategy.sample(x.len(), &mut rng)?;
        sequence_nll(model, objective, x, &sample, exclude_eos)
    })?;
    let total_nll: f64 = per_sequence.iter().map(|s| s.nll).sum();
    let tokens: usize = per_sequence.iter().map(|s| s.tokens).sum();
    let skipped = per_sequence.iter().filter(|s| s.tokens == 0).count();
    if tokens == 0 {
        return Err(Error::Data("no position left to score after excluding pad and EOS".into()));
    }
    Ok(EvalReport {
        objective,
        mask: describe(strategy),
        perplexity: (total_nll / tokens as f64).exp(),
        total_nll,
        tokens,
        sequences: sequences.len(),
        skipped,
        per_sequence,
    })
}

/// Perplexity of the blanks under `strategy`, pooled over all predicted
/// tokens. EOS and pad targets are not scored. Sequence `i` draws its mask
/// from stream `i` of `seed`.
pub fn conditional_ppl<F: Scalar>(
    model: &Model<F>,
    sequences: &[Vec<u32>],
    objective: Objective,
    strategy: &MaskStrategy,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    evaluate(model, sequences, objective, strategy, seed, true, threads)
}

/// Left-to-right perplexity (CAR with an empty context). EOS is scored.
pub fn unconditional_ppl<F: Scalar>(model: &Model<F>, sequences: &[Vec<u32>], threads: usize) -> Result<EvalReport> {
    evaluate(model, sequences, Objective::Car, &MaskStrategy::Full {}, 0, false, threads)
}

/// A model of `p(x_t | x_C)` for arbitrary context sets.
pub trait ContextConditional: Sync {
    fn vocab(&self) -> usize;
    /// One distribution per position. Rows at positions in `context` are
    /// unspecified.
    fn conditionals(&self, x: &[u32], context: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// Arbitrary-context queries answered by one AC forward pass.
pub struct AcConditional<'m, F> {
    pub model: &'m Model<F>,
}

impl<F: Scalar> ContextConditional for AcConditional<'_, F> {
    fn vocab(&self) -> usize {
        self.model.config.vocab_size
    }

    fn conditionals(&self, x: &[u32], context: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut given = vec![false; x.len()];
        for &t in context {
            given[t - 1] = true;
        }
        let sample = MaskSample::from_mask(&given.iter().map(|g| !g).collect::<Vec<_>>());
        let mut rows = vec![Vec::new(); x.len()];
        for (t, p) in ac_predict(self.model, x, &sample)? {
            rows[t - 1] = p;
        }
        Ok(rows)
    }
}

impl ContextConditional for JointTable {
    fn vocab(&self) -> usize {
        JointTable::vocab(self)
    }

    fn conditionals(&self, x: &[u32], context: &[usize]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.len() {
            return Err(Error::Shape(format!("sequence of {} for a joint over {}", x.len(), self.len())));
        }
        let fixed: Vec<(usize, u32)> = context.iter().map(|&t| (t, x[t - 1])).collect();
        (1..=x.len())
            .map(|t| if context.contains(&t) { Ok(Vec::new()) } else { self.conditional(t, &fixed) })
            .collect()
    }
}

/// Independent per-position marginals, which ignore the context.
#[derive(Clone, Debug, PartialEq)]
pub struct IndependentMarginals(pub Vec<Vec<f64>>);

impl ContextConditional for IndependentMarginals {
    fn vocab(&self) -> usize {
        self.0.first().map_or(0, Vec::len)
    }

    fn conditionals(&self, x: &[u32], _context: &[usize]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.0.len() {
            return Err(Error::Shape(format!("sequence of {} for {} marginals", x.len(), self.0.len())));
        }
        Ok(self.0.clone())
    }
}

/// Log-likelihood of one sequence under every queried ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderGap {
    pub orders: Vec<Vec<usize>>,
    pub log_likelihoods: Vec<f64>,
    /// Per-order step terms `log p(x_{pi(k)} | x_{pi(<k)})`.
    pub steps: Vec<Vec<f64>>,
    pub gap: f64,
}

fn check_order(order: &[usize], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    if order.len() != len {
        return Err(Error::Config(format!("order {order:?} is not a permutation of 1..={len}")));
    }
    for &t in order {
        if t == 0 || t > len || std::mem::replace(&mut seen[t - 1], true) {
            return Err(Error::Config(format!("order {order:?} is not a permutation of 1..={len}")));
        }
    }
    Ok(())
}

/// Every ordering of `1..=len`, in lexicographic order.
pub fn all_orders(len: usize) -> Result<Vec<Vec<usize>>> {
    if len > MAX_ALL_ORDERS_LEN {
        return Err(Error::Config(format!("{len}! orderings is too many; pass an explicit order list for sequences longer than {MAX_ALL_ORDERS_LEN}")));
    }
    Ok((1..=len).permutations(len).collect())
}

/// Factorizes `x` through each ordering with one conditional query per
/// step. `None` means every ordering. Queries sharing a context set are
/// answered once.
pub fn order_consistency_gap<M: ContextConditional + ?Sized>(model: &M, x: &[u32], orders: Option<&[Vec<usize>]>) -> Result<OrderGap> {
    if x.is_empty() {
        return Err(Error::Data("empty sequence".into()));
    }
    if x.len() > 64 {
        return Err(Error::Config("order-consistency sequences are limited to 64 positions".into()));
    }
    let orders = match orders {
        Some(o) => o.to_vec(),
        None => all_orders(x.len())?,
    };
    if orders.is_empty() {
        return Err(Error::Config("no orders to evaluate".into()));
    }
    let mut memo: HashMap<u64, Vec<Vec<f64>>> = HashMap::new();
    let mut steps = Vec::with_capacity(orders.len());
    for order in &orders {
        check_order(order, x.len())?;
        let mut terms = Vec::with_capacity(order.len());
        for (k, &t) in order.iter().enumerate() {
            let context = &order[..k];
            let key = context.iter().fold(0u64, |m, &c| m | 1 << (c - 1));
            if let std::collections::hash_map::Entry::Vacant(e) = memo.entry(key) {
                let sorted: Vec<usize> = context.iter().copied().sorted().collect();
                e.insert(model.conditionals(x, &sorted)?);
            }
            let p = memo[&key][t - 1].get(x[t - 1] as usize).copied().unwrap_or(0.0);
            terms.push(p.ln());
        }
        steps.push(terms);
    }
    let log_likelihoods: Vec<f64> = steps.iter().map(|s| s.iter().sum()).collect();
    let (lo, hi) = log_likelihoods.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(OrderGap { orders, log_likelihoods, steps, gap: hi - lo })
}

/// Counts of `values` in buckets `[k w, (k+1) w)`, as CSV `gap_bucket,count`.
/// Buckets are labelled by their lower edge; empty buckets are listed up to the largest.
pub fn gap_histogram_csv(values: &[f64], width: f64) -> Result<String> {
    if width.is_nan() || width <= 0.0 {
        return Err(Error::Config(format!("bucket width must be positive, got {width}")));
    }
    let mut counts: Vec<usize> = Vec::new();
    for &v in values {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::NonFinite(format!("gap value {v}")));
        }
        let b = (v / width).floor() as usize;
        if counts.len() <= b {
            counts.resize(b + 1, 0);
        }
        counts[b] += 1;
    }
    let mut out = String::from("gap_bucket,count\n");
    for (b, c) in counts.iter().enumerate() {
        writeln!(out, "{},{c}", (b as f64 * width * 1e9).round() / 1e9).expect("writing to a String");
    }
    Ok(out)
}

/// Shortfall of each order's log-likelihood from the best order.
pub fn order_deficits(gap: &OrderGap) -> Vec<f64> {
    let best = gap.log_likelihoods.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    gap.log_likelihoods.iter().map(|ll| best - ll).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::SpanDistribution;
    use crate::model::ModelConfig;

    fn zero_model(vocab: usize) -> Model<f64> {
        Model::zeros(ModelConfig {
            max_len: 8,
            layers: 3,
            d_model: 8,
            heads: 2,
            n_max: 4,
            vocab_size: vocab,
            mask_token: 1,
            dropout: 0.0,
            allow_shallow: false,
        })
        .unwrap()
    }

    #[test]
    fn uniform_model_has_perplexity_v() {
        let m = zero_model(7);
        let data = vec![vec![3, 4, 5, 6, 3, 4, 2, 0], vec![6; 8]];
        let strat = MaskStrategy::Span { ratio: 0.5, span: SpanDistribution::Geometric { mean: 2.0 } };
        for objective in [Objective::Car, Objective::Ac] {
            let r = conditional_ppl(&m, &data, objective, &strat, 3, 1).unwrap();
            assert!((r.perplexity - 7.0).abs() < 1e-9);
        }
        assert!((unconditional_ppl(&m, &data, 1).unwrap().perplexity - 7.0).abs() < 1e-9);
    }

    #[test]
    fn eos_and_pad_exclusion() {
        let m = zero_model(5);
        let data = vec![vec![3, 4, 2, 0, 0, 0, 0, 0]];
        let cond = conditional_ppl(&m, &data, Objective::Car, &MaskStrategy::Full {}, 0, 1).unwrap();
        assert_eq!(cond.tokens, 2);
        assert_eq!(unconditional_ppl(&m, &data, 1).unwrap().tokens, 3);
        let only_eos = vec![vec![2, 0, 0, 0, 0, 0, 0, 0], vec![3; 8]];
        let r = conditional_ppl(&m, &only_eos, Objective::Ac, &MaskStrategy::Full {}, 0, 1).unwrap();
        assert_eq!((r.skipped, r.tokens), (1, 8));
    }

    #[test]
    fn unconditional_is_conditional_with_empty_context() {
        let m = crate::model::init_parameters::<f64>(zero_model(6).config, 4).unwrap();
        let data = vec![vec![3, 4, 5, 3, 4, 5, 3, 4], vec![5, 5, 4, 4, 3, 3, 5, 4]];
        let a = unconditional_ppl(&m, &data, 1).unwrap();
        let b = conditional_ppl(&m, &data, Objective::Car, &MaskStrategy::Full {}, 0, 1).unwrap();
        assert_eq!(a.perplexity.to_bits(), b.perplexity.to_bits());
        assert_eq!(a, unconditional_ppl(&m, &data, 2).unwrap());
    }

    #[test]
    fn consistent_models_have_zero_gap() {
        let marg = IndependentMarginals(vec![vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]]);
        let g = order_consistency_gap(&marg, &[1, 0, 1], None).unwrap();
        assert_eq!(g.orders.len(), 6);
        assert!(g.gap < 1e-12);
        let single = order_consistency_gap(&IndependentMarginals(vec![vec![1.0]]), &[0], None).unwrap();
        assert_eq!(single.gap, 0.0);
    }

    #[test]
    fn order_validation() {
        let marg = IndependentMarginals(vec![vec![1.0]; 7]);
        assert!(matches!(order_consistency_gap(&marg, &[0; 7], None), Err(Error::Config(_))));
        let explicit = vec![(1..=7).collect::<Vec<_>>(), (1..=7).rev().collect()];
        assert!(order_consistency_gap(&marg, &[0; 7], Some(&explicit)).is_ok());
        assert!(matches!(order_consistency_gap(&marg, &[0; 3], Some(&[vec![1, 1, 2]])), Err(Error::Config(_))));
    }

    #[test]
    fn histogram_buckets() {
        let csv = gap_histogram_csv(&[0.0, 0.05, 0.25, 0.31], 0.1).unwrap();
        assert_eq!(csv, "gap_bucket,count\n0,2\n0.1,0\n0.2,1\n0.3,1\n");
    }
}
