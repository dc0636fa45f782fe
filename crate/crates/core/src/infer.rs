//! Generation. CAR decoding runs the suffix encoder once, then walks left to
//! right, extending the prefix encoder one position at a time from cached
//! keys and values. The decoder has no self-attention, so it needs no cache.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskSample};
use crate::masks::{decoder_prefix_mask, decoder_suffix_mask, sparse_prefix_mask, MaskLayout, Side};
use crate::model::{Attention, FeedForward, Linear, Model, Norm};
use crate::tensor::{gelu_scalar, layer_norm_row, log_softmax_row, rotary_row, softmax_in_place, RotaryTable, Scalar, Tensor};

fn linear_row<F: Scalar>(p: &Linear<Tensor<F>>, x: &[F]) -> Vec<F> {
    let mut out = p.bias.data().to_vec();
    let n = out.len();
    F::gemm(1, x.len(), n, x, false, p.weight.data(), false, F::one(), &mut out);
    out
}

fn norm_row<F: Scalar>(p: &Norm<Tensor<F>>, x: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    layer_norm_row(x, p.gain.data(), p.bias.data(), &mut out);
    out
}

fn ffn_row<F: Scalar>(p: &FeedForward<Tensor<F>>, x: &[F]) -> Vec<F> {
    let h: Vec<F> = linear_row(&p.up, x).into_iter().map(gelu_scalar).collect();
    linear_row(&p.down, &h)
}

fn add_into<F: Scalar>(h: &mut [F], x: &[F]) {
    h.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
}

/// Rotated key and value rows of one position.
fn key_value<F: Scalar>(p: &Attention<Tensor<F>>, x: &[F], pos: usize, rot: &RotaryTable<F>) -> (Vec<F>, Vec<F>) {
    let mut k = linear_row(&p.key, x);
    rotary_row(&mut k, pos, rot, false);
    (k, linear_row(&p.value, x))
}

fn query_row<F: Scalar>(p: &Attention<Tensor<F>>, x: &[F], pos: usize, rot: &RotaryTable<F>) -> Vec<F> {
    let mut q = linear_row(&p.query, x);
    rotary_row(&mut q, pos, rot, false);
    q
}

/// Multi-head attention of one query over `keys` (1-indexed positions into
/// the caches), added into `out`.
fn attend_into<F: Scalar>(q: &[F], keys: &[usize], k_cache: &[Vec<F>], v_cache: &[Vec<F>], heads: usize, out: &mut [F]) {
    if keys.is_empty() {
        return;
    }
    let dh = q.len() / heads;
    let scale = F::one() / F::from_usize(dh).expect("head dim").sqrt();
    let mut p = vec![F::zero(); keys.len()];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (pe, &key) in p.iter_mut().zip(keys) {
            let kh = &k_cache[key - 1][h * dh..(h + 1) * dh];
            *pe = qh.iter().zip(kh).fold(F::zero(), |acc, (&a, &b)| acc + a * b) * scale;
        }
        softmax_in_place(&mut p);
        for (&pe, &key) in p.iter().zip(keys) {
            let vh = &v_cache[key - 1][h * dh..(h + 1) * dh];
            for (o, &v) in out[h * dh..(h + 1) * dh].iter_mut().zip(vh) {
                *o += pe * v;
            }
        }
    }
}

/// Append-only per-layer state of the prefix encoder.
#[derive(Clone, Debug)]
pub struct KVCache<F> {
    /// `keys[l - 1][p - 1]`: rotated key of position `p` in encoder layer `l`.
    pub keys: Vec<Vec<Vec<F>>>,
    pub values: Vec<Vec<Vec<F>>>,
    /// `features[l][p - 1]`: prefix feature of position `p` after layer `l`.
    pub features: Vec<Vec<Vec<F>>>,
    /// Decoder-side keys and values of the prefix memory, per decoder layer.
    pub memory_keys: Vec<Vec<Vec<F>>>,
    pub memory_values: Vec<Vec<Vec<F>>>,
}

impl<F> KVCache<F> {
    fn new(layers: usize) -> Self {
        let empty = || (0..layers).map(|_| Vec::new()).collect::<Vec<_>>();
        Self {
            keys: empty(),
            values: empty(),
            features: (0..=layers).map(|_| Vec::new()).collect(),
            memory_keys: empty(),
            memory_values: empty(),
        }
    }

    /// Prefix positions processed so far.
    pub fn len(&self) -> usize {
        self.features[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Incremental CAR state for one sequence: the cached prefix encoder and the
/// suffix-side decoder memory computed once up front.
pub struct CarSession<'m, F> {
    model: &'m Model<F>,
    len: usize,
    rot: RotaryTable<F>,
    enc_prefix: Vec<MaskLayout>,
    dec_prefix: Vec<MaskLayout>,
    dec_suffix: Vec<MaskLayout>,
    suffix_keys: Vec<Vec<Vec<F>>>,
    suffix_values: Vec<Vec<Vec<F>>>,
    pub cache: KVCache<F>,
}

impl<'m, F: Scalar> CarSession<'m, F> {
    /// Runs the suffix encoder over `suffix_tokens` and projects its features
    /// for every decoder layer.
    pub fn new(model: &'m Model<F>, suffix_tokens: &[u32]) -> Result<Self> {
        let cfg = &model.config;
        let len = suffix_tokens.len();
        let stack = model.encoder_forward(suffix_tokens, Side::Suffix)?;
        let layers = cfg.layers;
        let rot = RotaryTable::new(cfg.head_dim(), len)?;
        let mut suffix_keys = Vec::with_capacity(layers);
        let mut suffix_values = Vec::with_capacity(layers);
        for (i, block) in model.params.decoder.iter().enumerate() {
            let source = &stack.layers[layers - i];
            let (mut ks, mut vs) = (Vec::with_capacity(len), Vec::with_capacity(len));
            for p in 1..=len {
                let m = norm_row(&block.memory_norm, source.row(p - 1));
                let (k, v) = key_value(&block.attn, &m, p, &rot);
                ks.push(k);
                vs.push(v);
            }
            suffix_keys.push(ks);
            suffix_values.push(vs);
        }
        let build = |f: &dyn Fn(usize) -> Result<MaskLayout>| (1..=layers).map(f).collect::<Result<Vec<_>>>();
        Ok(Self {
            model,
            len,
            rot,
            enc_prefix: build(&|l| sparse_prefix_mask(l, len, cfg.n_max))?,
            dec_prefix: build(&|l| decoder_prefix_mask(l, layers, len))?,
            dec_suffix: build(&|l| decoder_suffix_mask(l, layers, len))?,
            suffix_keys,
            suffix_values,
            cache: KVCache::new(layers),
        })
    }

    /// Feeds the next prefix token through every encoder layer.
    pub fn push(&mut self, token: u32) -> Result<()> {
        let m = self.model;
        let cfg = &m.config;
        let p = self.cache.len() + 1;
        if p > self.len {
            return Err(Error::Domain(format!("prefix already holds all {} positions", self.len)));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Data(format!("token id {token} outside vocabulary of {}", cfg.vocab_size)));
        }
        let mut h = m.params.embedding.row(token as usize).to_vec();
        self.cache.features[0].push(h.clone());
        for (l, block) in m.params.encoder.iter().enumerate() {
            let x = norm_row(&block.attn_norm, &h);
            let q = query_row(&block.attn, &x, p, &self.rot);
            let (k, v) = key_value(&block.attn, &x, p, &self.rot);
            self.cache.keys[l].push(k);
            self.cache.values[l].push(v);
            let mut a = vec![F::zero(); h.len()];
            attend_into(&q, self.enc_prefix[l].row(p), &self.cache.keys[l], &self.cache.values[l], cfg.heads, &mut a);
            add_into(&mut h, &linear_row(&block.attn.output, &a));
            let f = ffn_row(&block.ffn, &norm_row(&block.ffn_norm, &h));
            add_into(&mut h, &f);
            self.cache.features[l + 1].push(h.clone());
        }
        for (i, block) in m.params.decoder.iter().enumerate() {
            let source = &self.cache.features[cfg.layers - i][p - 1];
            let mem = norm_row(&block.memory_norm, source);
            let (k, v) = key_value(&block.attn, &mem, p, &self.rot);
            self.cache.memory_keys[i].push(k);
            self.cache.memory_values[i].push(v);
        }
        Ok(())
    }

    /// Decoder logits at position `t`; the prefix must hold exactly `t - 1` tokens.
    pub fn logits_at(&self, t: usize) -> Result<Vec<F>> {
        if t == 0 || t > self.len || self.cache.len() != t - 1 {
            return Err(Error::Domain(format!("position {t} needs a prefix of {} tokens, have {}", t.saturating_sub(1), self.cache.len())));
        }
        let m = self.model;
        let heads = m.config.heads;
        let mut h = vec![F::zero(); m.config.d_model];
        for (i, block) in m.params.decoder.iter().enumerate() {
            let x = norm_row(&block.query_norm, &h);
            let q = query_row(&block.attn, &x, t, &self.rot);
            let mut a = vec![F::zero(); h.len()];
            attend_into(&q, self.dec_prefix[i].row(t), &self.cache.memory_keys[i], &self.cache.memory_values[i], heads, &mut a);
            let mut b = vec![F::zero(); h.len()];
            attend_into(&q, self.dec_suffix[i].row(t), &self.suffix_keys[i], &self.suffix_values[i], heads, &mut b);
            add_into(&mut a, &b);
            add_into(&mut h, &linear_row(&block.attn.output, &a));
            let f = ffn_row(&block.ffn, &norm_row(&block.ffn_norm, &h));
            add_into(&mut h, &f);
        }
        Ok(linear_row(&m.params.head, &norm_row(&m.params.final_norm, &h)))
    }
}

/// Greedy (temperature 0) or softmax-temperature sampling of one token.
pub fn sample_token<F: Scalar, R: Rng + ?Sized>(logits: &[F], temperature: f64, rng: &mut R) -> Result<u32> {
    if logits.is_empty() {
        return Err(Error::Sampling("cannot sample from empty logits".into()));
    }
    let values: Vec<f64> = logits.iter().map(|l| l.to_f64().unwrap_or(f64::NAN)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits contain a non-finite value".into()));
    }
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature {temperature} must be finite and non-negative")));
    }
    if temperature == 0.0 {
        let best = values.iter().enumerate().fold(0, |best, (i, &v)| if v > values[best] { i } else { best });
        return Ok(best as u32);
    }
    let mut probs: Vec<f64> = values.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut probs);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i as u32);
        }
    }
    // Rounding left `u` past the last cumulative sum: take the last nonzero entry.
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32)
}

/// One decoded position.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenStep<F> {
    pub position: usize,
    pub token: u32,
    pub logprob: f64,
    pub logits: Vec<F>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Generation<F> {
    pub tokens: Vec<u32>,
    pub steps: Vec<GenStep<F>>,
}

/// Fills every blank of `sample` left to right, conditioning on the given
/// positions and everything already decoded. Given tokens are copied.
pub fn car_generate<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    x: &[u32],
    sample: &MaskSample,
    temperature: f64,
    rng: &mut R,
) -> Result<Generation<F>> {
    if sample.len != x.len() {
        return Err(Error::Shape(format!("mask of length {} for {} tokens", sample.len, x.len())));
    }
    if sample.blank_ids.is_empty() {
        return Err(Error::Domain("nothing to generate: every position is given".into()));
    }
    let suffix = apply_mask(x, &sample.blank_ids, model.config.mask_token)?;
    let mut session = CarSession::new(model, &suffix)?;
    let blank = sample.mask_vector();
    let mut tokens = x.to_vec();
    let mut steps = Vec::with_capacity(sample.blank_ids.len());
    for t in 1..=x.len() {
        if blank[t - 1] {
            let logits = session.logits_at(t)?;
            let token = sample_token(&logits, temperature, rng)?;
            if token as usize >= model.config.vocab_size {
                return Err(Error::Sampling(format!("sampler returned id {token} outside the vocabulary")));
            }
            let logprob = log_softmax_row(&logits)[token as usize].to_f64().unwrap_or(f64::NAN);
            tokens[t - 1] = token;
            steps.push(GenStep { position: t, token, logprob, logits });
        }
        if t < x.len() {
            session.push(tokens[t - 1])?;
        }
    }
    Ok(Generation { tokens, steps })
}

/// `log p(x_t | x_C, x_{<t})` at every blank `t`, teacher-forced through the
/// incremental path. Returns `(t, logprob)` pairs.
pub fn car_score_stepwise<F: Scalar>(model: &Model<F>, x: &[u32], sample: &MaskSample) -> Result<Vec<(usize, f64)>> {
    let suffix = apply_mask(x, &sample.blank_ids, model.config.mask_token)?;
    let mut session = CarSession::new(model, &suffix)?;
    let mut out = Vec::with_capacity(sample.blank_ids.len());
    for t in 1..=x.len() {
        if sample.is_blank(t) {
            let lp = log_softmax_row(&session.logits_at(t)?);
            out.push((t, lp[x[t - 1] as usize].to_f64().unwrap_or(f64::NAN)));
        }
        if t < x.len() {
            session.push(x[t - 1])?;
        }
    }
    Ok(out)
}

/// The same log-probabilities from one full teacher-forced forward pass.
pub fn car_score<F: Scalar>(model: &Model<F>, x: &[u32], sample: &MaskSample) -> Result<Vec<(usize, f64)>> {
    let suffix = apply_mask(x, &sample.blank_ids, model.config.mask_token)?;
    let logits = model.forward(x, &suffix)?;
    Ok(sample
        .blank_ids
        .iter()
        .map(|&t| (t, log_softmax_row(logits.row(t - 1))[x[t - 1] as usize].to_f64().unwrap_or(f64::NAN)))
        .collect())
}

/// Mean per-token negative log-likelihood of left-to-right scoring.
pub fn ar_nll_stepwise<F: Scalar>(model: &Model<F>, x: &[u32]) -> Result<f64> {
    let scores = car_score_stepwise(model, x, &MaskSample::full(x.len()))?;
    Ok(-scores.iter().map(|(_, lp)| lp).sum::<f64>() / scores.len() as f64)
}

/// Predictive distributions at every blank position from one forward pass
/// with the same corrupted input in both encoders.
pub fn ac_predict<F: Scalar>(model: &Model<F>, x: &[u32], sample: &MaskSample) -> Result<Vec<(usize, Vec<f64>)>> {
    let masked = apply_mask(x, &sample.blank_ids, model.config.mask_token)?;
    let logits = model.forward(&masked, &masked)?;
    Ok(sample
        .blank_ids
        .iter()
        .map(|&t| {
            let mut p: Vec<f64> = logits.row(t - 1).iter().map(|l| l.to_f64().unwrap_or(f64::NAN)).collect();
            softmax_in_place(&mut p);
            (t, p)
        })
        .collect())
}

/// Fills every blank with its AC argmax (all positions in one pass).
pub fn ac_infill<F: Scalar>(model: &Model<F>, x: &[u32], sample: &MaskSample) -> Result<Vec<u32>> {
    let mut out = x.to_vec();
    for (t, p) in ac_predict(model, x, sample)? {
        let best = p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
        out[t - 1] = best as u32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model<F: Scalar>(len: usize, seed: u64) -> Model<F> {
        let cfg = ModelConfig {
            max_len: len,
            layers: 4,
            d_model: 16,
            heads: 2,
            n_max: 4,
            vocab_size: 9,
            mask_token: 1,
            dropout: 0.0,
            allow_shallow: false,
        };
        let mut m = Model::<f64>::init(cfg, seed).unwrap();
        for t in m.params.slots_mut() {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += (i as f64 * 0.37 + seed as f64).sin() * 0.3;
            }
        }
        m.cast()
    }

    #[test]
    fn cached_prefix_features_match_full_pass() {
        let m = model::<f64>(12, 1);
        let x: Vec<u32> = (0..12).map(|i| 2 + (i * 5 % 7) as u32).collect();
        let full = m.encoder_forward(&x, Side::Prefix).unwrap();
        let mut s = CarSession::new(&m, &x).unwrap();
        for (p, &tok) in x.iter().enumerate() {
            s.push(tok).unwrap();
            for l in 0..=4 {
                for (a, b) in s.cache.features[l][p].iter().zip(full.layers[l].row(p)) {
                    assert!((a - b).abs() < 1e-10, "layer {l} position {}", p + 1);
                }
            }
        }
        assert!(s.push(3).is_err());
    }

    #[test]
    fn stepwise_logits_match_full_recompute() {
        let m = model::<f64>(10, 2);
        let x: Vec<u32> = vec![2, 3, 4, 5, 6, 7, 8, 2, 3, 4];
        let sample = MaskSample::from_blanks(10, &[2, 3, 6, 9, 10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = car_generate(&m, &x, &sample, 0.0, &mut rng).unwrap();
        let suffix = apply_mask(&x, &sample.blank_ids, 1).unwrap();
        for step in &gen.steps {
            let full = m.forward(&gen.tokens, &suffix).unwrap();
            for (a, b) in step.logits.iter().zip(full.row(step.position - 1)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        for &t in &sample.context {
            assert_eq!(gen.tokens[t - 1], x[t - 1]);
        }
    }

    #[test]
    fn greedy_generation_equals_repeated_argmax() {
        let m = model::<f64>(8, 3);
        let x = vec![0u32; 8];
        let sample = MaskSample::full(8);
        let gen = car_generate(&m, &x, &sample, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let suffix = vec![1u32; 8];
        let mut seq = vec![0u32; 8];
        for t in 1..=8 {
            let logits = m.forward(&seq, &suffix).unwrap();
            seq[t - 1] = sample_token(logits.row(t - 1), 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        }
        assert_eq!(gen.tokens, seq);
    }

    #[test]
    fn scoring_paths_agree() {
        let m = model::<f64>(9, 4);
        let x: Vec<u32> = vec![3, 4, 2, 8, 7, 5, 6, 2, 3];
        let sample = MaskSample::from_blanks(9, &[1, 4, 5, 8]).unwrap();
        let a = car_score_stepwise(&m, &x, &sample).unwrap();
        let b = car_score(&m, &x, &sample).unwrap();
        for ((ta, la), (tb, lb)) in a.iter().zip(&b) {
            assert_eq!(ta, tb);
            assert!((la - lb).abs() < 1e-10);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = car_generate(&m, &x, &sample, 1.0, &mut rng).unwrap();
        let replay: f64 = car_score(&m, &gen.tokens, &sample).unwrap().iter().map(|p| p.1).sum();
        let summed: f64 = gen.steps.iter().map(|s| s.logprob).sum();
        assert!((replay - summed).abs() < 1e-10);
    }

    #[test]
    fn ac_distributions_are_normalized_and_mask_blind() {
        let m = model::<f64>(6, 5);
        let x = vec![2u32, 3, 4, 5, 6, 7];
        let sample = MaskSample::from_blanks(6, &[2, 5]).unwrap();
        let p = ac_predict(&m, &x, &sample).unwrap();
        for (_, d) in &p {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut y = x.clone();
        y[1] = 8;
        y[4] = 2;
        assert_eq!(ac_predict(&m, &y, &sample).unwrap(), p);
    }

    #[test]
    fn sampler_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut logits = vec![0.0f64; 10];
        logits[3] = 2.0;
        logits[7] = 2.0;
        assert_eq!(sample_token(&logits, 0.0, &mut rng).unwrap(), 3);
        let one_hot = [-1e9f64, 0.0, -1e9];
        for temp in [0.0, 0.5, 1.0, 3.0] {
            assert_eq!(sample_token(&one_hot, temp, &mut rng).unwrap(), 1);
        }
        assert!(matches!(sample_token(&[f64::NAN, 0.0], 1.0, &mut rng), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sampler_frequencies_match_softmax() {
        let logits = [0.3f64, -1.0, 1.2, 0.0];
        let mut probs = logits.to_vec();
        softmax_in_place(&mut probs);
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..n {
            counts[sample_token(&logits, 1.0, &mut rng).unwrap() as usize] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd + 1.0);
        }
    }

    #[test]
    fn single_precision_cache_within_tolerance() {
        let m = model::<f32>(16, 6);
        let x: Vec<u32> = (0..16).map(|i| 2 + (i % 7) as u32).collect();
        let sample = MaskSample::full(16);
        let gen = car_generate(&m, &x, &sample, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let suffix = vec![1u32; 16];
        let full = m.forward(&gen.tokens, &suffix).unwrap();
        for s in &gen.steps {
            for (a, b) in s.logits.iter().zip(full.row(s.position - 1)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
