//! CAR and AC objectives, AdamW, the warmup-cosine schedule and the loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskSample, MaskStrategy, SpanDistribution};
use crate::model::{Bound, DropoutCtx, ForwardCtx, Model, SlotKind};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Prefix encoder sees the clean sequence; the suffix encoder sees the
    /// masked one. Position `t` conditions on `C` and everything before `t`.
    Car,
    /// Both encoders see the masked sequence; position `t` conditions on `C`.
    Ac,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub mask: MaskStrategy,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Emit a trace line every this many steps.
    pub log_every: usize,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Stop early once the mean loss of the last ten steps is below this.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Car,
            mask: MaskStrategy::Span { ratio: 0.5, span: SpanDistribution::Geometric { mean: 3.0 } },
            batch_size: 32,
            steps: 2000,
            warmup: 100,
            lr_init: 6e-4,
            lr_final: 6e-5,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            clip_norm: 1.0,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return fail(format!("need 0 < lr_final <= lr_init, got {} and {}", self.lr_final, self.lr_init));
        }
        if self.steps == 0 || self.warmup >= self.steps {
            return fail(format!("warmup {} must be below total steps {}", self.warmup, self.steps));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return fail("batch_size and log_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.clip_norm <= 0.0 || self.weight_decay < 0.0 {
            return fail("clip_norm must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based count of completed warmup steps):
/// linear from 0 to `lr_init` over `warmup`, then cosine to `lr_final` at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup {
        return cfg.lr_init * step as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f64;
    let progress = ((step - cfg.warmup) as f64 / span).min(1.0);
    cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Encoder inputs `(prefix, suffix)` for one sequence.
pub fn objective_inputs(objective: Objective, tokens: &[u32], sample: &MaskSample, mask_id: u32) -> Result<(Vec<u32>, Vec<u32>)> {
    let masked = apply_mask(tokens, &sample.blank_ids, mask_id)?;
    Ok(match objective {
        Objective::Car => (tokens.to_vec(), masked),
        Objective::Ac => (masked.clone(), masked),
    })
}

/// Mean cross-entropy over every blank, eligible position of a batch,
/// recorded on `tape`. Returns the loss and the number of positions.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_on_tape<F: Scalar>(
    model: &Model<F>,
    tape: &mut Tape<F>,
    bound: &Bound,
    objective: Objective,
    tokens: &[Vec<u32>],
    samples: &[MaskSample],
    eligible: Option<&[Vec<bool>]>,
    dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<(Var, usize)> {
    let len = tokens.first().map_or(0, Vec::len);
    if tokens.len() != samples.len() || tokens.iter().any(|s| s.len() != len) || samples.iter().any(|s| s.len != len) {
        return Err(Error::Shape("batch tokens and mask samples disagree".into()));
    }
    let ctx = ForwardCtx::new(model, len, tokens.len())?;
    let mut prefix = Vec::with_capacity(len * tokens.len());
    let mut suffix = Vec::with_capacity(len * tokens.len());
    let mut rows = Vec::new();
    for (b, (x, sample)) in tokens.iter().zip(samples).enumerate() {
        let (p, s) = objective_inputs(objective, x, sample, model.config.mask_token)?;
        prefix.extend(p);
        suffix.extend(s);
        for &t in &sample.blank_ids {
            if eligible.is_none_or(|e| e[b][t - 1]) {
                rows.push(b * len + t - 1);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Domain("no position to predict: every position is given".into()));
    }
    let logits = model.forward_on_tape(tape, bound, &ctx, &prefix, &suffix, dropout)?;
    let targets = tokens.concat();
    let loss = tape.cross_entropy(logits, &targets, &rows)?;
    Ok((loss, rows.len()))
}

fn single_loss<F: Scalar>(model: &Model<F>, objective: Objective, x: &[u32], context: &[usize]) -> Result<F> {
    let mut given = vec![false; x.len()];
    for &t in context {
        if t == 0 || t > x.len() {
            return Err(Error::Data(format!("context position {t} outside 1..={}", x.len())));
        }
        given[t - 1] = true;
    }
    let sample = MaskSample::from_mask(&given.iter().map(|g| !g).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let (loss, _) = batch_loss_on_tape(model, &mut tape, &bound, objective, &[x.to_vec()], &[sample], None, None)?;
    tape.value(loss).item()
}

/// Mean over `t` outside `context` of `-log p(x_t | x_C, x_{<t})`.
pub fn car_loss<F: Scalar>(model: &Model<F>, x: &[u32], context: &[usize]) -> Result<F> {
    single_loss(model, Objective::Car, x, context)
}

/// Mean over `t` outside `context` of `-log p(x_t | x_C)`.
pub fn ac_loss<F: Scalar>(model: &Model<F>, x: &[u32], context: &[usize]) -> Result<F> {
    single_loss(model, Objective::Ac, x, context)
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8, weight_decay: cfg.weight_decay }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<F>> = sizes.into_iter().map(|n| vec![F::zero(); n]).collect();
        Self { step: 0, v: m.clone(), m }
    }
}

/// One AdamW update with decoupled weight decay applied where `decay[i]`.
pub fn adamw_step<F: Scalar>(
    params: &mut [&mut [F]],
    grads: &[&[F]],
    decay: &[bool],
    state: &mut OptimizerState<F>,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(Error::Shape("optimizer state does not match parameter list".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    let (b1, b2) = (F::of(hp.beta1), F::of(hp.beta2));
    let (lr_f, eps) = (F::of(lr), F::of(hp.eps));
    let shrink = F::of(1.0 - lr * hp.weight_decay);
    let (c1, c2) = (F::of(1.0 / bc1), F::of(1.0 / bc2.sqrt()));
    for (i, p) in params.iter_mut().enumerate() {
        let (g, m, v) = (grads[i], &mut state.m[i], &mut state.v[i]);
        if g.len() != p.len() || m.len() != p.len() {
            return Err(Error::Shape(format!("gradient {i} does not match its parameter")));
        }
        for j in 0..p.len() {
            if decay[i] {
                p[j] *= shrink;
            }
            m[j] = b1 * m[j] + (F::one() - b1) * g[j];
            v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
            p[j] -= lr_f * (m[j] * c1) / ((v[j]).sqrt() * c2 + eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::of(max_norm / (norm + 1e-6));
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Model, optimizer state and the random streams for masks and dropout.
pub struct Trainer {
    pub config: TrainConfig,
    pub state: OptimizerState<f32>,
    pub step: usize,
    decay: Vec<bool>,
    mask_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let named = model.params.named();
        let decay = named.iter().map(|(_, kind, _)| *kind == SlotKind::Weight).collect();
        let state = OptimizerState::new(named.iter().map(|(_, _, t)| t.numel()));
        let mask_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Self { config, state, step: 0, decay, mask_rng, dropout_rng })
    }

    /// Draws masks, runs forward and backward, clips and updates.
    pub fn step(&mut self, model: &mut Model<f32>, batch: &TokenBatch) -> Result<TraceRecord> {
        let len = batch.tokens.first().map_or(0, Vec::len);
        let samples = batch
            .tokens
            .iter()
            .map(|_| self.config.mask.sample(len, &mut self.mask_rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let mut drop = DropoutCtx { rate: model.config.dropout, rng: &mut self.dropout_rng };
        let dropout = (model.config.dropout > 0.0).then_some(&mut drop);
        let (loss, _) = batch_loss_on_tape(
            model,
            &mut tape,
            &bound,
            self.config.objective,
            &batch.tokens,
            &samples,
            Some(&batch.eligible),
            dropout,
        )?;
        let value = f64::from(tape.value(loss).item()?);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value} at step {}", self.step + 1)));
        }
        let mut grads = tape.backward(loss)?;
        let mut flat: Vec<Vec<f32>> = Vec::new();
        for (_, _, &var) in bound.named() {
            flat.push(grads.take(var).unwrap_or_default());
        }
        for (g, (_, _, t)) in flat.iter_mut().zip(model.params.named()) {
            if g.is_empty() {
                g.resize(t.numel(), 0.0);
            }
        }
        clip_grad_norm(&mut flat, self.config.clip_norm);
        self.step += 1;
        let lr = lr_at(self.step, &self.config);
        let grad_refs: Vec<&[f32]> = flat.iter().map(Vec::as_slice).collect();
        let mut slots: Vec<&mut [f32]> = model.params.slots_mut().into_iter().map(Tensor::data_mut).collect();
        adamw_step(&mut slots, &grad_refs, &self.decay, &mut self.state, lr, &AdamW::from_config(&self.config))?;
        Ok(TraceRecord { step: self.step, loss: value, lr })
    }
}

/// Trains for `config.steps` steps (or until the early-stop threshold), calling
/// `on_step` after each update. Returns the per-step trace.
pub fn train_loop(
    model: &mut Model<f32>,
    batches: &mut dyn Iterator<Item = TokenBatch>,
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&TraceRecord, &Model<f32>) -> Result<()>,
) -> Result<Vec<TraceRecord>> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut trace = Vec::with_capacity(config.steps);
    while trainer.step < config.steps {
        let batch = batches.next().ok_or_else(|| Error::Data("batch iterator ran dry".into()))?;
        let rec = trainer.step(model, &batch)?;
        trace.push(rec);
        on_step(&rec, model)?;
        if let Some(threshold) = config.stop_below {
            if trailing_mean(&trace, 10).is_some_and(|m| m < threshold) {
                break;
            }
        }
    }
    Ok(trace)
}

/// Mean loss of the last `n` records, once there are `n`.
pub fn trailing_mean(trace: &[TraceRecord], n: usize) -> Option<f64> {
    (trace.len() >= n && n > 0).then(|| trace[trace.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64)
}

/// CSV with header `step,loss,lr`.
pub fn trace_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    out
}
