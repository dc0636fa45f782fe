use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Attention, EncoderStack, FeedForward, Linear, Model, Norm, Params};
use crate::error::{Error, Result};
use crate::masks::{LayoutSet, MaskLayout, Side};
use crate::tensor::{RotaryTable, Scalar, Tape, Tensor, Var};

/// Tape variables bound to a model's parameters.
pub type Bound = Params<Var>;

/// Layouts, rotary table and row positions for a batch of equal-length sequences.
pub struct ForwardCtx<F> {
    pub len: usize,
    pub batch: usize,
    enc_prefix: Vec<Arc<MaskLayout>>,
    enc_suffix: Vec<Arc<MaskLayout>>,
    dec_prefix: Vec<Arc<MaskLayout>>,
    dec_suffix: Vec<Arc<MaskLayout>>,
    rotary: Arc<RotaryTable<F>>,
    positions: Vec<usize>,
}

impl<F: Scalar> ForwardCtx<F> {
    pub fn new(model: &Model<F>, len: usize, batch: usize) -> Result<Self> {
        let cfg = &model.config;
        if len == 0 || len > cfg.max_len {
            return Err(Error::Data(format!("sequence length {len} outside 1..={}", cfg.max_len)));
        }
        let set = LayoutSet::new(cfg.layers, len, cfg.n_max)?;
        let arc = |v: Vec<MaskLayout>| v.into_iter().map(Arc::new).collect();
        Ok(Self {
            len,
            batch,
            enc_prefix: arc(set.encoder_prefix),
            enc_suffix: arc(set.encoder_suffix),
            dec_prefix: arc(set.decoder_prefix),
            dec_suffix: arc(set.decoder_suffix),
            rotary: Arc::new(RotaryTable::new(cfg.head_dim(), len)?),
            positions: (0..batch * len).map(|i| i % len + 1).collect(),
        })
    }

    fn encoder_layouts(&self, side: Side) -> &[Arc<MaskLayout>] {
        match side {
            Side::Prefix => &self.enc_prefix,
            Side::Suffix => &self.enc_suffix,
        }
    }
}

/// Training-time dropout: rate plus the stream that draws keep masks.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn dropout<F: Scalar>(tape: &mut Tape<F>, x: Var, drop: &mut Option<&mut DropoutCtx<'_>>) -> Result<Var> {
    let Some(ctx) = drop.as_deref_mut() else { return Ok(x) };
    if ctx.rate <= 0.0 {
        return Ok(x);
    }
    let keep = F::of(1.0 / (1.0 - ctx.rate));
    let n = tape.value(x).numel();
    let factors = (0..n).map(|_| if ctx.rng.random::<f64>() < ctx.rate { F::zero() } else { keep }).collect();
    tape.mul_const(x, factors)
}

fn linear<F: Scalar>(tape: &mut Tape<F>, p: &Linear<Var>, x: Var) -> Result<Var> {
    tape.linear(x, p.weight, p.bias)
}

fn norm<F: Scalar>(tape: &mut Tape<F>, p: &Norm<Var>, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.gain, p.bias)
}

fn feed_forward<F: Scalar>(tape: &mut Tape<F>, p: &FeedForward<Var>, x: Var) -> Result<Var> {
    let h = linear(tape, &p.up, x)?;
    let h = tape.gelu(h)?;
    linear(tape, &p.down, h)
}

fn keys_values<F: Scalar>(tape: &mut Tape<F>, p: &Attention<Var>, memory: Var, ctx: &ForwardCtx<F>) -> Result<(Var, Var)> {
    let k = linear(tape, &p.key, memory)?;
    let k = tape.rotary(k, &ctx.positions, &ctx.rotary)?;
    let v = linear(tape, &p.value, memory)?;
    Ok((k, v))
}

fn query<F: Scalar>(tape: &mut Tape<F>, p: &Attention<Var>, x: Var, ctx: &ForwardCtx<F>) -> Result<Var> {
    let q = linear(tape, &p.query, x)?;
    tape.rotary(q, &ctx.positions, &ctx.rotary)
}

impl<F: Scalar> Model<F> {
    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.map(|t| tape.leaf(t.clone(), trainable))
    }

    fn check_tokens(&self, tokens: &[u32], ctx: &ForwardCtx<F>) -> Result<()> {
        if tokens.len() != ctx.len * ctx.batch {
            return Err(Error::Shape(format!("{} tokens for batch {} of length {}", tokens.len(), ctx.batch, ctx.len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Runs one encoder (prefix or suffix masks, shared weights). Returns the
    /// `L + 1` feature variables, embeddings first.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        ctx: &ForwardCtx<F>,
        tokens: &[u32],
        side: Side,
        mut drop: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Vec<Var>> {
        self.check_tokens(tokens, ctx)?;
        let mut h = tape.embedding(bound.embedding, tokens)?;
        let mut stack = vec![h];
        for (block, layout) in bound.encoder.iter().zip(ctx.encoder_layouts(side)) {
            let x = norm(tape, &block.attn_norm, h)?;
            let q = query(tape, &block.attn, x, ctx)?;
            let (k, v) = keys_values(tape, &block.attn, x, ctx)?;
            let a = tape.attention(q, k, v, layout, ctx.batch, self.config.heads)?;
            let a = linear(tape, &block.attn.output, a)?;
            let a = dropout(tape, a, &mut drop)?;
            h = tape.add(h, a)?;
            let x = norm(tape, &block.ffn_norm, h)?;
            let f = feed_forward(tape, &block.ffn, x)?;
            let f = dropout(tape, f, &mut drop)?;
            h = tape.add(h, f)?;
            stack.push(h);
        }
        Ok(stack)
    }

    /// Decoder over both stacks; returns logits `[batch*len x V]`.
    ///
    /// Decoder layer `l` reads encoder layer `L - l + 1` of each stack.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        ctx: &ForwardCtx<F>,
        prefix: &[Var],
        suffix: &[Var],
        mut drop: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        let layers = self.config.layers;
        if prefix.len() != layers + 1 || suffix.len() != layers + 1 {
            return Err(Error::Shape(format!(
                "decoder needs {} encoder layers per stack, got {} and {}",
                layers + 1,
                prefix.len(),
                suffix.len()
            )));
        }
        let rows = ctx.batch * ctx.len;
        let mut h = tape.constant(Tensor::zeros(&[rows, self.config.d_model]));
        for (i, block) in bound.decoder.iter().enumerate() {
            let source = layers - i;
            let x = norm(tape, &block.query_norm, h)?;
            let q = query(tape, &block.attn, x, ctx)?;
            let mp = norm(tape, &block.memory_norm, prefix[source])?;
            let (kp, vp) = keys_values(tape, &block.attn, mp, ctx)?;
            let ap = tape.attention(q, kp, vp, &ctx.dec_prefix[i], ctx.batch, self.config.heads)?;
            let ms = norm(tape, &block.memory_norm, suffix[source])?;
            let (ks, vs) = keys_values(tape, &block.attn, ms, ctx)?;
            let a_s = tape.attention(q, ks, vs, &ctx.dec_suffix[i], ctx.batch, self.config.heads)?;
            let a = tape.add(ap, a_s)?;
            let a = linear(tape, &block.attn.output, a)?;
            let a = dropout(tape, a, &mut drop)?;
            h = tape.add(h, a)?;
            let x = norm(tape, &block.ffn_norm, h)?;
            let f = feed_forward(tape, &block.ffn, x)?;
            let f = dropout(tape, f, &mut drop)?;
            h = tape.add(h, f)?;
        }
        let x = norm(tape, &bound.final_norm, h)?;
        linear(tape, &bound.head, x)
    }

    /// Both encoders and the decoder on one tape; logits `[batch*len x V]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        ctx: &ForwardCtx<F>,
        prefix_tokens: &[u32],
        suffix_tokens: &[u32],
        mut drop: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        let prefix = self.encode_on_tape(tape, bound, ctx, prefix_tokens, Side::Prefix, drop.as_deref_mut())?;
        let suffix = self.encode_on_tape(tape, bound, ctx, suffix_tokens, Side::Suffix, drop.as_deref_mut())?;
        self.decode_on_tape(tape, bound, ctx, &prefix, &suffix, drop)
    }

    /// Features of every layer of one encoder for a single sequence.
    pub fn encoder_forward(&self, tokens: &[u32], side: Side) -> Result<EncoderStack<F>> {
        let ctx = ForwardCtx::new(self, tokens.len(), 1)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let vars = self.encode_on_tape(&mut tape, &bound, &ctx, tokens, side, None)?;
        Ok(EncoderStack { side, layers: vars.into_iter().map(|v| tape.value(v).clone()).collect() })
    }

    /// Decoder logits `[T x V]` from precomputed encoder stacks.
    pub fn decoder_forward(&self, prefix: &EncoderStack<F>, suffix: &EncoderStack<F>) -> Result<Tensor<F>> {
        if prefix.side != Side::Prefix || suffix.side != Side::Suffix {
            return Err(Error::Domain("decoder stacks passed in the wrong order".into()));
        }
        let len = prefix.layers.first().map_or(0, Tensor::rows);
        if suffix.layers.iter().chain(&prefix.layers).any(|t| t.rows() != len) {
            return Err(Error::Shape("encoder stacks disagree on sequence length".into()));
        }
        let ctx = ForwardCtx::new(self, len, 1)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let p: Vec<Var> = prefix.layers.iter().map(|t| tape.constant(t.clone())).collect();
        let s: Vec<Var> = suffix.layers.iter().map(|t| tape.constant(t.clone())).collect();
        let logits = self.decode_on_tape(&mut tape, &bound, &ctx, &p, &s, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Logits `[T x V]` for one sequence: prefix-encoder input and
    /// suffix-encoder input must have equal length.
    pub fn forward(&self, prefix_tokens: &[u32], suffix_tokens: &[u32]) -> Result<Tensor<F>> {
        if prefix_tokens.len() != suffix_tokens.len() {
            return Err(Error::Shape(format!(
                "prefix input has {} tokens, suffix input {}",
                prefix_tokens.len(),
                suffix_tokens.len()
            )));
        }
        self.forward_batch(&[prefix_tokens.to_vec()], &[suffix_tokens.to_vec()])
    }

    /// Logits `[batch*T x V]` for equal-length sequences.
    pub fn forward_batch(&self, prefix: &[Vec<u32>], suffix: &[Vec<u32>]) -> Result<Tensor<F>> {
        let len = prefix.first().map_or(0, Vec::len);
        if prefix.len() != suffix.len() || prefix.iter().chain(suffix).any(|s| s.len() != len) {
            return Err(Error::Shape("batch sequences must share one length".into()));
        }
        let ctx = ForwardCtx::new(self, len, prefix.len())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let logits = self.forward_on_tape(&mut tape, &bound, &ctx, &prefix.concat(), &suffix.concat(), None)?;
        Ok(tape.value(logits).clone())
    }
}
