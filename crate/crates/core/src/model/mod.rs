//! The network: a multi-scope prefix encoder and its suffix mirror (one set
//! of weights), and a decoder that only cross-attends into both stacks.

mod checkpoint;
mod forward;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{min_layers, Side};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_FORMAT};
pub use forward::{Bound, DropoutCtx, ForwardCtx};
pub use params::{Attention, DecoderBlock, EncoderBlock, FeedForward, Linear, Norm, Params, SlotKind, Slots};

/// Standard deviation of the normal initializer for weight matrices.
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Longest sequence the model accepts.
    pub max_len: usize,
    /// Encoder layers; the decoder has the same number.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Cap on attended keys per query in a sparse encoder layer.
    pub n_max: usize,
    pub vocab_size: usize,
    pub mask_token: u32,
    #[serde(default)]
    pub dropout: f64,
    /// Permit fewer layers than `ceil(log2 max_len)`.
    #[serde(default)]
    pub allow_shallow: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: `L=5, d=128, 4 heads, T=64, N_max=8`.
    ///
    /// Five layers is one short of `ceil(log2 64)`, so the preset sets
    /// `allow_shallow`; the decoder's stride masks still tile the whole context.
    pub fn desk(vocab_size: usize, mask_token: u32) -> Self {
        Self {
            max_len: 64,
            layers: 5,
            d_model: 128,
            heads: 4,
            n_max: 8,
            vocab_size,
            mask_token,
            dropout: 0.0,
            allow_shallow: true,
        }
    }

    /// The full-size small-experiment architecture (1024 tokens, 10 layers, d=576).
    pub fn reference_small(vocab_size: usize, mask_token: u32) -> Self {
        Self {
            max_len: 1024,
            layers: 10,
            d_model: 576,
            heads: 9,
            n_max: 16,
            vocab_size,
            mask_token,
            dropout: 0.1,
            allow_shallow: false,
        }
    }

    /// The large-scale architecture (`N_max = 32`, no dropout).
    pub fn reference_large(vocab_size: usize, mask_token: u32) -> Self {
        Self { n_max: 32, dropout: 0.0, ..Self::reference_small(vocab_size, mask_token) }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.max_len == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return fail("layers, max_len, d_model and vocab_size must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!("head dimension {} must be even for rotary pairs", self.head_dim()));
        }
        if self.n_max < 2 {
            return fail(format!("n_max must be at least 2, got {}", self.n_max));
        }
        if self.mask_token as usize >= self.vocab_size {
            return fail(format!("mask token {} outside vocabulary of {}", self.mask_token, self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let needed = min_layers(self.max_len);
        if self.layers < needed && !self.allow_shallow {
            return fail(format!(
                "{} layers cannot give any encoder feature a full-length scope at max_len {} (need {needed}); set allow_shallow to override",
                self.layers, self.max_len
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    /// `2 V d + V + L (24 d^2 + 28 d) + 2 d`.
    pub fn parameter_count(&self) -> usize {
        let (v, d, l) = (self.vocab_size, self.d_model, self.layers);
        2 * v * d + v + l * (24 * d * d + 28 * d) + 2 * d
    }
}

/// Per-layer features of one encoder: index 0 is the token embedding,
/// index `l` the output of layer `l`. Each entry is `[T x d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack<F> {
    pub side: Side,
    pub layers: Vec<Tensor<F>>,
}

/// Configuration plus the full parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Params<Tensor<F>>,
}

type Maker<'a, F> = &'a mut dyn FnMut(&[usize], SlotKind) -> Tensor<F>;

fn linear<F>(make: Maker<'_, F>, input: usize, output: usize) -> Linear<Tensor<F>> {
    Linear { weight: make(&[input, output], SlotKind::Weight), bias: make(&[output], SlotKind::Bias) }
}

fn norm<F>(make: Maker<'_, F>, d: usize) -> Norm<Tensor<F>> {
    Norm { gain: make(&[d], SlotKind::Gain), bias: make(&[d], SlotKind::Bias) }
}

fn attention<F>(make: Maker<'_, F>, d: usize) -> Attention<Tensor<F>> {
    Attention {
        query: linear(make, d, d),
        key: linear(make, d, d),
        value: linear(make, d, d),
        output: linear(make, d, d),
    }
}

fn feed_forward<F>(make: Maker<'_, F>, d: usize) -> FeedForward<Tensor<F>> {
    FeedForward { up: linear(make, d, 4 * d), down: linear(make, 4 * d, d) }
}

/// Builds every parameter in canonical order, so seeded initialization is
/// reproducible.
fn shaped<F>(config: &ModelConfig, make: Maker<'_, F>) -> Params<Tensor<F>> {
    let (d, v) = (config.d_model, config.vocab_size);
    let embedding = make(&[v, d], SlotKind::Weight);
    let encoder = (0..config.layers)
        .map(|_| EncoderBlock {
            attn_norm: norm(make, d),
            attn: attention(make, d),
            ffn_norm: norm(make, d),
            ffn: feed_forward(make, d),
        })
        .collect();
    let decoder = (0..config.layers)
        .map(|_| DecoderBlock {
            query_norm: norm(make, d),
            memory_norm: norm(make, d),
            attn: attention(make, d),
            ffn_norm: norm(make, d),
            ffn: feed_forward(make, d),
        })
        .collect();
    let final_norm = norm(make, d);
    let head = linear(make, d, v);
    Params { embedding, encoder, decoder, final_norm, head }
}

impl<F: Scalar> Model<F> {
    /// All-zero parameters of the right shapes (checkpoint loading fills them).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = shaped(&config, &mut |shape, _| Tensor::zeros(shape));
        Ok(Self { config, params })
    }

    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = shaped(&config, &mut |shape, kind| match kind {
            SlotKind::Weight => Tensor::from_fn(shape, |_| F::of(normal.sample(&mut rng))),
            SlotKind::Bias => Tensor::zeros(shape),
            SlotKind::Gain => Tensor::full(shape, F::one()),
        });
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.named().iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Converts every parameter to another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model { config: self.config.clone(), params: self.params.map(|t| t.cast()) }
    }
}

/// Builds a model with seeded initialization.
pub fn init_parameters<F: Scalar>(config: ModelConfig, seed: u64) -> Result<Model<F>> {
    Model::init(config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            max_len: 8,
            layers: 3,
            d_model: 32,
            heads: 4,
            n_max: 4,
            vocab_size: 64,
            mask_token: 1,
            dropout: 0.0,
            allow_shallow: false,
        }
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let m = Model::<f32>::init(tiny(), 0).unwrap();
        assert_eq!(m.parameter_count(), 80_640);
        assert_eq!(tiny().parameter_count(), 80_640);
        let desk = ModelConfig::desk(40, 1);
        assert_eq!(Model::<f32>::zeros(desk.clone()).unwrap().parameter_count(), desk.parameter_count());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::<f32>::init(tiny(), 3).unwrap();
        let b = Model::<f32>::init(tiny(), 3).unwrap();
        let c = Model::<f32>::init(tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params.embedding, c.params.embedding);
        assert!(a.params.encoder[0].attn.query.bias.data().iter().all(|&x| x == 0.0));
        assert!(a.params.final_norm.gain.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.heads = 16; // head dim 2 is fine
        assert!(c.validate().is_ok());
        c.d_model = 48; // head dim 3 is odd
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.layers = 2;
        assert!(c.validate().is_err());
        c.allow_shallow = true;
        assert!(c.validate().is_ok());
        let mut c = tiny();
        c.mask_token = 64;
        assert!(c.validate().is_err());
        assert!(ModelConfig::reference_small(50257, 50256).validate().is_ok());
        assert!(ModelConfig::desk(40, 1).validate().is_ok());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let json = r#"{"max_len":8,"layers":3,"d_model":32,"heads":4,"n_max":4,"vocab_size":64,"mask_token":1,"bogus":1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }
}
