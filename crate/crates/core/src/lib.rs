//! Tracformer: a non-autoregressive sequence model built from multi-scope
//! sparse prefix and suffix encoders and a cross-attention-only decoder.
//!
//! The crate covers the model and its own autodiff tape, CAR and AC
//! training, KV-cached decoding, perplexity and order-consistency
//! evaluation, a conditional NELBO for absorbing-mask diffusion denoisers,
//! character-level data handling and the `tracformer` command line.

pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod infer;
pub mod joint;
pub mod masking;
pub mod masks;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Maps `f` over `0..n` on up to `threads` workers and returns results in
/// index order, so the output never depends on the thread count.
pub fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}
