//! Attention-mask families and scope bookkeeping.
//!
//! Positions are 1-indexed everywhere in this module: a sequence of length
//! `T` has positions `1..=T`. Layouts store, for every query position, the
//! sorted list of key positions it may attend to. A row may be empty; the
//! attention kernels turn an empty row into a zero output.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Sparse realization of a `T x T` attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskLayout {
    len: usize,
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl MaskLayout {
    /// Builds a layout from per-row key lists. Rows are sorted and
    /// deduplicated; out-of-range keys are rejected.
    pub fn from_rows(len: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if rows.len() != len {
            return Err(Error::Shape(format!("layout has {} rows for length {len}", rows.len())));
        }
        let mut offsets = Vec::with_capacity(len + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&bad) = row.iter().find(|&&k| k == 0 || k > len) {
                return Err(Error::Domain(format!("row {} lists key {bad} outside 1..={len}", i + 1)));
            }
            keys.extend(row);
            offsets.push(keys.len());
        }
        Ok(Self { len, offsets, keys })
    }

    fn from_fn(len: usize, mut row: impl FnMut(usize) -> Vec<usize>) -> Self {
        let rows = (1..=len).map(&mut row).collect();
        Self::from_rows(len, rows).expect("generated rows are in range")
    }

    /// Sequence length `T`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Keys attended by query position `t` (1-indexed).
    pub fn row(&self, t: usize) -> &[usize] {
        &self.keys[self.offsets[t - 1]..self.offsets[t]]
    }

    /// Offset of row `t` (1-indexed) into the flattened key list.
    pub fn row_offset(&self, t: usize) -> usize {
        self.offsets[t - 1]
    }

    /// Total number of attended `(t, t')` pairs.
    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[usize])> + '_ {
        (1..=self.len).map(move |t| (t, self.row(t)))
    }
}

/// Per-position scope sets `phi_t` for one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopeSet {
    sets: Vec<BTreeSet<usize>>,
}

impl ScopeSet {
    /// Layer-0 scopes: every position sees only itself.
    pub fn identity(len: usize) -> Self {
        Self { sets: (1..=len).map(|t| BTreeSet::from([t])).collect() }
    }

    pub fn get(&self, t: usize) -> &BTreeSet<usize> {
        &self.sets[t - 1]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

fn check_position(t: usize, len: usize) -> Result<()> {
    if t == 0 || t > len {
        return Err(Error::Domain(format!("position {t} outside 1..={len}")));
    }
    Ok(())
}

fn window(layer: usize) -> usize {
    1usize.checked_shl(layer as u32).unwrap_or(usize::MAX)
}

/// Prefix scope: positions at distance `< 2^layer` to the left of `t`, `t` included.
pub fn prefix_scope(t: usize, layer: usize, len: usize) -> Result<BTreeSet<usize>> {
    check_position(t, len)?;
    let lo = t.saturating_sub(window(layer).saturating_sub(1)).max(1);
    Ok((lo..=t).collect())
}

/// Suffix scope: positions at distance `< 2^layer` to the right of `t`, `t` included.
pub fn suffix_scope(t: usize, layer: usize, len: usize) -> Result<BTreeSet<usize>> {
    check_position(t, len)?;
    let hi = t.saturating_add(window(layer) - 1).min(len);
    Ok((t..=hi).collect())
}

/// Points `round(a + k (b - a) / (n - 1))`, `k = 0..n`, rounded half away
/// from zero on the real-valued point.
fn linear_points(a: i64, b: i64, n: usize) -> Vec<i64> {
    let step = (b - a) as f64 / (n - 1) as f64;
    let mut pts: Vec<i64> = (0..n).map(|k| (a as f64 + k as f64 * step).round() as i64).collect();
    pts.dedup();
    pts
}

fn check_nmax(n_max: usize) -> Result<()> {
    if n_max < 2 {
        return Err(Error::Config(format!("n_max must be at least 2, got {n_max}")));
    }
    Ok(())
}

/// Which of the two mirrored encoders a layout belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Prefix,
    Suffix,
}

fn sparse_encoder_mask(side: Side, layer: usize, len: usize, n_max: usize) -> Result<MaskLayout> {
    check_nmax(n_max)?;
    if layer == 0 {
        return Err(Error::Domain("encoder mask layers start at 1".into()));
    }
    let half = window(layer - 1);
    let in_range = |p: i64| p >= 1 && p <= len as i64;
    Ok(MaskLayout::from_fn(len, |t| {
        let t = t as i64;
        let (a, b) = match side {
            Side::Prefix => (t - half as i64, t),
            Side::Suffix => (t, t.saturating_add(half as i64)),
        };
        if half < n_max {
            (a..=b).filter(|&p| in_range(p)).map(|p| p as usize).collect()
        } else {
            linear_points(a, b, n_max).into_iter().filter(|&p| in_range(p)).map(|p| p as usize).collect()
        }
    }))
}

/// Sparse self-attention layout of prefix-encoder layer `layer` (>= 1).
///
/// Windows of at most `n_max` positions are kept dense; wider windows are
/// replaced by `n_max` linearly spaced points that always include both ends.
pub fn sparse_prefix_mask(layer: usize, len: usize, n_max: usize) -> Result<MaskLayout> {
    sparse_encoder_mask(Side::Prefix, layer, len, n_max)
}

/// Mirror image of [`sparse_prefix_mask`] for the suffix encoder.
pub fn sparse_suffix_mask(layer: usize, len: usize, n_max: usize) -> Result<MaskLayout> {
    sparse_encoder_mask(Side::Suffix, layer, len, n_max)
}

/// Dense multi-scope window: row `t` attends `t - 2^(l-1) ..= t`.
pub fn dense_prefix_mask(layer: usize, len: usize) -> Result<MaskLayout> {
    if layer == 0 {
        return Err(Error::Domain("encoder mask layers start at 1".into()));
    }
    let half = window(layer - 1);
    Ok(MaskLayout::from_fn(len, |t| (t.saturating_sub(half).max(1)..=t).collect()))
}

/// Dense mirror window: row `t` attends `t ..= t + 2^(l-1)`.
pub fn dense_suffix_mask(layer: usize, len: usize) -> Result<MaskLayout> {
    if layer == 0 {
        return Err(Error::Domain("encoder mask layers start at 1".into()));
    }
    let half = window(layer - 1);
    Ok(MaskLayout::from_fn(len, |t| (t..=t.saturating_add(half).min(len)).collect()))
}

/// Standard causal mask `t' <= t`.
pub fn causal_mask(len: usize) -> MaskLayout {
    MaskLayout::from_fn(len, |t| (1..=t).collect())
}

fn decoder_stride(layer: usize, layers: usize) -> Result<usize> {
    if layer == 0 || layer > layers {
        return Err(Error::Domain(format!("decoder layer {layer} outside 1..={layers}")));
    }
    Ok(window(layers - layer + 1))
}

/// Cross-attention layout from decoder layer `layer` into the prefix stack:
/// `t' < t` and `t' = t - 1 (mod 2^(L - l + 1))`.
pub fn decoder_prefix_mask(layer: usize, layers: usize, len: usize) -> Result<MaskLayout> {
    let stride = decoder_stride(layer, layers)?;
    Ok(MaskLayout::from_fn(len, |t| {
        if t < 2 {
            return Vec::new();
        }
        let mut row: Vec<usize> = (1..t).rev().step_by(stride).collect();
        row.reverse();
        row
    }))
}

/// Cross-attention layout from decoder layer `layer` into the suffix stack:
/// `t' > t` and `t' = t + 1 (mod 2^(L - l + 1))`.
pub fn decoder_suffix_mask(layer: usize, layers: usize, len: usize) -> Result<MaskLayout> {
    let stride = decoder_stride(layer, layers)?;
    Ok(MaskLayout::from_fn(len, |t| (t + 1..=len).step_by(stride).collect()))
}

/// Propagates scopes up a stack of layouts: `phi^0_t = {t}` and
/// `phi^l_t` is the union of `phi^(l-1)_t'` over the keys of row `t`.
///
/// Returns the scopes of every layer, index 0 being the identity.
pub fn receptive_field_oracle(layouts: &[MaskLayout]) -> Result<Vec<ScopeSet>> {
    let Some(first) = layouts.first() else {
        return Err(Error::Domain("at least one layout is required".into()));
    };
    let len = first.len();
    let mut out = vec![ScopeSet::identity(len)];
    for layout in layouts {
        if layout.len() != len {
            return Err(Error::Shape("layouts disagree on sequence length".into()));
        }
        let prev = out.last().expect("non-empty");
        let sets = (1..=len)
            .map(|t| layout.row(t).iter().flat_map(|&k| prev.get(k).iter().copied()).collect())
            .collect();
        out.push(ScopeSet { sets });
    }
    Ok(out)
}

/// Number of attended pairs in a layout.
pub fn mask_population(layout: &MaskLayout) -> usize {
    layout.nnz()
}

/// The layouts one forward pass needs for sequences of length `len`.
#[derive(Clone, Debug)]
pub struct LayoutSet {
    pub encoder_prefix: Vec<MaskLayout>,
    pub encoder_suffix: Vec<MaskLayout>,
    pub decoder_prefix: Vec<MaskLayout>,
    pub decoder_suffix: Vec<MaskLayout>,
}

impl LayoutSet {
    /// Index `l - 1` of each vector holds the layout of layer `l`.
    pub fn new(layers: usize, len: usize, n_max: usize) -> Result<Self> {
        let build = |f: &dyn Fn(usize) -> Result<MaskLayout>| (1..=layers).map(f).collect::<Result<Vec<_>>>();
        Ok(Self {
            encoder_prefix: build(&|l| sparse_prefix_mask(l, len, n_max))?,
            encoder_suffix: build(&|l| sparse_suffix_mask(l, len, n_max))?,
            decoder_prefix: build(&|l| decoder_prefix_mask(l, layers, len))?,
            decoder_suffix: build(&|l| decoder_suffix_mask(l, layers, len))?,
        })
    }

    pub fn encoder(&self, side: Side) -> &[MaskLayout] {
        match side {
            Side::Prefix => &self.encoder_prefix,
            Side::Suffix => &self.encoder_suffix,
        }
    }
}

/// Mask families selectable for dumping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    EncoderPrefix,
    EncoderSuffix,
    DecoderPrefix,
    DecoderSuffix,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" | "enc-prefix" => Ok(Self::EncoderPrefix),
            "suffix" | "enc-suffix" => Ok(Self::EncoderSuffix),
            "dec-prefix" => Ok(Self::DecoderPrefix),
            "dec-suffix" => Ok(Self::DecoderSuffix),
            other => Err(Error::Usage(format!("unknown mask kind `{other}`"))),
        }
    }
}

/// Renders the layouts of layers `1..=layers` as CSV rows `layer,t,t'`.
pub fn dump_csv(kind: MaskKind, layers: usize, len: usize, n_max: usize) -> Result<String> {
    let mut out = String::from("layer,t,t'\n");
    for l in 1..=layers {
        let layout = match kind {
            MaskKind::EncoderPrefix => sparse_prefix_mask(l, len, n_max)?,
            MaskKind::EncoderSuffix => sparse_suffix_mask(l, len, n_max)?,
            MaskKind::DecoderPrefix => decoder_prefix_mask(l, layers, len)?,
            MaskKind::DecoderSuffix => decoder_suffix_mask(l, layers, len)?,
        };
        for (t, row) in layout.rows() {
            for &k in row {
                writeln!(out, "{l},{t},{k}").expect("writing to a String");
            }
        }
    }
    Ok(out)
}

/// Smallest layer count whose widest encoder scope covers `len` positions.
pub fn min_layers(len: usize) -> usize {
    let mut layers = 0;
    while window(layers) < len {
        layers += 1;
    }
    layers
}
