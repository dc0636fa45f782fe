//! Parameter layout, generic over the slot type so the same structure holds
//! tensors, tape variables or optimizer moments.

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

/// One encoder layer. The prefix and suffix encoders both run these weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub attn_norm: Norm<T>,
    pub attn: Attention<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: FeedForward<T>,
}

/// One cross-attention-only decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T> {
    pub query_norm: Norm<T>,
    pub memory_norm: Norm<T>,
    pub attn: Attention<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub embedding: T,
    pub encoder: Vec<EncoderBlock<T>>,
    pub decoder: Vec<DecoderBlock<T>>,
    pub final_norm: Norm<T>,
    pub head: Linear<T>,
}

/// Role of a parameter slot, used by initialization and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Weight,
    Bias,
    Gain,
}

/// Structural traversal shared by every parameter container.
pub trait Slots<T> {
    type Mapped<U>;

    fn map_slots<U>(&self, f: &mut dyn FnMut(&T, SlotKind) -> U) -> Self::Mapped<U>;
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, SlotKind, &'a T)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>);
}

impl<T> Slots<T> for Linear<T> {
    type Mapped<U> = Linear<U>;

    fn map_slots<U>(&self, f: &mut dyn FnMut(&T, SlotKind) -> U) -> Linear<U> {
        Linear { weight: f(&self.weight, SlotKind::Weight), bias: f(&self.bias, SlotKind::Bias) }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, SlotKind, &'a T)>) {
        out.push((format!("{name}.weight"), SlotKind::Weight, &self.weight));
        out.push((format!("{name}.bias"), SlotKind::Bias, &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl<T> Slots<T> for Norm<T> {
    type Mapped<U> = Norm<U>;

    fn map_slots<U>(&self, f: &mut dyn FnMut(&T, SlotKind) -> U) -> Norm<U> {
        Norm { gain: f(&self.gain, SlotKind::Gain), bias: f(&self.bias, SlotKind::Bias) }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, SlotKind, &'a T)>) {
        out.push((format!("{name}.gain"), SlotKind::Gain, &self.gain));
        out.push((format!("{name}.bias"), SlotKind::Bias, &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

impl<T> Slots<T> for Attention<T> {
    type Mapped<U> = Attention<U>;

    fn map_slots<U>(&self, f: &mut dyn FnMut(&T, SlotKind) -> U) -> Attention<U> {
        Attention {
            query: self.query.map_slots(f),
            key: self.key.map_slots(f),
            value: self.value.map_slots(f),
            output: self.output.map_slots(f),
        }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, SlotKind, &'a T)>) {
        self.query.visit(&format!("{name}.query"), out);
        self.key.visit(&format!("{name}.key"), out);
        self.value.visit(&format!("{name}.value"), out);
        self.output.visit(&format!("{name}.output"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.query.visit_mut(out);
        self.key.visit_mut(out);
        self.value.visit_mut(out);
        self.output.visit_mut(out);
    }
}

impl<T> Slots<T> for FeedForward<T> {
    type Mapped<U> = FeedForward<U>;

    fn map_slots<U>(&self, f: &mut dyn FnMut(&T, SlotKind) -> U) -> FeedForward<U> {
        FeedForward { up: self.up.map_slots(f), down: self.down.map_slots(f) }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, SlotKind, &'a T)>) {
        self.up.visit(&format!("{name}.up"), out);
        self.down.visit(&format!("{name}.down"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.up.visit_mut(out);
        self.down.visit_mut(out);
    }
}

impl<T> Slots<T> for EncoderBlock<T> {
    type Mapped<U> = EncoderBlock<U>;

    fn map_slots<U>(&self, f: &mut dyn FnMut(&T, SlotKind) -> U) -> EncoderBlock<U> {
        EncoderBlock {
            attn_norm: self.attn_norm.map_slots(f),
            attn: self.attn.map_slots(f),
            ffn_norm: self.ffn_norm.map_slots(f),
            ffn: self.ffn.map_slots(f),
        }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, SlotKind, &'a T)>) {
        self.attn_norm.visit(&format!("{name}.attn_norm"), out);
        self.attn.visit(&format!("{name}.attn"), out);
        self.ffn_norm.visit(&format!("{name}.ffn_norm"), out);
        self.ffn.visit(&format!("{name}.ffn"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.attn_norm.visit_mut(out);
        self.attn.visit_mut(out);
        self.ffn_norm.visit_mut(out);
        self.ffn.visit_mut(out);
    }
}

impl<T> Slots<T> for DecoderBlock<T> {
    type Mapped<U> = DecoderBlock<U>;

    fn map_slots<U>(&self, f: &mut dyn FnMut(&T, SlotKind) -> U) -> DecoderBlock<U> {
        DecoderBlock {
            query_norm: self.query_norm.map_slots(f),
            memory_norm: self.memory_norm.map_slots(f),
            attn: self.attn.map_slots(f),
            ffn_norm: self.ffn_norm.map_slots(f),
            ffn: self.ffn.map_slots(f),
        }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, SlotKind, &'a T)>) {
        self.query_norm.visit(&format!("{name}.query_norm"), out);
        self.memory_norm.visit(&format!("{name}.memory_norm"), out);
        self.attn.visit(&format!("{name}.attn"), out);
        self.ffn_norm.visit(&format!("{name}.ffn_norm"), out);
        self.ffn.visit(&format!("{name}.ffn"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.query_norm.visit_mut(out);
        self.memory_norm.visit_mut(out);
        self.attn.visit_mut(out);
        self.ffn_norm.visit_mut(out);
        self.ffn.visit_mut(out);
    }
}

impl<T> Slots<T> for Params<T> {
    type Mapped<U> = Params<U>;

    fn map_slots<U>(&self, f: &mut dyn FnMut(&T, SlotKind) -> U) -> Params<U> {
        Params {
            embedding: f(&self.embedding, SlotKind::Weight),
            encoder: self.encoder.iter().map(|b| b.map_slots(f)).collect(),
            decoder: self.decoder.iter().map(|b| b.map_slots(f)).collect(),
            final_norm: self.final_norm.map_slots(f),
            head: self.head.map_slots(f),
        }
    }

    fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, SlotKind, &'a T)>) {
        let prefix = if name.is_empty() { String::new() } else { format!("{name}.") };
        out.push((format!("{prefix}embedding"), SlotKind::Weight, &self.embedding));
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("{prefix}encoder.{i}"), out);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&format!("{prefix}decoder.{i}"), out);
        }
        self.final_norm.visit(&format!("{prefix}final_norm"), out);
        self.head.visit(&format!("{prefix}head"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.embedding);
        for b in &mut self.encoder {
            b.visit_mut(out);
        }
        for b in &mut self.decoder {
            b.visit_mut(out);
        }
        self.final_norm.visit_mut(out);
        self.head.visit_mut(out);
    }
}

impl<T> Params<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        self.map_slots(&mut |t, _| f(t))
    }

    /// All slots in canonical order with their dotted names.
    pub fn named(&self) -> Vec<(String, SlotKind, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    /// All slots, mutably, in the same order as [`Params::named`].
    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }
}
