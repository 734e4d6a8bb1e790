//! Self-attention encoder with relative position representations, tag
//! embedding injection, and the joint intent / slot heads.
//!
//! Utterances are packed row-wise: each occupies `len + 1` consecutive rows
//! (CLS first), so padding never enters the computation. Position-wise layers
//! run over the whole packed matrix and attention runs per segment.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::numerics::{xavier_init, AttentionShape, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub feed_forward_size: usize,
    pub relative_clip_distance: usize,
    /// Adds relative-offset embeddings to the values as well as the keys.
    pub relative_values: bool,
    pub dropout: f64,
    pub vocab_size: usize,
    pub num_tags: usize,
    pub num_intents: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn preset(name: &str) -> Result<(usize, usize, usize)> {
        match name {
            "atis" => Ok((2, 8, 64)),
            "snips" => Ok((4, 16, 96)),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Config with the given depth/heads/width and defaults elsewhere.
    pub fn new(layers: usize, heads: usize, hidden: usize, vocab: usize, tags: usize, intents: usize) -> Self {
        EncoderConfig {
            num_layers: layers,
            num_heads: heads,
            hidden_size: hidden,
            feed_forward_size: 4 * hidden,
            relative_clip_distance: 8,
            relative_values: true,
            dropout: 0.1,
            vocab_size: vocab,
            num_tags: tags,
            num_intents: intents,
            max_len: 128,
        }
    }

    pub fn atis(vocab: usize, tags: usize, intents: usize) -> Self {
        Self::new(2, 8, 64, vocab, tags, intents)
    }

    pub fn snips(vocab: usize, tags: usize, intents: usize) -> Self {
        Self::new(4, 16, 96, vocab, tags, intents)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail("hidden_size must be divisible by num_heads");
        }
        if self.relative_clip_distance < 1 {
            return fail("relative_clip_distance must be at least 1");
        }
        if self.num_layers == 0 || self.feed_forward_size == 0 {
            return fail("num_layers and feed_forward_size must be positive");
        }
        if self.vocab_size < 3 || self.num_tags == 0 || self.num_intents == 0 {
            return fail("vocabulary sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    wq: usize,
    bq: usize,
    wk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    rel_k: usize,
    rel_v: usize,
    ln1_gain: usize,
    ln1_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_gain: usize,
    ln2_bias: usize,
}

#[derive(Debug, Clone)]
struct ParamIds {
    token_emb: usize,
    tag_emb: usize,
    layers: Vec<LayerIds>,
    intent_w: usize,
    intent_b: usize,
    slot_w: usize,
    slot_b: usize,
    transitions: usize,
}

enum Init {
    Xavier,
    Zeros,
    Ones,
}

/// Parameter names, shapes and initializers, in store order.
fn layout(c: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, f, dh) = (c.hidden_size, c.feed_forward_size, c.head_dim());
    let buckets = 2 * c.relative_clip_distance + 1;
    let mut out = vec![
        ("embed.token".to_string(), vec![c.vocab_size, h], Init::Xavier),
        ("embed.tag".to_string(), vec![c.num_tags, h], Init::Xavier),
    ];
    for l in 0..c.num_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        for proj in ["q", "k", "v", "o"] {
            out.push((p(&format!("attn.{proj}.w")), vec![h, h], Init::Xavier));
            // keys carry no bias term
            if proj != "k" {
                out.push((p(&format!("attn.{proj}.b")), vec![h], Init::Zeros));
            }
        }
        out.push((p("attn.rel_k"), vec![buckets, dh], Init::Xavier));
        out.push((p("attn.rel_v"), vec![buckets, dh], Init::Xavier));
        out.push((p("ln1.gain"), vec![h], Init::Ones));
        out.push((p("ln1.bias"), vec![h], Init::Zeros));
        out.push((p("ffn.w1"), vec![h, f], Init::Xavier));
        out.push((p("ffn.b1"), vec![f], Init::Zeros));
        out.push((p("ffn.w2"), vec![f, h], Init::Xavier));
        out.push((p("ffn.b2"), vec![h], Init::Zeros));
        out.push((p("ln2.gain"), vec![h], Init::Ones));
        out.push((p("ln2.bias"), vec![h], Init::Zeros));
    }
    out.push(("head.intent.w".into(), vec![h, c.num_intents], Init::Xavier));
    out.push(("head.intent.b".into(), vec![c.num_intents], Init::Zeros));
    out.push(("head.slot.w".into(), vec![2 * h, c.num_tags], Init::Xavier));
    out.push(("head.slot.b".into(), vec![c.num_tags], Init::Zeros));
    out.push(("crf.transitions".into(), vec![c.num_tags + 2, c.num_tags + 2], Init::Zeros));
    out
}

fn resolve_ids<F: Real>(c: &EncoderConfig, store: &ParamStore<F>) -> Result<ParamIds> {
    for (name, shape, _) in layout(c) {
        match store.get(&name) {
            Some(p) if p.value.shape() == shape.as_slice() => {}
            Some(p) => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    p.value.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
        }
    }
    if store.len() != layout(c).len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, config expects {}",
            store.len(),
            layout(c).len()
        )));
    }
    let id = |n: &str| store.id(n).expect("checked above");
    let layers = (0..c.num_layers)
        .map(|l| {
            let p = |s: &str| id(&format!("layer{l}.{s}"));
            LayerIds {
                wq: p("attn.q.w"),
                bq: p("attn.q.b"),
                wk: p("attn.k.w"),
                wv: p("attn.v.w"),
                bv: p("attn.v.b"),
                wo: p("attn.o.w"),
                bo: p("attn.o.b"),
                rel_k: p("attn.rel_k"),
                rel_v: p("attn.rel_v"),
                ln1_gain: p("ln1.gain"),
                ln1_bias: p("ln1.bias"),
                w1: p("ffn.w1"),
                b1: p("ffn.b1"),
                w2: p("ffn.w2"),
                b2: p("ffn.b2"),
                ln2_gain: p("ln2.gain"),
                ln2_bias: p("ln2.bias"),
            }
        })
        .collect();
    Ok(ParamIds {
        token_emb: id("embed.token"),
        tag_emb: id("embed.tag"),
        layers,
        intent_w: id("head.intent.w"),
        intent_b: id("head.intent.b"),
        slot_w: id("head.slot.w"),
        slot_b: id("head.slot.b"),
        transitions: id("crf.transitions"),
    })
}

/// Utterances packed row-wise. Each segment covers CLS plus the tokens of one
/// utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInput {
    pub token_ids: Vec<usize>,
    pub tag_ids: Vec<usize>,
    /// `(first row, rows)` per utterance; rows = length + 1.
    pub segments: Vec<(usize, usize)>,
}

impl PackedInput {
    pub fn from_batch(batch: &Batch) -> Self {
        let mut p = PackedInput {
            token_ids: Vec::new(),
            tag_ids: Vec::new(),
            segments: Vec::with_capacity(batch.size()),
        };
        for r in 0..batch.size() {
            p.segments.push((p.token_ids.len(), batch.lengths[r] + 1));
            p.token_ids.extend_from_slice(batch.row_tokens(r));
            p.tag_ids.extend_from_slice(batch.row_tag_inputs(r));
        }
        p
    }

    /// One utterance: `token_ids` excludes CLS, tag inputs start as all `outside`.
    pub fn single(token_ids: &[usize], outside: usize) -> Self {
        let mut ids = Vec::with_capacity(token_ids.len() + 1);
        ids.push(crate::corpus::CLS);
        ids.extend_from_slice(token_ids);
        PackedInput {
            tag_ids: vec![outside; ids.len()],
            segments: vec![(0, ids.len())],
            token_ids: ids,
        }
    }

    pub fn num_utterances(&self) -> usize {
        self.segments.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.token_ids.len() - self.segments.len()
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.0).collect()
    }

    /// Packed rows of real tokens, utterance by utterance.
    pub fn token_rows(&self) -> Vec<usize> {
        self.segments.iter().flat_map(|&(s, n)| s + 1..s + n).collect()
    }

    /// For each real token, the CLS row of its utterance.
    pub fn cls_row_per_token(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|&(s, n)| std::iter::repeat_n(s, n - 1))
            .collect()
    }

    /// Segments over the token-only rows (as laid out in slot logits).
    pub fn token_segments(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.segments
            .iter()
            .map(|&(_, n)| {
                let seg = (start, n - 1);
                start += n - 1;
                seg
            })
            .collect()
    }

    /// Replaces tag inputs at token positions (CLS keeps its tag) with `tags`,
    /// given per real token in packed order.
    pub fn with_token_tags(&self, tags: &[usize]) -> Self {
        let mut out = self.clone();
        for (row, &t) in self.token_rows().iter().zip(tags) {
            out.tag_ids[*row] = t;
        }
        out
    }
}

/// Inverted dropout applied during training.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask<F: Real>(&mut self, n: usize) -> Vec<F> {
        let keep = 1.0 - self.rate;
        let scale = F::lit(1.0 / keep);
        (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { scale } else { F::zero() })
            .collect()
    }
}

/// Loss applied to slot logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotLoss {
    CrossEntropy,
    Crf,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub hidden: Var,
    /// `utterances × |I|`.
    pub intent_logits: Var,
    /// `tokens × |T|`, packed.
    pub slot_logits: Var,
}

/// Per-utterance logits, detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<F> {
    pub intent_logits: Vec<F>,
    /// `l × |T|` row-major.
    pub slot_logits: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub config: EncoderConfig,
    pub params: ParamStore<F>,
    ids: ParamIds,
}

impl<F: Real> Model<F> {
    /// Fresh model: Xavier-uniform weights and embeddings, zero biases, unit
    /// layer-norm gains, zero CRF transitions.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (i, (name, shape, init)) in layout(&config).into_iter().enumerate() {
            let t = match init {
                Init::Xavier => xavier_init(&shape, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?,
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => {
                    let mut t = Tensor::zeros(&shape);
                    t.fill(F::one());
                    t
                }
            };
            params.insert(&name, t)?;
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: EncoderConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let ids = resolve_ids(&config, &params)?;
        Ok(Model { config, params, ids })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    pub fn transitions_id(&self) -> usize {
        self.ids.transitions
    }

    fn check_ids(&self, input: &PackedInput) -> Result<()> {
        let c = &self.config;
        for (&t, what, size) in input
            .token_ids
            .iter()
            .map(|t| (t, "token", c.vocab_size))
            .chain(input.tag_ids.iter().map(|t| (t, "tag", c.num_tags)))
        {
            if t >= size {
                return Err(Error::IdOutOfRange { what, id: t, size });
            }
        }
        Ok(())
    }

    /// Token embedding plus tag embedding at every position. No absolute
    /// position signal is added.
    pub fn embed_inputs(&self, tape: &mut Tape<'_, F>, input: &PackedInput) -> Result<Var> {
        self.check_ids(input)?;
        let tok_table = tape.param(self.ids.token_emb);
        let tag_table = tape.param(self.ids.tag_emb);
        let tok = tape.gather(tok_table, input.token_ids.clone());
        let tag = tape.gather(tag_table, input.tag_ids.clone());
        Ok(tape.add(tok, tag))
    }

    /// One post-norm encoder block: relative-position multi-head attention
    /// with residual and layer norm, then the position-wise feed-forward
    /// sublayer with residual and layer norm.
    pub fn encoder_layer(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        layer: usize,
        segments: &[(usize, usize)],
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Var {
        let ids = &self.ids.layers[layer];
        let p = |tape: &mut Tape<'_, F>, id| tape.param(id);
        let (wq, bq, wk, wv, bv) = (
            p(tape, ids.wq),
            p(tape, ids.bq),
            p(tape, ids.wk),
            p(tape, ids.wv),
            p(tape, ids.bv),
        );
        let q = tape.affine(x, wq, bq);
        let k = tape.matmul(x, wk);
        let v = tape.affine(x, wv, bv);
        let rel_k = p(tape, ids.rel_k);
        let rel_v = self.config.relative_values.then(|| p(tape, ids.rel_v));
        let shape = AttentionShape {
            heads: self.config.num_heads,
            clip: self.config.relative_clip_distance,
            segments: segments.to_vec(),
        };
        let attn_drop = dropout.as_deref_mut().map(|d| d.mask(shape.num_weights()));
        let attn = tape.attention(q, k, v, rel_k, rel_v, shape, attn_drop);
        let (wo, bo) = (p(tape, ids.wo), p(tape, ids.bo));
        let mut o = tape.affine(attn, wo, bo);
        if let Some(d) = dropout.as_deref_mut() {
            let m = d.mask(tape.value(o).len());
            o = tape.mul_const(o, m);
        }
        let res = tape.add(x, o);
        let (g1, b1n) = (p(tape, ids.ln1_gain), p(tape, ids.ln1_bias));
        let x1 = tape.layer_norm(res, g1, b1n);

        let (w1, b1, w2, b2) = (p(tape, ids.w1), p(tape, ids.b1), p(tape, ids.w2), p(tape, ids.b2));
        let hmid = tape.affine(x1, w1, b1);
        let hact = tape.relu(hmid);
        let mut f = tape.affine(hact, w2, b2);
        if let Some(d) = dropout {
            let m = d.mask(tape.value(f).len());
            f = tape.mul_const(f, m);
        }
        let res2 = tape.add(x1, f);
        let (g2, b2n) = (p(tape, ids.ln2_gain), p(tape, ids.ln2_bias));
        tape.layer_norm(res2, g2, b2n)
    }

    /// Stacked encoder output `H`, one row per packed position.
    pub fn encode(
        &self,
        tape: &mut Tape<'_, F>,
        input: &PackedInput,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let mut x = self.embed_inputs(tape, input)?;
        for layer in 0..self.config.num_layers {
            x = self.encoder_layer(tape, x, layer, &input.segments, dropout.as_deref_mut());
        }
        Ok(x)
    }

    /// Intent logits from `h_cls`; slot logits from `[h_cls ; h_i]` per token.
    pub fn predict_heads(&self, tape: &mut Tape<'_, F>, hidden: Var, input: &PackedInput) -> (Var, Var) {
        let cls = tape.gather(hidden, input.cls_rows());
        let (iw, ib) = (tape.param(self.ids.intent_w), tape.param(self.ids.intent_b));
        let intent = tape.affine(cls, iw, ib);
        let cls_per_token = tape.gather(hidden, input.cls_row_per_token());
        let tokens = tape.gather(hidden, input.token_rows());
        let joint = tape.concat_cols(cls_per_token, tokens);
        let (sw, sb) = (tape.param(self.ids.slot_w), tape.param(self.ids.slot_b));
        let slots = tape.affine(joint, sw, sb);
        (intent, slots)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_, F>,
        input: &PackedInput,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Forward> {
        let hidden = self.encode(tape, input, dropout)?;
        let (intent_logits, slot_logits) = self.predict_heads(tape, hidden, input);
        Ok(Forward {
            hidden,
            intent_logits,
            slot_logits,
        })
    }

    /// Mean over utterances of `CE(intent) + Σ_t slot loss`. Gold entries that
    /// are `None` (labels unseen in training) are skipped; with the CRF loss an
    /// utterance with any unknown gold tag contributes only its intent term.
    pub fn joint_loss(
        &self,
        tape: &mut Tape<'_, F>,
        fwd: &Forward,
        input: &PackedInput,
        gold_intents: &[Option<usize>],
        gold_tags: &[Option<usize>],
        slot_loss: SlotLoss,
    ) -> Result<Var> {
        let n = input.num_utterances();
        if gold_intents.len() != n || gold_tags.len() != input.num_tokens() {
            return Err(Error::Shape(format!(
                "joint_loss: {} intents / {} tags for {n} utterances / {} tokens",
                gold_intents.len(),
                gold_tags.len(),
                input.num_tokens()
            )));
        }
        let intent = tape.softmax_xent(fwd.intent_logits, gold_intents.to_vec());
        let slot = match slot_loss {
            SlotLoss::CrossEntropy => tape.softmax_xent(fwd.slot_logits, gold_tags.to_vec()),
            SlotLoss::Crf => {
                let segs: Vec<(usize, usize)> = input
                    .token_segments()
                    .into_iter()
                    .filter(|&(s, l)| gold_tags[s..s + l].iter().all(Option::is_some))
                    .collect();
                let gold: Vec<usize> = gold_tags.iter().map(|g| g.unwrap_or(0)).collect();
                let trans = tape.param(self.ids.transitions);
                tape.crf_nll(fwd.slot_logits, trans, &segs, &gold)
            }
        };
        let total = tape.sum(vec![intent, slot]);
        Ok(tape.scale(total, F::one() / F::from_usize(n.max(1)).unwrap()))
    }

    /// Splits packed head outputs into per-utterance logits.
    pub fn head_outputs(&self, tape: &Tape<'_, F>, fwd: &Forward, input: &PackedInput) -> Vec<HeadOutputs<F>> {
        let intents = tape.value(fwd.intent_logits);
        let slots = tape.value(fwd.slot_logits);
        let t = slots.cols();
        input
            .token_segments()
            .iter()
            .enumerate()
            .map(|(u, &(s, l))| HeadOutputs {
                intent_logits: intents.row(u).to_vec(),
                slot_logits: Tensor::matrix(l, t, slots.data()[s * t..(s + l) * t].to_vec()),
            })
            .collect()
    }
}
