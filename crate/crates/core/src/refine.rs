//! Two-pass decoding: tag with all-`O` tag inputs, feed the predicted `B-*`
//! tags back as tag inputs, and tag again with the same parameters.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Utterance, Vocab};
use crate::crf::{viterbi, TransitionMatrix};
use crate::encoder::{Dropout, HeadOutputs, Model, PackedInput, SlotLoss};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Real, Tape, Tensor};
use crate::tagcodec::Labels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OnePass,
    TwoPass,
    OnePassCrf,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::OnePass, Mode::TwoPass, Mode::OnePassCrf];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::OnePass => "one_pass",
            Mode::TwoPass => "two_pass",
            Mode::OnePassCrf => "one_pass_crf",
        }
    }

    pub fn slot_loss(&self) -> SlotLoss {
        match self {
            Mode::OnePassCrf => SlotLoss::Crf,
            _ => SlotLoss::CrossEntropy,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected one_pass, two_pass or one_pass_crf)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassLogits {
    pub pass1: HeadOutputs<f32>,
    pub pass2: Option<HeadOutputs<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub intent_id: usize,
    pub slot_tag_ids: Vec<usize>,
    pub pass1_intent_id: usize,
    pub pass1_tag_ids: Vec<usize>,
    pub logits: Option<PassLogits>,
}

impl Prediction {
    pub fn to_labels(&self, vocab: &Vocab) -> Labels {
        Labels {
            intent: vocab.intent_surface(self.intent_id).to_string(),
            slot_tags: self.slot_tag_ids.iter().map(|&t| vocab.tag_surface(t).to_string()).collect(),
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Real>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows<F: Real>(t: &Tensor<F>) -> Vec<usize> {
    (0..t.rows()).map(|r| argmax(t.row(r))).collect()
}

fn cast_heads<F: Real>(h: &HeadOutputs<F>) -> HeadOutputs<f32> {
    HeadOutputs {
        intent_logits: h.intent_logits.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        slot_logits: h.slot_logits.cast(),
    }
}

/// Output of [`Refiner::two_pass_forward`].
#[derive(Debug, Clone)]
pub struct TwoPassOutput<F> {
    pub pass1: Vec<HeadOutputs<F>>,
    pub pass2: Vec<HeadOutputs<F>>,
    /// Tag inputs used for pass 2.
    pub pass2_input: PackedInput,
    pub predictions: Vec<Prediction>,
}

/// Per-pass and summed losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub pass1: f64,
    pub pass2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub mode: Mode,
    /// Include the pass-1 loss in two-pass training.
    pub pass1_loss: bool,
    /// Build pass-2 inputs from gold tags instead of pass-1 predictions.
    pub teacher_forcing: bool,
    pub dropout: f64,
}

impl StepOptions {
    pub fn new(mode: Mode) -> Self {
        StepOptions {
            mode,
            pass1_loss: true,
            teacher_forcing: false,
            dropout: 0.0,
        }
    }
}

/// Decoding and training driver for a model and its tag vocabulary.
pub struct Refiner<'m, F: Real> {
    pub model: &'m Model<F>,
    projection: Vec<usize>,
    outside: usize,
}

impl<'m, F: Real> Refiner<'m, F> {
    pub fn new(model: &'m Model<F>, vocab: &Vocab) -> Result<Self> {
        let c = &model.config;
        if c.vocab_size != vocab.tokens.len() || c.num_tags != vocab.tags.len() || c.num_intents != vocab.intents.len() {
            return Err(Error::Checkpoint(format!(
                "model sizes (tokens {}, tags {}, intents {}) do not match vocabulary ({}, {}, {})",
                c.vocab_size,
                c.num_tags,
                c.num_intents,
                vocab.tokens.len(),
                vocab.tags.len(),
                vocab.intents.len()
            )));
        }
        Ok(Self::with_projection(model, vocab.projection_table(), vocab.outside_id()))
    }

    /// `projection[t]` is the pass-2 input id for predicted tag `t`.
    pub fn with_projection(model: &'m Model<F>, projection: Vec<usize>, outside: usize) -> Self {
        Refiner {
            model,
            projection,
            outside,
        }
    }

    pub fn outside_id(&self) -> usize {
        self.outside
    }

    fn project(&self, tags: &[usize]) -> Vec<usize> {
        tags.iter().map(|&t| self.projection[t]).collect()
    }

    fn transitions(&self) -> TransitionMatrix<F> {
        let t = self.model.params.value(self.model.transitions_id()).clone();
        TransitionMatrix::from_tensor(t).expect("transition shape fixed by layout")
    }

    fn heads(&self, input: &PackedInput) -> Result<Vec<HeadOutputs<F>>> {
        let mut tape = Tape::new(&self.model.params);
        let fwd = self.model.forward(&mut tape, input, None)?;
        Ok(self.model.head_outputs(&tape, &fwd, input))
    }

    /// Pass 1 with the given tag inputs, pass 2 with the B-projection of the
    /// pass-1 argmax. Predictions come from pass 2.
    pub fn two_pass_forward(&self, input: &PackedInput) -> Result<TwoPassOutput<F>> {
        let pass1 = self.heads(input)?;
        let pass1_tags: Vec<Vec<usize>> = pass1.iter().map(|h| argmax_rows(&h.slot_logits)).collect();
        let flat: Vec<usize> = pass1_tags.iter().flat_map(|t| self.project(t)).collect();
        let pass2_input = input.with_token_tags(&flat);
        let pass2 = self.heads(&pass2_input)?;
        let predictions = pass1
            .iter()
            .zip(&pass2)
            .zip(pass1_tags)
            .map(|((h1, h2), p1)| Prediction {
                intent_id: argmax(&h2.intent_logits),
                slot_tag_ids: argmax_rows(&h2.slot_logits),
                pass1_intent_id: argmax(&h1.intent_logits),
                pass1_tag_ids: p1,
                logits: Some(PassLogits {
                    pass1: cast_heads(h1),
                    pass2: Some(cast_heads(h2)),
                }),
            })
            .collect();
        Ok(TwoPassOutput {
            pass1,
            pass2,
            pass2_input,
            predictions,
        })
    }

    /// Deterministic decode of packed utterances. Logits are not retained.
    pub fn decode(&self, input: &PackedInput, mode: Mode) -> Result<Vec<Prediction>> {
        if input.num_utterances() == 0 {
            return Ok(Vec::new());
        }
        match mode {
            Mode::TwoPass => Ok(self
                .two_pass_forward(input)?
                .predictions
                .into_iter()
                .map(|p| Prediction { logits: None, ..p })
                .collect()),
            Mode::OnePass | Mode::OnePassCrf => {
                let heads = self.heads(input)?;
                let trans = (mode == Mode::OnePassCrf).then(|| self.transitions());
                Ok(heads
                    .iter()
                    .map(|h| {
                        let tags = match &trans {
                            Some(tm) => viterbi(h.slot_logits.data(), tm),
                            None => argmax_rows(&h.slot_logits),
                        };
                        let intent = argmax(&h.intent_logits);
                        Prediction {
                            intent_id: intent,
                            slot_tag_ids: tags.clone(),
                            pass1_intent_id: intent,
                            pass1_tag_ids: tags,
                            logits: None,
                        }
                    })
                    .collect())
            }
        }
    }

    /// Decodes one utterance given its token ids (without CLS).
    pub fn decode_single(&self, token_ids: &[usize], mode: Mode) -> Result<Prediction> {
        let input = PackedInput::single(token_ids, self.outside);
        Ok(self.decode(&input, mode)?.pop().expect("one utterance in, one out"))
    }

    /// Decodes a split in input order, `batch_size` utterances at a time.
    pub fn decode_utterances(
        &self,
        utterances: &[Utterance],
        vocab: &Vocab,
        mode: Mode,
        batch_size: usize,
    ) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(utterances.len());
        for chunk in utterances.chunks(batch_size.max(1)) {
            let refs: Vec<&Utterance> = chunk.iter().collect();
            let batch = Batch::encode(&refs, vocab);
            out.extend(self.decode(&PackedInput::from_batch(&batch), mode)?);
        }
        Ok(out)
    }

    /// Loss and parameter gradients for one batch without touching the
    /// optimizer state. Pass-2 inputs are treated as constants.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        opts: &StepOptions,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(StepLoss, Vec<Option<Tensor<F>>>)> {
        let model = self.model;
        let input = PackedInput::from_batch(batch);
        let gold_tags: Vec<Option<usize>> = (0..batch.size()).flat_map(|r| batch.row_gold_tags(r).to_vec()).collect();
        let mut dropout = rng.filter(|_| opts.dropout > 0.0).map(|rng| Dropout {
            rate: opts.dropout,
            rng,
        });
        let mut tape = Tape::new(&model.params);
        let f1 = model.forward(&mut tape, &input, dropout.as_mut())?;
        let l1 = model.joint_loss(&mut tape, &f1, &input, &batch.gold_intent_ids, &gold_tags, opts.mode.slot_loss())?;
        let pass1 = tape.scalar(l1).to_f64().unwrap_or(f64::NAN);
        let (loss, pass2) = if opts.mode == Mode::TwoPass {
            let tags: Vec<usize> = if opts.teacher_forcing {
                gold_tags.iter().map(|g| g.unwrap_or(self.outside)).collect()
            } else {
                argmax_rows(tape.value(f1.slot_logits))
            };
            let input2 = input.with_token_tags(&self.project(&tags));
            let f2 = model.forward(&mut tape, &input2, dropout.as_mut())?;
            let l2 = model.joint_loss(&mut tape, &f2, &input2, &batch.gold_intent_ids, &gold_tags, SlotLoss::CrossEntropy)?;
            let pass2 = tape.scalar(l2).to_f64().unwrap_or(f64::NAN);
            let loss = if opts.pass1_loss { tape.sum(vec![l1, l2]) } else { l2 };
            (loss, Some(pass2))
        } else {
            (l1, None)
        };
        let total = tape.scalar(loss).to_f64().unwrap_or(f64::NAN);
        let grads = tape.backward(loss);
        Ok((StepLoss { total, pass1, pass2 }, grads))
    }
}

/// One optimizer step on the batch loss. `step` is the 1-based Adam counter.
#[allow(clippy::too_many_arguments)]
pub fn train_step<F: Real>(
    model: &mut Model<F>,
    projection: &[usize],
    outside: usize,
    batch: &Batch,
    opts: &StepOptions,
    adam: &AdamConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let (loss, grads) = Refiner::with_projection(model, projection.to_vec(), outside).loss_and_grads(batch, opts, Some(rng))?;
    model.params.zero_grad();
    model.params.accumulate(&grads);
    model.params.adam_step(adam, step)?;
    Ok(loss)
}
