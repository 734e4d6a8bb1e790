//! Synthetic IOB corpora for smoke tests and benchmarks.
//!
//! Each utterance opens with an intent keyword, mixes filler words with slot
//! chunks, and announces every chunk with a cue word for its slot type, so
//! small models can learn the data quickly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub slot_types: usize,
    pub intents: usize,
    pub filler_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Longest slot chunk, in tokens.
    pub max_chunk: usize,
}

impl SynthConfig {
    /// 60 slot types (121 tags with `O`), 18 intents and lengths 4 to 20.
    pub fn atis_like() -> Self {
        SynthConfig {
            slot_types: 60,
            intents: 18,
            filler_words: 300,
            min_len: 4,
            max_len: 20,
            max_chunk: 3,
        }
    }

    pub fn small() -> Self {
        SynthConfig {
            slot_types: 4,
            intents: 3,
            filler_words: 20,
            min_len: 3,
            max_len: 8,
            max_chunk: 2,
        }
    }
}

/// `n` utterances with ids `0..n`, deterministic in `seed`.
pub fn generate(synth: &SynthConfig, n: usize, seed: u64) -> Vec<Utterance> {
    assert!(synth.min_len >= 2 && synth.min_len <= synth.max_len, "length range must start at 2 or more");
    assert!(synth.slot_types > 0 && synth.intents > 0 && synth.filler_words > 0 && synth.max_chunk > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let len = rng.gen_range(synth.min_len..=synth.max_len);
            let intent = rng.gen_range(0..synth.intents);
            let mut tokens = vec![format!("ask{intent}")];
            let mut tags = vec!["O".to_string()];
            while tokens.len() < len {
                let room = len - tokens.len();
                if room >= 2 && rng.gen_bool(0.45) {
                    let t = rng.gen_range(0..synth.slot_types);
                    let width = rng.gen_range(1..=synth.max_chunk.min(room - 1));
                    tokens.push(format!("cue{t}"));
                    tags.push("O".into());
                    for k in 0..width {
                        tokens.push(format!("val{t}x{}", rng.gen_range(0..4)));
                        tags.push(if k == 0 { format!("B-slot{t}") } else { format!("I-slot{t}") });
                    }
                } else {
                    tokens.push(format!("w{}", rng.gen_range(0..synth.filler_words)));
                    tags.push("O".into());
                }
            }
            Utterance {
                id,
                tokens,
                slot_tags: tags,
                intent: format!("intent{intent}"),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::tagcodec::{count_uncoordinated, validate_tag};

    #[test]
    fn well_formed_and_deterministic() {
        let synth = SynthConfig::atis_like();
        let a = generate(&synth, 300, 5);
        assert_eq!(a, generate(&synth, 300, 5));
        for u in &a {
            assert!((synth.min_len..=synth.max_len).contains(&u.len()));
            assert_eq!(u.tokens.len(), u.slot_tags.len());
            assert!(u.slot_tags.iter().all(|t| validate_tag(t).is_ok()));
            assert_eq!(count_uncoordinated(&u.slot_tags).unwrap(), 0);
        }
        assert!(a.iter().filter(|u| u.len() >= 12).count() >= 10);
        let v = Vocab::build(&a);
        assert_eq!(v.tags.len(), 121);
    }
}
