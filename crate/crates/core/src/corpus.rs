//! Dataset loading, vocabularies and padded id batches.
//!
//! A split lives in `<dir>/<split>/` as three parallel UTF-8 files: `seq.in`
//! (space separated tokens), `seq.out` (one IOB tag per token) and `label`
//! (one intent per line).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagcodec::{self, Tag, OUTSIDE};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: usize,
    pub tokens: Vec<String>,
    pub slot_tags: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "valid" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect())
}

/// Parses three parallel line lists into utterances. `origin` names the
/// source in error messages.
pub fn parse_parallel(
    origin: &str,
    seq_in: &[String],
    seq_out: &[String],
    labels: &[String],
) -> Result<Vec<Utterance>> {
    if seq_in.len() != seq_out.len() || seq_in.len() != labels.len() {
        return Err(Error::LineCountMismatch {
            files: format!("{origin}/{{seq.in,seq.out,label}}"),
            counts: vec![seq_in.len(), seq_out.len(), labels.len()],
        });
    }
    let mut out = Vec::with_capacity(seq_in.len());
    for (i, ((words, tags), label)) in seq_in.iter().zip(seq_out).zip(labels).enumerate() {
        let tokens: Vec<String> = words.split_whitespace().map(str::to_lowercase).collect();
        let slot_tags: Vec<String> = tags.split_whitespace().map(str::to_string).collect();
        if tokens.len() != slot_tags.len() || tokens.is_empty() {
            return Err(Error::ArityMismatch {
                file: format!("{origin}/seq.in"),
                line: i + 1,
                tokens: tokens.len(),
                tags: slot_tags.len(),
            });
        }
        for t in &slot_tags {
            tagcodec::validate_tag(t)?;
        }
        out.push(Utterance {
            id: i,
            tokens,
            slot_tags,
            intent: label.trim().to_string(),
        });
    }
    Ok(out)
}

/// Directory holding `split` under `dir`. The dev split may also be stored
/// as `valid`.
pub fn split_dir(dir: &Path, split: Split) -> PathBuf {
    let base = dir.join(split.as_str());
    if split == Split::Dev && !base.exists() && dir.join("valid").exists() {
        return dir.join("valid");
    }
    base
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Utterance>> {
    let base = split_dir(dir, split);
    let seq_in = read_lines(&base.join("seq.in"))?;
    let seq_out = read_lines(&base.join("seq.out"))?;
    let labels = read_lines(&base.join("label"))?;
    parse_parallel(&base.display().to_string(), &seq_in, &seq_out, &labels)
}

/// Writes `seq.in`, `seq.out` and `label` for `split` under `dir`.
pub fn write_split(dir: &Path, split: Split, data: &[Utterance]) -> Result<()> {
    let base = dir.join(split.as_str());
    fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    let join = |f: &dyn Fn(&Utterance) -> String| data.iter().map(|u| f(u) + "\n").collect::<String>();
    for (name, body) in [
        ("seq.in", join(&|u| u.tokens.join(" "))),
        ("seq.out", join(&|u| u.slot_tags.join(" "))),
        ("label", join(&|u| u.intent.clone())),
    ] {
        let path = base.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// A bijection between surface strings and dense ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Symbols {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Symbols {
    pub fn insert(&mut self, s: &str) -> usize {
        if let Some(&id) = self.index.get(s) {
            return id;
        }
        let id = self.items.len();
        self.items.push(s.to_string());
        self.index.insert(s.to_string(), id);
        id
    }

    pub fn get(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn surface(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(String::as_str)
    }
}

impl From<Vec<String>> for Symbols {
    fn from(items: Vec<String>) -> Self {
        let mut s = Symbols::default();
        for item in &items {
            s.insert(item);
        }
        s
    }
}

impl From<Symbols> for Vec<String> {
    fn from(s: Symbols) -> Self {
        s.items
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Symbols,
    pub tags: Symbols,
    pub intents: Symbols,
}

impl Vocab {
    /// Tokens, tags and intents in first-seen order. The tag set always holds
    /// `O` (id 0) and an `I-t` for every `B-t` seen.
    pub fn build(train: &[Utterance]) -> Vocab {
        let mut tokens = Symbols::default();
        for s in SPECIALS {
            tokens.insert(s);
        }
        let mut tags = Symbols::default();
        tags.insert(OUTSIDE);
        let mut intents = Symbols::default();
        let mut begins = Vec::new();
        for u in train {
            for t in &u.tokens {
                tokens.insert(t);
            }
            for t in &u.slot_tags {
                tags.insert(t);
                if let Ok(Tag::Begin(slot)) = Tag::parse(t) {
                    begins.push(slot.to_string());
                }
            }
            intents.insert(&u.intent);
        }
        for slot in begins {
            tags.insert(&format!("I-{slot}"));
        }
        Vocab {
            tokens,
            tags,
            intents,
        }
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.tokens.get(token).unwrap_or(UNK)
    }

    pub fn outside_id(&self) -> usize {
        0
    }

    /// Maps each tag id to itself if it is a `B-*` tag and to `O` otherwise.
    pub fn projection_table(&self) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .map(|(id, t)| match Tag::parse(t) {
                Ok(Tag::Begin(_)) => id,
                _ => self.outside_id(),
            })
            .collect()
    }

    pub fn tag_surface(&self, id: usize) -> &str {
        self.tags.surface(id).unwrap_or(OUTSIDE)
    }

    pub fn intent_surface(&self, id: usize) -> &str {
        self.intents.surface(id).unwrap_or("<unk>")
    }

    /// Writes `<id>\t<surface>` dumps as `tokens.vocab`, `tags.vocab` and
    /// `intents.vocab` under `dir`.
    pub fn write_dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, syms) in [
            ("tokens.vocab", &self.tokens),
            ("tags.vocab", &self.tags),
            ("intents.vocab", &self.intents),
        ] {
            let body: String = syms
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{i}\t{s}\n"))
                .collect();
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn build_vocab(train: &[Utterance]) -> Vocab {
    Vocab::build(train)
}

/// A padded batch. Matrices are row-major; `width` is `L + 1` where column 0
/// holds CLS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub width: usize,
    pub token_ids: Vec<usize>,
    pub tag_input_ids: Vec<usize>,
    /// `[B × L]`; `None` for padding or tags unknown to the vocabulary.
    pub gold_tag_ids: Vec<Option<usize>>,
    pub gold_intent_ids: Vec<Option<usize>>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub utterance_ids: Vec<usize>,
}

impl Batch {
    pub fn encode(items: &[&Utterance], vocab: &Vocab) -> Batch {
        let max_len = items.iter().map(|u| u.len()).max().unwrap_or(0);
        let width = max_len + 1;
        let n = items.len();
        let mut b = Batch {
            width,
            token_ids: vec![PAD; n * width],
            tag_input_ids: vec![vocab.outside_id(); n * width],
            gold_tag_ids: vec![None; n * max_len],
            gold_intent_ids: Vec::with_capacity(n),
            mask: vec![false; n * width],
            lengths: Vec::with_capacity(n),
            utterance_ids: Vec::with_capacity(n),
        };
        for (r, u) in items.iter().enumerate() {
            let row = r * width;
            b.token_ids[row] = CLS;
            b.mask[row] = true;
            for (j, tok) in u.tokens.iter().enumerate() {
                b.token_ids[row + 1 + j] = vocab.token_id(tok);
                b.mask[row + 1 + j] = true;
                b.gold_tag_ids[r * max_len + j] = vocab.tags.get(&u.slot_tags[j]);
            }
            b.gold_intent_ids.push(vocab.intents.get(&u.intent));
            b.lengths.push(u.len());
            b.utterance_ids.push(u.id);
        }
        b
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// Longest utterance length `L`.
    pub fn max_len(&self) -> usize {
        self.width - 1
    }

    /// Token ids of row `r` including CLS, without padding.
    pub fn row_tokens(&self, r: usize) -> &[usize] {
        &self.token_ids[r * self.width..r * self.width + self.lengths[r] + 1]
    }

    pub fn row_tag_inputs(&self, r: usize) -> &[usize] {
        &self.tag_input_ids[r * self.width..r * self.width + self.lengths[r] + 1]
    }

    pub fn row_gold_tags(&self, r: usize) -> &[Option<usize>] {
        let l = self.max_len();
        &self.gold_tag_ids[r * l..r * l + self.lengths[r]]
    }
}

/// Splits `data` into batches of `batch_size`, shuffled when a seed is given.
pub fn make_batches<'a>(
    data: &'a [Utterance],
    vocab: &'a Vocab,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> impl Iterator<Item = Batch> + 'a {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| {
        let items: Vec<&Utterance> = idx.iter().map(|&i| &data[i]).collect();
        Batch::encode(&items, vocab)
    })
}
