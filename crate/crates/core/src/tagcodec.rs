//! IOB tag semantics: chunk recovery, coordination auditing, the B-tag
//! projection fed to the second decoding pass, and slot/intent/sentence
//! metrics.
//!
//! Chunk recovery follows the conlleval conventions, so an `I-t` with no open
//! chunk of type `t` starts a new chunk when scoring. The auditor
//! ([`count_uncoordinated`], [`validate_crf_rules`]) is strict and reports
//! every such orphan.

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

/// A parsed IOB tag borrowing its slot type from the source string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Tag<'a> {
    pub fn parse(tag: &'a str) -> Result<Self> {
        let malformed = || Error::MalformedTag {
            tag: tag.to_string(),
        };
        if tag == OUTSIDE {
            return Ok(Tag::Outside);
        }
        let (kind, slot) = tag.split_at_checked(2).ok_or_else(malformed)?;
        if slot.is_empty() || slot.chars().any(char::is_whitespace) {
            return Err(malformed());
        }
        match kind {
            "B-" => Ok(Tag::Begin(slot)),
            "I-" => Ok(Tag::Inside(slot)),
            _ => Err(malformed()),
        }
    }

    pub fn slot_type(&self) -> Option<&'a str> {
        match *self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }

    pub fn is_begin(&self) -> bool {
        matches!(self, Tag::Begin(_))
    }
}

pub fn validate_tag(tag: &str) -> Result<()> {
    Tag::parse(tag).map(|_| ())
}

fn parse_all<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Tag<'_>>> {
    tags.iter().map(|t| Tag::parse(t.as_ref())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chunk {
    pub slot_type: String,
    /// Inclusive.
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

impl Chunk {
    pub fn new(slot_type: impl Into<String>, start: usize, end: usize) -> Self {
        Chunk {
            slot_type: slot_type.into(),
            start,
            end,
        }
    }
}

/// Recovers slot chunks from an IOB sequence. Output is sorted by start.
pub fn parse_chunks<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Chunk>> {
    let parsed = parse_all(tags)?;
    let mut chunks = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, tag) in parsed.iter().enumerate() {
        let continues = matches!((tag, open), (Tag::Inside(t), Some((o, _))) if *t == o);
        if continues {
            continue;
        }
        if let Some((t, start)) = open.take() {
            chunks.push(Chunk::new(t, start, i - 1));
        }
        if let Some(t) = tag.slot_type() {
            open = Some((t, i));
        }
    }
    if let Some((t, start)) = open {
        chunks.push(Chunk::new(t, start, parsed.len() - 1));
    }
    Ok(chunks)
}

/// Renders chunks back to a canonical B/I/O sequence of length `len`.
pub fn render_chunks(chunks: &[Chunk], len: usize) -> Vec<String> {
    let mut tags = vec![OUTSIDE.to_string(); len];
    for c in chunks {
        tags[c.start] = format!("B-{}", c.slot_type);
        for tag in &mut tags[c.start + 1..=c.end] {
            *tag = format!("I-{}", c.slot_type);
        }
    }
    tags
}

fn coordinated(prev: Option<Tag<'_>>, cur: Tag<'_>) -> bool {
    match cur {
        Tag::Inside(t) => matches!(prev, Some(Tag::Begin(p) | Tag::Inside(p)) if p == t),
        _ => true,
    }
}

/// Number of `I-t` tags whose predecessor is neither `B-t` nor `I-t`. A
/// sequence-initial `I-*` counts.
pub fn count_uncoordinated<S: AsRef<str>>(tags: &[S]) -> Result<usize> {
    let parsed = parse_all(tags)?;
    let mut count = 0;
    let mut prev = None;
    for &tag in &parsed {
        if !coordinated(prev, tag) {
            count += 1;
        }
        prev = Some(tag);
    }
    Ok(count)
}

/// Keeps `B-*` tags and replaces everything else with `O`.
pub fn btag_projection<S: AsRef<str>>(tags: &[S]) -> Result<Vec<String>> {
    parse_all(tags).map(|parsed| {
        parsed
            .iter()
            .zip(tags)
            .map(|(p, raw)| {
                if p.is_begin() {
                    raw.as_ref().to_string()
                } else {
                    OUTSIDE.to_string()
                }
            })
            .collect()
    })
}

/// An adjacent pair breaking the IOB transition rules. `prev` is `None` when
/// the offending tag opens the sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub prev: Option<usize>,
    pub pos: usize,
    pub prev_tag: Option<String>,
    pub tag: String,
}

/// Lists every transition into an `I-t` from anything other than `B-t`/`I-t`
/// (including the sequence start). O may only be followed by O or B-*, and B-t
/// may only continue into I-t.
pub fn validate_crf_rules<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Violation>> {
    let parsed = parse_all(tags)?;
    let mut out = Vec::new();
    for (i, &tag) in parsed.iter().enumerate() {
        let prev = i.checked_sub(1).map(|p| parsed[p]);
        if !coordinated(prev, tag) {
            out.push(Violation {
                prev: i.checked_sub(1),
                pos: i,
                prev_tag: i.checked_sub(1).map(|p| tags[p].as_ref().to_string()),
                tag: tags[i].as_ref().to_string(),
            });
        }
    }
    Ok(out)
}

/// Predicted labels for one utterance, in surface form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub intent: String,
    pub slot_tags: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub slot_f1: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub intent_accuracy: f64,
    pub sentence_accuracy: f64,
    pub uncoordinated_count: usize,
    pub gold_chunks: usize,
    pub predicted_chunks: usize,
    pub correct_chunks: usize,
    pub utterances: usize,
}

/// Precision, recall and F1 from chunk counts. With no gold and no predicted
/// chunks all three are 1.
pub fn prf(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    if predicted == 0 && gold == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if predicted == 0 {
        0.0
    } else {
        correct as f64 / predicted as f64
    };
    let r = if gold == 0 {
        0.0
    } else {
        correct as f64 / gold as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

pub fn evaluate(gold: &[Utterance], pred: &[Labels]) -> Result<MetricsReport> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch {
            id: gold.len().min(pred.len()),
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut report = MetricsReport {
        utterances: gold.len(),
        ..Default::default()
    };
    let mut intent_hits = 0usize;
    let mut sentence_hits = 0usize;
    for (g, p) in gold.iter().zip(pred) {
        if g.slot_tags.len() != p.slot_tags.len() {
            return Err(Error::LengthMismatch {
                id: g.id,
                gold: g.slot_tags.len(),
                pred: p.slot_tags.len(),
            });
        }
        let gold_chunks = parse_chunks(&g.slot_tags)?;
        let pred_chunks = parse_chunks(&p.slot_tags)?;
        report.gold_chunks += gold_chunks.len();
        report.predicted_chunks += pred_chunks.len();
        // Both lists are sorted by start and chunks never overlap, so a merge
        // walk finds the exact matches.
        let (mut a, mut b) = (0, 0);
        while a < gold_chunks.len() && b < pred_chunks.len() {
            let (ga, pb) = (&gold_chunks[a], &pred_chunks[b]);
            match ga.start.cmp(&pb.start) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    if ga == pb {
                        report.correct_chunks += 1;
                    }
                    a += 1;
                    b += 1;
                }
            }
        }
        report.uncoordinated_count += count_uncoordinated(&p.slot_tags)?;
        let intent_ok = g.intent == p.intent;
        intent_hits += intent_ok as usize;
        sentence_hits += (intent_ok && g.slot_tags == p.slot_tags) as usize;
    }
    let (p, r, f1) = prf(
        report.correct_chunks,
        report.predicted_chunks,
        report.gold_chunks,
    );
    report.slot_precision = p;
    report.slot_recall = r;
    report.slot_f1 = f1;
    let n = gold.len().max(1) as f64;
    report.intent_accuracy = if gold.is_empty() { 1.0 } else { intent_hits as f64 / n };
    report.sentence_accuracy = if gold.is_empty() { 1.0 } else { sentence_hits as f64 / n };
    Ok(report)
}
