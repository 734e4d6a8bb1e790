//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::HashMap;

use nartag::crf::{path_score, TransitionMatrix};
use rand::Rng;

/// All tag paths of length `l` over `t` tags.
pub fn all_paths(l: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..l {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..t).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

/// `log Σ exp(score)` over every path, by enumeration.
pub fn brute_log_partition(em: &[f64], tm: &TransitionMatrix<f64>, l: usize) -> f64 {
    let scores: Vec<f64> = all_paths(l, tm.num_tags())
        .iter()
        .map(|p| path_score(em, tm, p))
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

pub fn brute_best_score(em: &[f64], tm: &TransitionMatrix<f64>, l: usize) -> f64 {
    all_paths(l, tm.num_tags())
        .iter()
        .map(|p| path_score(em, tm, p))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn random_crf(rng: &mut impl Rng, l: usize, t: usize) -> (Vec<f64>, TransitionMatrix<f64>) {
    let em = (0..l * t).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut tm = TransitionMatrix::zeros(t);
    for a in 0..t + 2 {
        for b in 0..t + 2 {
            tm.set(a, b, rng.gen_range(-3.0..3.0));
        }
    }
    (em, tm)
}

pub const TAG_POOL: [&str; 7] = ["O", "B-a", "I-a", "B-b", "I-b", "B-c", "I-c"];

/// Uniform random sequence over [`TAG_POOL`], so ill-formed transitions are
/// frequent.
pub fn random_tags(rng: &mut impl Rng, len: usize) -> Vec<String> {
    (0..len)
        .map(|_| TAG_POOL[rng.gen_range(0..TAG_POOL.len())].to_string())
        .collect()
}

/// Chunk counts from the reference CoNLL-2000 evaluation procedure, over a
/// stream of `token gold pred` lines with blank lines between sentences.
pub mod conlleval {
    use super::HashMap;

    fn parse_tag(t: &str) -> (String, String) {
        match t.split_once('-') {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (t.to_string(), String::new()),
        }
    }

    fn end_of_chunk(prev_tag: &str, tag: &str, prev_type: &str, ty: &str) -> bool {
        let mut end = matches!(prev_tag, "E" | "S" | "]" | "[");
        end |= prev_tag == "B" && matches!(tag, "B" | "S" | "O");
        end |= prev_tag == "I" && matches!(tag, "B" | "S" | "O");
        end |= prev_tag != "O" && prev_tag != "." && prev_type != ty;
        end
    }

    fn start_of_chunk(prev_tag: &str, tag: &str, prev_type: &str, ty: &str) -> bool {
        let mut start = matches!(tag, "B" | "S" | "[" | "]");
        start |= matches!(prev_tag, "E" | "S" | "O") && matches!(tag, "E" | "I");
        start |= tag != "O" && tag != "." && prev_type != ty;
        start
    }

    #[derive(Debug, Default)]
    pub struct Counts {
        pub correct: HashMap<String, usize>,
        pub gold: HashMap<String, usize>,
        pub pred: HashMap<String, usize>,
    }

    impl Counts {
        fn total(m: &HashMap<String, usize>) -> usize {
            m.values().sum()
        }

        /// Overall chunk F1 as the reference script computes it.
        pub fn f1(&self) -> f64 {
            let (c, p, g) = (Self::total(&self.correct), Self::total(&self.pred), Self::total(&self.gold));
            let prec = if p == 0 { 1.0 } else { c as f64 / p as f64 };
            let rec = if g == 0 { 0.0 } else { c as f64 / g as f64 };
            if prec + rec == 0.0 {
                0.0
            } else {
                2.0 * prec * rec / (prec + rec)
            }
        }
    }

    pub fn evaluate(lines: &str) -> Counts {
        let mut s = Counts::default();
        let mut in_correct = false;
        let (mut last_correct, mut last_correct_type) = ("O".to_string(), String::new());
        let (mut last_guessed, mut last_guessed_type) = ("O".to_string(), String::new());
        for line in lines.lines().chain(std::iter::once("")) {
            let mut f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() || f[0] == "-X-" {
                f = vec!["-X-", "O", "O"];
            }
            let (mut guessed, guessed_type) = parse_tag(f.pop().unwrap());
            let (correct, correct_type) = parse_tag(f.pop().unwrap());
            let boundary = f[0] == "-X-";
            if boundary {
                guessed = "O".into();
            }
            let end_c = end_of_chunk(&last_correct, &correct, &last_correct_type, &correct_type);
            let end_g = end_of_chunk(&last_guessed, &guessed, &last_guessed_type, &guessed_type);
            let start_c = start_of_chunk(&last_correct, &correct, &last_correct_type, &correct_type);
            let start_g = start_of_chunk(&last_guessed, &guessed, &last_guessed_type, &guessed_type);
            if in_correct {
                if end_c && end_g && last_guessed_type == last_correct_type {
                    in_correct = false;
                    *s.correct.entry(last_correct_type.clone()).or_default() += 1;
                } else if end_c != end_g || guessed_type != correct_type {
                    in_correct = false;
                }
            }
            if start_c && start_g && guessed_type == correct_type {
                in_correct = true;
            }
            if start_c {
                *s.gold.entry(correct_type.clone()).or_default() += 1;
            }
            if start_g {
                *s.pred.entry(guessed_type.clone()).or_default() += 1;
            }
            last_guessed = guessed;
            last_correct = correct;
            last_guessed_type = guessed_type;
            last_correct_type = correct_type;
        }
        if in_correct {
            *s.correct.entry(last_correct_type).or_default() += 1;
        }
        s
    }
}
