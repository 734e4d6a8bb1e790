//! Linear-chain CRF over slot emissions with virtual START/STOP states.
//!
//! Transition scores are a `(T+2) × (T+2)` row-major matrix where row `a`,
//! column `b` scores the move `a → b`. Index `T` is START and `T+1` is STOP.
//! Emissions are `l × T` row-major.

use crate::error::{Error, Result};
use crate::numerics::ops::log_sum_exp;
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<F> {
    num_tags: usize,
    scores: Tensor<F>,
}

impl<F: Real> TransitionMatrix<F> {
    pub fn zeros(num_tags: usize) -> Self {
        let s = num_tags + 2;
        TransitionMatrix {
            num_tags,
            scores: Tensor::zeros(&[s, s]),
        }
    }

    pub fn from_tensor(scores: Tensor<F>) -> Result<Self> {
        let shape = scores.shape();
        if shape.len() != 2 || shape[0] != shape[1] || shape[0] < 3 {
            return Err(Error::Shape(format!("transition matrix shape {shape:?}")));
        }
        Ok(TransitionMatrix {
            num_tags: shape[0] - 2,
            scores,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn start(&self) -> usize {
        self.num_tags
    }

    pub fn stop(&self) -> usize {
        self.num_tags + 1
    }

    pub fn get(&self, from: usize, to: usize) -> F {
        self.scores.data()[from * (self.num_tags + 2) + to]
    }

    pub fn set(&mut self, from: usize, to: usize, v: F) {
        let s = self.num_tags + 2;
        self.scores.data_mut()[from * s + to] = v;
    }

    pub fn as_slice(&self) -> &[F] {
        self.scores.data()
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.scores
    }
}

fn seq_len<F>(emissions: &[F], num_tags: usize) -> usize {
    assert!(num_tags > 0 && emissions.len().is_multiple_of(num_tags), "emission shape");
    emissions.len() / num_tags
}

/// Score of one tag path including START/STOP transitions.
pub fn path_score<F: Real>(emissions: &[F], trans: &TransitionMatrix<F>, path: &[usize]) -> F {
    let t = trans.num_tags();
    let l = seq_len(emissions, t);
    assert_eq!(path.len(), l);
    let mut score = F::zero();
    let mut prev = trans.start();
    for (i, &y) in path.iter().enumerate() {
        score += trans.get(prev, y) + emissions[i * t + y];
        prev = y;
    }
    score + trans.get(prev, trans.stop())
}

fn forward_table<F: Real>(emissions: &[F], trans: &TransitionMatrix<F>) -> (Vec<F>, F) {
    let t = trans.num_tags();
    let s = t + 2;
    let l = seq_len(emissions, t);
    let tr = trans.as_slice();
    let mut alpha = vec![F::zero(); l * t];
    for y in 0..t {
        alpha[y] = tr[trans.start() * s + y] + emissions[y];
    }
    let mut buf = vec![F::zero(); t];
    for i in 1..l {
        for y in 0..t {
            for (p, b) in buf.iter_mut().enumerate() {
                *b = alpha[(i - 1) * t + p] + tr[p * s + y];
            }
            alpha[i * t + y] = emissions[i * t + y] + log_sum_exp(&buf);
        }
    }
    for (y, b) in buf.iter_mut().enumerate() {
        *b = alpha[(l - 1) * t + y] + tr[y * s + trans.stop()];
    }
    let log_z = log_sum_exp(&buf);
    (alpha, log_z)
}

/// `log Σ_paths exp(score(path))` by the forward recursion in log space.
pub fn log_partition<F: Real>(emissions: &[F], trans: &TransitionMatrix<F>) -> Result<F> {
    if emissions.is_empty() {
        return Err(Error::Shape("log_partition needs at least one position".into()));
    }
    Ok(forward_table(emissions, trans).1)
}

/// Gradients of the log partition: per-position tag marginals (`l × T`) and
/// expected transition counts (`(T+2) × (T+2)`).
pub struct Marginals<F> {
    pub log_partition: F,
    pub emissions: Vec<F>,
    pub transitions: Vec<F>,
}

pub fn marginals<F: Real>(emissions: &[F], trans: &TransitionMatrix<F>) -> Marginals<F> {
    let t = trans.num_tags();
    let s = t + 2;
    let l = seq_len(emissions, t);
    let tr = trans.as_slice();
    let (alpha, log_z) = forward_table(emissions, trans);
    let mut beta = vec![F::zero(); l * t];
    for y in 0..t {
        beta[(l - 1) * t + y] = tr[y * s + trans.stop()];
    }
    let mut buf = vec![F::zero(); t];
    for i in (0..l.saturating_sub(1)).rev() {
        for y in 0..t {
            for (n, b) in buf.iter_mut().enumerate() {
                *b = tr[y * s + n] + emissions[(i + 1) * t + n] + beta[(i + 1) * t + n];
            }
            beta[i * t + y] = log_sum_exp(&buf);
        }
    }
    let mut node = vec![F::zero(); l * t];
    for (k, m) in node.iter_mut().enumerate() {
        *m = (alpha[k] + beta[k] - log_z).exp();
    }
    let mut pair = vec![F::zero(); s * s];
    for y in 0..t {
        pair[trans.start() * s + y] = node[y];
        pair[y * s + trans.stop()] = node[(l - 1) * t + y];
    }
    for i in 1..l {
        for a in 0..t {
            let base = alpha[(i - 1) * t + a] - log_z;
            for b in 0..t {
                pair[a * s + b] += (base + tr[a * s + b] + emissions[i * t + b] + beta[i * t + b]).exp();
            }
        }
    }
    Marginals {
        log_partition: log_z,
        emissions: node,
        transitions: pair,
    }
}

/// Negative log-likelihood of `gold` with gradients w.r.t. emissions and
/// transitions.
pub fn crf_nll<F: Real>(
    emissions: &[F],
    trans: &TransitionMatrix<F>,
    gold: &[usize],
) -> Result<(F, Vec<F>, Vec<F>)> {
    let t = trans.num_tags();
    if emissions.is_empty() || gold.len() * t != emissions.len() {
        return Err(Error::Shape(format!(
            "crf_nll: {} emissions for {} gold tags over {t} classes",
            emissions.len(),
            gold.len()
        )));
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= t) {
        return Err(Error::IdOutOfRange {
            what: "gold tag",
            id: bad,
            size: t,
        });
    }
    let m = marginals(emissions, trans);
    let nll = m.log_partition - path_score(emissions, trans, gold);
    let mut d_em = m.emissions;
    let mut d_tr = m.transitions;
    let s = t + 2;
    let mut prev = trans.start();
    for (i, &y) in gold.iter().enumerate() {
        d_em[i * t + y] -= F::one();
        d_tr[prev * s + y] -= F::one();
        prev = y;
    }
    d_tr[prev * s + trans.stop()] -= F::one();
    Ok((nll, d_em, d_tr))
}

/// Highest-scoring tag path. Ties go to the lowest tag id at every step.
pub fn viterbi<F: Real>(emissions: &[F], trans: &TransitionMatrix<F>) -> Vec<usize> {
    viterbi_with_score(emissions, trans).0
}

pub fn viterbi_with_score<F: Real>(emissions: &[F], trans: &TransitionMatrix<F>) -> (Vec<usize>, F) {
    let t = trans.num_tags();
    let s = t + 2;
    let l = seq_len(emissions, t);
    if l == 0 {
        return (Vec::new(), trans.get(trans.start(), trans.stop()));
    }
    let tr = trans.as_slice();
    let mut delta: Vec<F> = (0..t).map(|y| tr[trans.start() * s + y] + emissions[y]).collect();
    let mut next = vec![F::zero(); t];
    let mut back = vec![0u32; l * t];
    for i in 1..l {
        next.fill(F::neg_infinity());
        let bp = &mut back[i * t..(i + 1) * t];
        for (p, &dp) in delta.iter().enumerate() {
            let row = &tr[p * s..p * s + t];
            for y in 0..t {
                let cand = dp + row[y];
                if cand > next[y] {
                    next[y] = cand;
                    bp[y] = p as u32;
                }
            }
        }
        for y in 0..t {
            next[y] += emissions[i * t + y];
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut best = 0;
    let mut best_score = F::neg_infinity();
    for (y, &d) in delta.iter().enumerate() {
        let cand = d + tr[y * s + trans.stop()];
        if cand > best_score {
            best_score = cand;
            best = y;
        }
    }
    let mut path = vec![0usize; l];
    path[l - 1] = best;
    for i in (1..l).rev() {
        path[i - 1] = back[i * t + path[i]] as usize;
    }
    (path, best_score)
}
