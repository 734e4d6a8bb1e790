//! Finite-difference gradient checks on small models, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crf::{self, TransitionMatrix};
use crate::encoder::{EncoderConfig, Model, PackedInput, SlotLoss};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor};

/// The smallest encoder exercised by the checks: one layer, two heads,
/// width 8, ten token ids, four tags, three intents.
pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        dropout: 0.0,
        ..EncoderConfig::new(1, 2, 8, 10, 4, 3)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
    pub checked: usize,
    /// Coordinates set aside because a kink fell inside the stencil.
    pub nonsmooth: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn full_grads(grads: Vec<Option<Tensor<f64>>>, store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    grads
        .into_iter()
        .zip(store.params())
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect()
}

/// Joint loss of the tiny encoder on one random utterance of length 3.
pub fn check_encoder(seed: u64, slot_loss: SlotLoss, opts: GradCheckOptions) -> GradCheckReport {
    let cfg = tiny_config();
    let mut model = Model::<f64>::new(cfg.clone(), seed).expect("tiny config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tid = model.transitions_id();
    for v in model.params.value_mut(tid).data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let tokens: Vec<usize> = (0..3).map(|_| rng.gen_range(3..cfg.vocab_size)).collect();
    let tags: Vec<usize> = (0..3).map(|_| rng.gen_range(0..cfg.num_tags)).collect();
    let input = PackedInput::single(&tokens, 0).with_token_tags(&[0, rng.gen_range(0..cfg.num_tags), 0]);
    let intent = rng.gen_range(0..cfg.num_intents);
    let gold: Vec<Option<usize>> = tags.into_iter().map(Some).collect();
    let loss_fn = |store: &ParamStore<f64>| {
        let m = Model::from_params(cfg.clone(), store.clone()).expect("same layout");
        let mut tape = Tape::new(&m.params);
        let f = m.forward(&mut tape, &input, None).expect("ids in range");
        let l = m
            .joint_loss(&mut tape, &f, &input, &[Some(intent)], &gold, slot_loss)
            .expect("shapes match");
        let g = tape.backward(l);
        (tape.scalar(l), full_grads(g, store))
    };
    grad_check(&model.params, loss_fn, opts)
}

/// Standalone CRF negative log-likelihood with random emissions,
/// transitions and gold path (`l ≤ 4`, `|T| ≤ 4`).
pub fn check_crf(seed: u64, opts: GradCheckOptions) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.gen_range(1..=4);
    let t = rng.gen_range(2..=4);
    let mut store = ParamStore::new();
    let em = (0..l * t).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let tr = (0..(t + 2) * (t + 2)).map(|_| rng.gen_range(-2.0..2.0)).collect();
    store.insert("emissions", Tensor::matrix(l, t, em)).expect("fresh store");
    store
        .insert("transitions", Tensor::matrix(t + 2, t + 2, tr))
        .expect("fresh store");
    let gold: Vec<usize> = (0..l).map(|_| rng.gen_range(0..t)).collect();
    let loss_fn = |s: &ParamStore<f64>| {
        let tm = TransitionMatrix::from_tensor(s.value(1).clone()).expect("square");
        let (nll, de, dt) = crf::crf_nll(s.value(0).data(), &tm, &gold).expect("valid input");
        (nll, vec![Tensor::matrix(l, t, de), Tensor::matrix(t + 2, t + 2, dt)])
    };
    grad_check(&store, loss_fn, opts)
}

/// Encoder with cross-entropy slots, encoder with CRF slots, and the
/// standalone CRF, once per seed.
pub fn gradient_suite(seeds: &[u64], tolerance: f64) -> SuiteReport {
    let opts = GradCheckOptions {
        tolerance,
        ..Default::default()
    };
    let mut checks = Vec::new();
    for &seed in seeds {
        let o = GradCheckOptions { seed, ..opts };
        checks.push(CheckResult {
            name: "encoder_joint_loss".into(),
            seed,
            report: check_encoder(seed, SlotLoss::CrossEntropy, o),
        });
        checks.push(CheckResult {
            name: "encoder_crf_loss".into(),
            seed,
            report: check_encoder(seed, SlotLoss::Crf, o),
        });
        checks.push(CheckResult {
            name: "crf_nll".into(),
            seed,
            report: check_crf(seed, o),
        });
    }
    let max_rel_error = checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.report.passed());
    SuiteReport {
        tolerance,
        checked: checks.iter().map(|c| c.report.checked).sum(),
        nonsmooth: checks.iter().map(|c| c.report.nonsmooth).sum(),
        checks,
        max_rel_error,
        passed,
    }
}
