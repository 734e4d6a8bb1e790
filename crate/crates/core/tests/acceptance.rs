//! Acceptance criteria. Each test prints one `[ACn] PASS|FAIL` line.
//!
//! AC1-AC4 need the ATIS / Snips corpora in the three-file layout and long
//! training runs; they are ignored by default and read the corpus locations
//! from `NARTAG_ATIS_DIR` and `NARTAG_SNIPS_DIR`:
//!
//! ```text
//! NARTAG_ATIS_DIR=data/atis NARTAG_SNIPS_DIR=data/snips \
//!     cargo test --release -p nartag --test acceptance -- --ignored --nocapture
//! ```

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use nartag::bench::{measure, measure_latency, BenchOptions, MIN_LONG_COUNT};
use nartag::corpus::{load_split, write_split, Batch, Split, Utterance};
use nartag::crf::{log_partition, path_score, viterbi};
use nartag::encoder::PackedInput;
use nartag::numerics::checkpoint;
use nartag::synth::{generate, SynthConfig};
use nartag::tagcodec::{btag_projection, count_uncoordinated, evaluate, validate_crf_rules, Labels, Tag};
use nartag::trainer::{evaluate_checkpoint, load_checkpoint, save_checkpoint, train, CheckpointMeta, RunReport, TrainConfig};
use nartag::verify::gradient_suite;
use nartag::{EncoderConfig, Mode, Model, Refiner, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// AC1: ATIS test thresholds (fractions).
const ATIS_SLOT_F1: f64 = 0.953;
const ATIS_INTENT_ACC: f64 = 0.962;
const ATIS_SENTENCE_ACC: f64 = 0.852;
// AC2: Snips test thresholds.
const SNIPS_SLOT_F1: f64 = 0.925;
const SNIPS_INTENT_ACC: f64 = 0.965;
const SNIPS_SENTENCE_ACC: f64 = 0.820;
// AC3: mean two-pass minus one-pass sentence accuracy over three seeds.
const TWO_PASS_GAIN: f64 = 0.004;
const GAIN_SEEDS: [u64; 3] = [1, 2, 3];
// AC4: averaging window for the uncoordinated-slot curve.
const CURVE_WINDOW: (usize, usize) = (50, 100);
// AC5: latency ratios.
const LATENCY_RATIO_RANGE: (f64, f64) = (1.5, 2.5);
const LATENCY_TRIALS: usize = 3;
const NULL_PROBE_FRACTION: f64 = 0.05;
// AC6: gradient fidelity.
const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GRAD_BUDGET_SECS: f64 = 60.0;
// ReLU kinks inside the stencil are set aside, but only a sliver may be.
const GRAD_MAX_NONSMOOTH_FRACTION: f64 = 0.01;
// AC7: CRF oracle.
const CRF_INSTANCES: u64 = 200;
const CRF_PARTITION_TOL: f64 = 1e-8;
// AC8: metric oracle.
const METRIC_FILE_PAIRS: u64 = 100;
// AC9: mechanism suite.
const MECHANISM_SEQUENCES: usize = 10_000;

/// Timing criteria must not share the single core with other tests.
static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(ac: &str, pass: bool, detail: &str) {
    // straight to stderr so the line survives libtest's output capture
    let _ = writeln!(std::io::stderr(), "[{ac}] {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{ac} failed: {detail}");
}

fn corpus_dir(var: &str, ac: &str) -> PathBuf {
    match std::env::var_os(var) {
        Some(d) => PathBuf::from(d),
        None => {
            verdict(ac, false, &format!("corpus unavailable: set {var} to a directory with train/dev/test"));
            unreachable!()
        }
    }
}

fn epochs() -> usize {
    std::env::var("NARTAG_EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(100)
}

fn run(data_dir: &Path, preset: &str, mode: Mode, seed: u64) -> RunReport {
    let out = tempfile::tempdir().unwrap().keep();
    let cfg = TrainConfig {
        data_dir: data_dir.to_path_buf(),
        output_dir: out.join(format!("{preset}-{mode}-{seed}")),
        preset: preset.into(),
        mode,
        seed,
        max_epochs: epochs(),
        ..TrainConfig::default()
    };
    train(&cfg).expect("training run")
}

fn test_metrics(report: &RunReport, mode: Mode) -> nartag::MetricsReport {
    let ckpt = report.checkpoint.as_ref().expect("a checkpoint was saved");
    evaluate_checkpoint(ckpt, Split::Test, Some(mode), None).expect("evaluation")
}

fn end_to_end(ac: &str, var: &str, preset: &str, thresholds: (f64, f64, f64)) {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = corpus_dir(var, ac);
    let report = run(&dir, preset, Mode::TwoPass, 1);
    let m = test_metrics(&report, Mode::TwoPass);
    let pass = m.slot_f1 >= thresholds.0 && m.intent_accuracy >= thresholds.1 && m.sentence_accuracy >= thresholds.2;
    verdict(
        ac,
        pass,
        &format!(
            "slot F1 {:.4} (>= {}), intent {:.4} (>= {}), sentence {:.4} (>= {})",
            m.slot_f1, thresholds.0, m.intent_accuracy, thresholds.1, m.sentence_accuracy, thresholds.2
        ),
    );
}

#[test]
#[ignore = "needs the ATIS corpus (NARTAG_ATIS_DIR) and a full training run"]
fn ac1_atis_end_to_end() {
    end_to_end("AC1", "NARTAG_ATIS_DIR", "atis", (ATIS_SLOT_F1, ATIS_INTENT_ACC, ATIS_SENTENCE_ACC));
}

#[test]
#[ignore = "needs the Snips corpus (NARTAG_SNIPS_DIR) and a full training run"]
fn ac2_snips_end_to_end() {
    end_to_end("AC2", "NARTAG_SNIPS_DIR", "snips", (SNIPS_SLOT_F1, SNIPS_INTENT_ACC, SNIPS_SENTENCE_ACC));
}

#[test]
#[ignore = "needs the ATIS corpus (NARTAG_ATIS_DIR) and six full training runs"]
fn ac3_two_pass_gain() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = corpus_dir("NARTAG_ATIS_DIR", "AC3");
    let mut gains = Vec::new();
    for seed in GAIN_SEEDS {
        let two = test_metrics(&run(&dir, "atis", Mode::TwoPass, seed), Mode::TwoPass);
        let one = test_metrics(&run(&dir, "atis", Mode::OnePass, seed), Mode::OnePass);
        gains.push(two.sentence_accuracy - one.sentence_accuracy);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    verdict("AC3", mean >= TWO_PASS_GAIN, &format!("mean sentence gain {mean:.4} over seeds {GAIN_SEEDS:?} (>= {TWO_PASS_GAIN})"));
}

#[test]
#[ignore = "needs the ATIS corpus (NARTAG_ATIS_DIR) and three 100-epoch runs"]
fn ac4_uncoordinated_curve() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = corpus_dir("NARTAG_ATIS_DIR", "AC4");
    let window_mean = |mode: Mode| {
        let r = run(&dir, "atis", mode, 1);
        let counts: Vec<f64> = r
            .epochs
            .iter()
            .filter(|e| (CURVE_WINDOW.0..=CURVE_WINDOW.1).contains(&e.epoch))
            .map(|e| e.test_uncoordinated.expect("test split tracked") as f64)
            .collect();
        assert!(!counts.is_empty(), "run shorter than the averaging window");
        counts.iter().sum::<f64>() / counts.len() as f64
    };
    let (two, one, crf) = (window_mean(Mode::TwoPass), window_mean(Mode::OnePass), window_mean(Mode::OnePassCrf));
    verdict(
        "AC4",
        two < one && two <= crf,
        &format!("mean uncoordinated slots, epochs {CURVE_WINDOW:?}: two_pass {two:.2}, one_pass {one:.2}, one_pass_crf {crf:.2}"),
    );
}

#[test]
fn ac5_latency_ratios() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let data = generate(&SynthConfig::atis_like(), 150, 21);
    let vocab = Vocab::build(&data);
    let cfg = EncoderConfig::atis(vocab.tokens.len(), vocab.tags.len(), vocab.intents.len());
    let model = Model::<f32>::new(cfg, 5).unwrap();
    let opts = BenchOptions {
        warmup: 50,
        repeats: 3,
        threads: 1,
    };
    // best of several trials per mode damps scheduler noise
    let best = |mode: Mode| {
        (0..LATENCY_TRIALS)
            .map(|_| measure_latency(&model, &vocab, &data, mode, opts).unwrap())
            .min_by(|a, b| a.mean_ms.total_cmp(&b.mean_ms))
            .unwrap()
    };
    let one = best(Mode::OnePass);
    let two = best(Mode::TwoPass);
    let crf = best(Mode::OnePassCrf);
    let ratio = two.mean_ms / one.mean_ms;
    let long_ok = [&one, &two, &crf]
        .iter()
        .all(|r| r.long_bucket.as_ref().is_some_and(|b| b.count >= MIN_LONG_COUNT));

    let ids: Vec<Vec<usize>> = data.iter().map(|u| u.tokens.iter().map(|t| vocab.token_id(t)).collect()).collect();
    let lengths: Vec<usize> = data.iter().map(Utterance::len).collect();
    let null = measure("null", &ids, &lengths, opts, |x| x.len()).unwrap();
    let probe_ok = null.mean_ms < NULL_PROBE_FRACTION * one.mean_ms;

    let pass = (LATENCY_RATIO_RANGE.0..=LATENCY_RATIO_RANGE.1).contains(&ratio)
        && one.mean_ms < crf.mean_ms
        && long_ok
        && probe_ok;
    verdict(
        "AC5",
        pass,
        &format!(
            "two_pass/one_pass {ratio:.2} (in {LATENCY_RATIO_RANGE:?}); one_pass {:.3} ms vs one_pass_crf {:.3} ms at {} tags; \
             long bucket {}; null probe {:.5} ms; {}",
            one.mean_ms,
            crf.mean_ms,
            vocab.tags.len(),
            if long_ok { "reported" } else { "missing" },
            null.mean_ms,
            one.hardware
        ),
    );
}

#[test]
fn ac6_gradient_fidelity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let report = gradient_suite(&GRAD_SEEDS, GRAD_TOLERANCE);
    let secs = start.elapsed().as_secs_f64();
    let nonsmooth = report.nonsmooth as f64 / report.checked as f64;
    verdict(
        "AC6",
        report.passed
            && report.max_rel_error < GRAD_TOLERANCE
            && nonsmooth <= GRAD_MAX_NONSMOOTH_FRACTION
            && secs < GRAD_BUDGET_SECS,
        &format!(
            "max relative error {:.2e} over {} coordinates ({} non-smooth), seeds {GRAD_SEEDS:?}, {secs:.1} s",
            report.max_rel_error, report.checked, report.nonsmooth
        ),
    );
}

#[test]
fn ac7_crf_oracle() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut worst = 0.0f64;
    let mut path_mismatches = 0;
    for seed in 0..CRF_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = rng.gen_range(1..=4);
        let t = rng.gen_range(1..=4);
        let (em, tm) = common::random_crf(&mut rng, l, t);
        let z = log_partition(&em, &tm).unwrap();
        worst = worst.max((z - common::brute_log_partition(&em, &tm, l)).abs());
        if path_score(&em, &tm, &viterbi(&em, &tm)) != common::brute_best_score(&em, &tm, l) {
            path_mismatches += 1;
        }
    }
    verdict(
        "AC7",
        worst < CRF_PARTITION_TOL && path_mismatches == 0,
        &format!("{CRF_INSTANCES} instances: max |log Z - brute| {worst:.2e}, viterbi score mismatches {path_mismatches}"),
    );
}

#[test]
fn ac8_metric_oracle() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let mut mismatches = Vec::new();
    for pair in 0..METRIC_FILE_PAIRS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + pair);
        let n = rng.gen_range(5..40);
        let gold: Vec<Utterance> = (0..n)
            .map(|id| {
                let len = rng.gen_range(1..15);
                Utterance {
                    id,
                    tokens: (0..len).map(|k| format!("w{k}")).collect(),
                    slot_tags: common::random_tags(&mut rng, len),
                    intent: "x".into(),
                }
            })
            .collect();
        // predictions: gold with random corruptions
        let pred: Vec<Vec<String>> = gold
            .iter()
            .map(|u| {
                u.slot_tags
                    .iter()
                    .map(|t| if rng.gen_bool(0.3) { common::random_tags(&mut rng, 1).remove(0) } else { t.clone() })
                    .collect()
            })
            .collect();
        let base = dir.path().join(format!("pair{pair}"));
        write_split(&base, Split::Test, &gold).unwrap();
        let pred_path = base.join("pred.txt");
        std::fs::write(&pred_path, pred.iter().map(|p| format!("x\t{}\n", p.join(" "))).collect::<String>()).unwrap();

        // ours: read both files back
        let gold_back = load_split(&base, Split::Test).unwrap();
        let labels: Vec<Labels> = std::fs::read_to_string(&pred_path)
            .unwrap()
            .lines()
            .map(|l| {
                let (intent, tags) = l.split_once('\t').unwrap();
                Labels {
                    intent: intent.into(),
                    slot_tags: tags.split(' ').map(String::from).collect(),
                }
            })
            .collect();
        let ours = evaluate(&gold_back, &labels).unwrap().slot_f1;

        // reference: token lines `word gold pred`, blank line between sentences
        let mut stream = String::new();
        for (u, p) in gold_back.iter().zip(&labels) {
            for ((w, g), q) in u.tokens.iter().zip(&u.slot_tags).zip(&p.slot_tags) {
                stream.push_str(&format!("{w} {g} {q}\n"));
            }
            stream.push('\n');
        }
        let reference = common::conlleval::evaluate(&stream).f1();
        if format!("{:.4}", 100.0 * ours) != format!("{:.4}", 100.0 * reference) {
            mismatches.push((pair, ours, reference));
        }
    }
    verdict(
        "AC8",
        mismatches.is_empty(),
        &format!("{METRIC_FILE_PAIRS} file pairs, slot F1 disagreements at 4 decimals: {mismatches:?}"),
    );
}

#[test]
fn ac9_mechanism_suite() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();

    // projection idempotence and auditor/validator equivalence
    let (mut with_violations, mut total_violations) = (0, 0);
    for i in 0..MECHANISM_SEQUENCES {
        let len = rng.gen_range(1..20);
        let tags = common::random_tags(&mut rng, len);
        let once = btag_projection(&tags).unwrap();
        if btag_projection(&once).unwrap() != once {
            failures.push(format!("projection not idempotent on sequence {i}"));
        }
        let count = count_uncoordinated(&tags).unwrap();
        let violations = validate_crf_rules(&tags).unwrap();
        if count != violations.len() || (count == 0) != violations.is_empty() {
            failures.push(format!("auditor {count} vs validator {} on sequence {i}", violations.len()));
        }
        with_violations += usize::from(count > 0);
        total_violations += count;
    }

    // pass-2 inputs never carry I-tags
    let data = generate(&SynthConfig::atis_like(), 200, 4);
    let vocab = Vocab::build(&data);
    let cfg = EncoderConfig::atis(vocab.tokens.len(), vocab.tags.len(), vocab.intents.len());
    let model = Model::<f32>::new(cfg, 2).unwrap();
    let refiner = Refiner::new(&model, &vocab).unwrap();
    let mut inside_inputs = 0;
    for chunk in data.chunks(32) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        let out = refiner.two_pass_forward(&PackedInput::from_batch(&Batch::encode(&refs, &vocab))).unwrap();
        inside_inputs += out
            .pass2_input
            .tag_ids
            .iter()
            .filter(|&&t| matches!(Tag::parse(vocab.tag_surface(t)), Ok(Tag::Inside(_))))
            .count();
    }
    if inside_inputs > 0 {
        failures.push(format!("{inside_inputs} pass-2 inputs are I-tags"));
    }

    // checkpoint round trip is bit-exact and decodes identically
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.slrf");
    let meta = CheckpointMeta {
        encoder: model.config.clone(),
        vocab: vocab.clone(),
        mode: Mode::TwoPass,
        data_dir: dir.path().into(),
    };
    save_checkpoint(&path, &model, &meta).unwrap();
    let (back, back_meta) = load_checkpoint(&path).unwrap();
    if checkpoint::to_bytes(&back.params) != std::fs::read(&path).unwrap()
        || checkpoint::to_bytes(&back.params) != checkpoint::to_bytes(&model.params)
        || back_meta != meta
    {
        failures.push("checkpoint round trip is not bit-exact".into());
    }
    let before = refiner.decode_utterances(&data, &vocab, Mode::TwoPass, 32).unwrap();
    let after = Refiner::new(&back, &vocab).unwrap().decode_utterances(&data, &vocab, Mode::TwoPass, 32).unwrap();
    if before != after {
        failures.push("reloaded model decodes differently".into());
    }

    verdict(
        "AC9",
        failures.is_empty() && with_violations > 0,
        &format!(
            "{MECHANISM_SEQUENCES} random sequences ({with_violations} ill-formed, {total_violations} violations), \
             {} decoded utterances; failures: {failures:?}",
            data.len()
        ),
    );
}
