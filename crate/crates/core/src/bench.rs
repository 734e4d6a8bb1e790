//! Per-utterance decode latency, measured one utterance at a time on a single
//! thread.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, Vocab};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::refine::{Mode, Refiner};

pub const LONG_UTTERANCE: usize = 12;
pub const MIN_LONG_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repeats: usize,
    /// Must be 1; anything else is refused.
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 50,
            repeats: 5,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongBucket {
    pub min_len: usize,
    pub count: usize,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: String,
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Absent when fewer than [`MIN_LONG_COUNT`] utterances are long enough.
    pub long_bucket: Option<LongBucket>,
    pub reference: Option<String>,
    pub speedup: Option<f64>,
    pub long_speedup: Option<f64>,
    pub warmup: usize,
    pub repeats: usize,
    pub hardware: String,
}

/// CPU model, core count and target, for labelling timings.
pub fn hardware_note() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{cpu}; {cores} logical cores available; 1 thread used; {}-{}",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Times `decode` on each input. The first `warmup` calls (cycling over the
/// inputs) are discarded; then each input is decoded `repeats` times and its
/// latency is the mean of those runs. Only the call itself is timed.
pub fn measure<T, R>(
    label: &str,
    inputs: &[T],
    lengths: &[usize],
    opts: BenchOptions,
    mut decode: impl FnMut(&T) -> R,
) -> Result<LatencyReport> {
    if opts.threads != 1 {
        return Err(Error::Bench(format!("timing runs on exactly one thread, {} requested", opts.threads)));
    }
    if inputs.is_empty() {
        return Err(Error::Bench("no utterances to time".into()));
    }
    if opts.repeats == 0 {
        return Err(Error::Bench("repeats must be at least 1".into()));
    }
    assert_eq!(inputs.len(), lengths.len(), "one length per input");
    for i in 0..opts.warmup {
        black_box(decode(&inputs[i % inputs.len()]));
    }
    let mut per_utt = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mut total = 0.0;
        for _ in 0..opts.repeats {
            let start = Instant::now();
            black_box(decode(black_box(x)));
            total += start.elapsed().as_secs_f64();
        }
        per_utt.push(total * 1e3 / opts.repeats as f64);
    }
    let long: Vec<f64> = per_utt
        .iter()
        .zip(lengths)
        .filter(|(_, &l)| l >= LONG_UTTERANCE)
        .map(|(&t, _)| t)
        .collect();
    let mean = per_utt.iter().sum::<f64>() / per_utt.len() as f64;
    let mut sorted = per_utt;
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        mode: label.to_string(),
        count: sorted.len(),
        mean_ms: mean,
        median_ms: median(&sorted),
        p95_ms: percentile(&sorted, 0.95),
        long_bucket: (long.len() >= MIN_LONG_COUNT).then(|| LongBucket {
            min_len: LONG_UTTERANCE,
            count: long.len(),
            mean_ms: long.iter().sum::<f64>() / long.len() as f64,
        }),
        reference: None,
        speedup: None,
        long_speedup: None,
        warmup: opts.warmup,
        repeats: opts.repeats,
        hardware: hardware_note(),
    })
}

/// Decode latency of `model` in `mode` with batch size 1. Tokens are mapped to
/// ids before timing starts.
pub fn measure_latency<F: Real>(
    model: &Model<F>,
    vocab: &Vocab,
    utterances: &[Utterance],
    mode: Mode,
    opts: BenchOptions,
) -> Result<LatencyReport> {
    let refiner = Refiner::new(model, vocab)?;
    let ids: Vec<Vec<usize>> = utterances
        .iter()
        .map(|u| u.tokens.iter().map(|t| vocab.token_id(t)).collect())
        .collect();
    let lengths: Vec<usize> = utterances.iter().map(Utterance::len).collect();
    let mut failure = None;
    let report = measure(mode.as_str(), &ids, &lengths, opts, |x| match refiner.decode_single(x, mode) {
        Ok(p) => Some(p),
        Err(e) => {
            failure.get_or_insert(e);
            None
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub mode: String,
    pub mean_ms: f64,
    pub speedup: f64,
    pub long_mean_ms: Option<f64>,
    pub long_speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupTable {
    pub reference: String,
    pub rows: Vec<SpeedupRow>,
}

/// Fills each report's speedup against `reference` (reference mean over the
/// report's mean) and returns the table, one row per report.
pub fn speedup_table(reports: &mut [LatencyReport], reference: &str) -> Result<SpeedupTable> {
    let base = reports
        .iter()
        .find(|r| r.mode == reference)
        .cloned()
        .ok_or_else(|| Error::Bench(format!("reference mode {reference:?} not among the reports")))?;
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports.iter_mut() {
        r.reference = Some(reference.to_string());
        r.speedup = Some(base.mean_ms / r.mean_ms);
        r.long_speedup = match (&base.long_bucket, &r.long_bucket) {
            (Some(b), Some(m)) => Some(b.mean_ms / m.mean_ms),
            _ => None,
        };
        rows.push(SpeedupRow {
            mode: r.mode.clone(),
            mean_ms: r.mean_ms,
            speedup: r.speedup.unwrap(),
            long_mean_ms: r.long_bucket.as_ref().map(|b| b.mean_ms),
            long_speedup: r.long_speedup,
        });
    }
    Ok(SpeedupTable {
        reference: reference.to_string(),
        rows,
    })
}

impl SpeedupTable {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.mode.len()).max().unwrap_or(4).max(4);
        let mut s = format!(
            "{:<width$}  {:>12}  {:>8}  {:>16}  {:>10}\n",
            "mode", "latency(ms)", "speedup", "len>=12 (ms)", "speedup"
        );
        for r in &self.rows {
            let long = r.long_mean_ms.map_or("-".to_string(), |v| format!("{v:.3}"));
            let ls = r.long_speedup.map_or("-".to_string(), |v| format!("x{v:.2}"));
            let _ = writeln!(
                s,
                "{:<width$}  {:>12.3}  {:>8}  {:>16}  {:>10}",
                r.mode,
                r.mean_ms,
                format!("x{:.2}", r.speedup),
                long,
                ls
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,latency_ms,speedup,long_latency_ms,long_speedup\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{}",
                r.mode,
                r.mean_ms,
                r.speedup,
                opt(r.long_mean_ms),
                opt(r.long_speedup)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spin(n: u64) -> u64 {
        (0..n).fold(0u64, |a, b| black_box(a.wrapping_add(b * b)))
    }

    #[test]
    fn refuses_parallel_and_empty_runs() {
        let opts = BenchOptions {
            threads: 4,
            ..Default::default()
        };
        assert!(measure("x", &[1u64], &[1], opts, |&n| spin(n)).is_err());
        assert!(measure("x", &[] as &[u64], &[], BenchOptions::default(), |&n| spin(n)).is_err());
    }

    #[test]
    fn statistics_are_ordered_and_positive() {
        let inputs: Vec<u64> = (1..=40).map(|i| i * 2000).collect();
        let lengths: Vec<usize> = (1..=40).collect();
        let r = measure("spin", &inputs, &lengths, BenchOptions { warmup: 5, repeats: 2, threads: 1 }, |&n| spin(n)).unwrap();
        assert_eq!(r.count, 40);
        assert!(r.mean_ms > 0.0 && r.median_ms > 0.0);
        assert!(r.median_ms <= r.p95_ms);
        let b = r.long_bucket.unwrap();
        assert_eq!((b.min_len, b.count), (12, 29));
        assert!(b.mean_ms > r.median_ms * 0.5);
    }

    #[test]
    fn long_bucket_needs_ten_utterances() {
        let inputs = vec![1000u64; 12];
        let mut lengths = vec![3usize; 12];
        for l in lengths.iter_mut().take(9) {
            *l = 15;
        }
        let r = measure("spin", &inputs, &lengths, BenchOptions::default(), |&n| spin(n)).unwrap();
        assert!(r.long_bucket.is_none());
        lengths[9] = 12;
        let r = measure("spin", &inputs, &lengths, BenchOptions::default(), |&n| spin(n)).unwrap();
        assert_eq!(r.long_bucket.unwrap().count, 10);
    }

    fn report(mode: &str, mean: f64) -> LatencyReport {
        LatencyReport {
            mode: mode.into(),
            count: 1,
            mean_ms: mean,
            median_ms: mean,
            p95_ms: mean,
            long_bucket: None,
            reference: None,
            speedup: None,
            long_speedup: None,
            warmup: 0,
            repeats: 1,
            hardware: String::new(),
        }
    }

    #[test]
    fn speedups_against_reference() {
        let mut rs = vec![report("one_pass", 1.5), report("one_pass_crf", 6.0), report("two_pass", 3.0)];
        let t = speedup_table(&mut rs, "one_pass_crf").unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[1].speedup, 1.0);
        assert_eq!(t.rows[0].speedup, 4.0);
        assert_eq!(rs[2].speedup, Some(2.0));
        assert!(t.to_text().lines().count() == 4);
        assert!(t.to_csv().starts_with("mode,latency_ms,speedup"));
        assert!(speedup_table(&mut rs, "missing").is_err());
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(median(&v), 10.5);
        assert_eq!(median(&[3.0]), 3.0);
    }
}
