//! Training loop, model selection, checkpoints and run reports.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Entry;
use crate::corpus::{load_split, make_batches, Split, Utterance, Vocab};
use crate::encoder::{EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, AdamConfig};
use crate::refine::{train_step, Mode, Prediction, Refiner, StepOptions};
use crate::tagcodec::{count_uncoordinated, evaluate, Labels, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    SentenceAccuracy,
    SlotF1,
    IntentAccuracy,
}

impl Selection {
    pub fn score(&self, m: &MetricsReport) -> f64 {
        match self {
            Selection::SentenceAccuracy => m.sentence_accuracy,
            Selection::SlotF1 => m.slot_f1,
            Selection::IntentAccuracy => m.intent_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// `atis` or `snips`; sets layers, heads and hidden size.
    pub preset: String,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub hidden_size: Option<usize>,
    pub relative_clip_distance: usize,
    pub relative_values: bool,
    pub dropout: f64,
    pub mode: Mode,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub selection: Selection,
    pub pass1_loss: bool,
    pub teacher_forcing: bool,
    /// Decode the test split each epoch to log its uncoordinated-slot count.
    pub track_test: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: PathBuf::from("data/atis"),
            output_dir: PathBuf::from("runs/atis"),
            preset: "atis".into(),
            num_layers: None,
            num_heads: None,
            hidden_size: None,
            relative_clip_distance: 8,
            relative_values: true,
            dropout: 0.1,
            mode: Mode::TwoPass,
            batch_size: 32,
            lr: 1e-3,
            max_epochs: 100,
            seed: 1,
            selection: Selection::SentenceAccuracy,
            pass1_loss: true,
            teacher_forcing: false,
            track_test: true,
            eval_batch_size: 64,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "data_dir",
        "output_dir",
        "preset",
        "num_layers",
        "num_heads",
        "hidden_size",
        "relative_clip_distance",
        "relative_values",
        "dropout",
        "mode",
        "batch_size",
        "lr",
        "max_epochs",
        "seed",
        "selection",
        "pass1_loss",
        "teacher_forcing",
        "track_test",
        "eval_batch_size",
    ];

    /// Sets one field by name. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = value.into(),
            "output_dir" => self.output_dir = value.into(),
            "preset" => {
                EncoderConfig::preset(value)?;
                self.preset = value.to_string();
            }
            "num_layers" => self.num_layers = Some(parse_value(key, value)?),
            "num_heads" => self.num_heads = Some(parse_value(key, value)?),
            "hidden_size" => self.hidden_size = Some(parse_value(key, value)?),
            "relative_clip_distance" => self.relative_clip_distance = parse_value(key, value)?,
            "relative_values" => self.relative_values = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "mode" => self.mode = value.parse()?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "selection" => {
                self.selection = serde_json::from_value(serde_json::Value::String(value.to_string()))
                    .map_err(|_| Error::Config(format!("invalid value {value:?} for selection")))?
            }
            "pass1_loss" => self.pass1_loss = parse_value(key, value)?,
            "teacher_forcing" => self.teacher_forcing = parse_value(key, value)?,
            "track_test" => self.track_test = parse_value(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, entries: &[Entry]) -> Result<()> {
        for e in entries {
            self.set(&e.key, &e.value)
                .map_err(|err| Error::Config(format!("line {}: {err}", e.line)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.mode == Mode::OnePassCrf && self.teacher_forcing {
            return Err(Error::Config("teacher_forcing only applies to two_pass".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab: &Vocab) -> Result<EncoderConfig> {
        let (l, h, d) = EncoderConfig::preset(&self.preset)?;
        let hidden = self.hidden_size.unwrap_or(d);
        let cfg = EncoderConfig {
            relative_clip_distance: self.relative_clip_distance,
            relative_values: self.relative_values,
            dropout: self.dropout,
            ..EncoderConfig::new(
                self.num_layers.unwrap_or(l),
                self.num_heads.unwrap_or(h),
                hidden,
                vocab.tokens.len(),
                vocab.tags.len(),
                vocab.intents.len(),
            )
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            mode: self.mode,
            pass1_loss: self.pass1_loss,
            teacher_forcing: self.teacher_forcing,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: MetricsReport,
    pub test_uncoordinated: Option<usize>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub encoder: EncoderConfig,
    pub num_parameters: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev: MetricsReport,
    pub checkpoint: Option<PathBuf>,
}

/// Everything needed besides the parameters to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub vocab: Vocab,
    pub mode: Mode,
    pub data_dir: PathBuf,
}

fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the parameters to `path` and the metadata to `<path>.json`.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::save(&model.params, path)?;
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(&mp, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let mp = meta_path(path);
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&mp).map_err(|e| Error::io(&mp, e))?)?;
    let params = checkpoint::load(path)?;
    let model = Model::from_params(meta.encoder.clone(), params)?;
    if model.config.vocab_size != meta.vocab.tokens.len()
        || model.config.num_tags != meta.vocab.tags.len()
        || model.config.num_intents != meta.vocab.intents.len()
    {
        return Err(Error::Checkpoint("vocabulary does not match model shapes".into()));
    }
    Ok((model, meta))
}

pub fn predictions_to_labels(preds: &[Prediction], vocab: &Vocab) -> Vec<Labels> {
    preds.iter().map(|p| p.to_labels(vocab)).collect()
}

/// Decodes `data` and scores it against its gold labels.
pub fn evaluate_model(
    model: &Model<f32>,
    vocab: &Vocab,
    data: &[Utterance],
    mode: Mode,
    batch_size: usize,
) -> Result<MetricsReport> {
    let preds = Refiner::new(model, vocab)?.decode_utterances(data, vocab, mode, batch_size)?;
    evaluate(data, &predictions_to_labels(&preds, vocab))
}

fn uncoordinated_total(model: &Model<f32>, vocab: &Vocab, data: &[Utterance], mode: Mode, batch_size: usize) -> Result<usize> {
    let preds = Refiner::new(model, vocab)?.decode_utterances(data, vocab, mode, batch_size)?;
    predictions_to_labels(&preds, vocab)
        .iter()
        .map(|l| count_uncoordinated(&l.slot_tags))
        .sum()
}

/// Metrics of a saved checkpoint on a split of its data directory (or of
/// `data_dir` when given). `mode` defaults to the training mode.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    split: Split,
    mode: Option<Mode>,
    data_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let (model, meta) = load_checkpoint(ckpt)?;
    let dir = data_dir.unwrap_or(&meta.data_dir);
    let data = load_split(dir, split)?;
    evaluate_model(&model, &meta.vocab, &data, mode.unwrap_or(meta.mode), 64)
}

/// Trains on in-memory splits. Writes the best checkpoint to
/// `output_dir/model.slrf` when `save` is set.
pub fn train_on(
    config: &TrainConfig,
    train: &[Utterance],
    dev: &[Utterance],
    test: Option<&[Utterance]>,
    save: bool,
) -> Result<RunReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let vocab = Vocab::build(train);
    let enc = config.encoder_config(&vocab)?;
    let mut model = Model::<f32>::new(enc.clone(), config.seed)?;
    let projection = vocab.projection_table();
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let opts = config.step_options();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d201);
    let ckpt_path = config.output_dir.join("model.slrf");
    let meta = CheckpointMeta {
        encoder: enc.clone(),
        vocab: vocab.clone(),
        mode: config.mode,
        data_dir: config.data_dir.clone(),
    };
    let mut report = RunReport {
        config: config.clone(),
        encoder: enc,
        num_parameters: model.params.num_scalars(),
        epochs: Vec::with_capacity(config.max_epochs),
        best_epoch: 0,
        best_dev: MetricsReport::default(),
        checkpoint: None,
    };
    let mut best_score = f64::NEG_INFINITY;
    let mut step = 0u64;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let shuffle = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for batch in make_batches(train, &vocab, config.batch_size, Some(shuffle)) {
            step += 1;
            let loss = train_step(&mut model, &projection, vocab.outside_id(), &batch, &opts, &adam, step, &mut rng)?;
            if !loss.total.is_finite() || !model.params.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: loss.total,
                });
            }
            loss_sum += loss.total;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let dev_metrics = evaluate_model(&model, &vocab, dev, config.mode, config.eval_batch_size)?;
        let test_uncoordinated = match test.filter(|_| config.track_test) {
            Some(t) => Some(uncoordinated_total(&model, &vocab, t, config.mode, config.eval_batch_size)?),
            None => None,
        };
        let score = config.selection.score(&dev_metrics);
        if score > best_score {
            best_score = score;
            report.best_epoch = epoch;
            report.best_dev = dev_metrics.clone();
            if save {
                save_checkpoint(&ckpt_path, &model, &meta)?;
                report.checkpoint = Some(ckpt_path.clone());
            }
        }
        log::info!(
            "{} epoch {epoch}: loss {train_loss:.4} dev slot_f1 {:.4} intent {:.4} sentence {:.4}",
            config.mode,
            dev_metrics.slot_f1,
            dev_metrics.intent_accuracy,
            dev_metrics.sentence_accuracy
        );
        report.epochs.push(EpochLog {
            epoch,
            train_loss,
            dev: dev_metrics,
            test_uncoordinated,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

/// Loads `train`, `dev` and (if present) `test` from `config.data_dir`,
/// trains, and writes `run_report.json` and `curve.csv` to `output_dir`.
pub fn train(config: &TrainConfig) -> Result<RunReport> {
    let train_data = load_split(&config.data_dir, Split::Train)?;
    let dev = load_split(&config.data_dir, Split::Dev)?;
    let test = if config.data_dir.join(Split::Test.as_str()).exists() {
        Some(load_split(&config.data_dir, Split::Test)?)
    } else {
        None
    };
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let report = train_on(config, &train_data, &dev, test.as_deref(), true)?;
    write_run_report(&report, &config.output_dir.join("run_report.json"))?;
    log_uncoordinated_curve(std::slice::from_ref(&report), &config.output_dir.join("curve.csv"))?;
    Ok(report)
}

pub fn write_run_report(report: &RunReport, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(path, e))
}

pub fn read_run_report(path: &Path) -> Result<RunReport> {
    Ok(serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?)
}

/// `mode,epoch,count` rows for every epoch with a logged test count.
pub fn curve_rows(reports: &[RunReport]) -> Vec<(Mode, usize, usize)> {
    reports
        .iter()
        .flat_map(|r| {
            r.epochs
                .iter()
                .filter_map(move |e| e.test_uncoordinated.map(|c| (r.config.mode, e.epoch, c)))
        })
        .collect()
}

pub fn log_uncoordinated_curve(reports: &[RunReport], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("mode,epoch,count\n");
    for (mode, epoch, count) in curve_rows(reports) {
        body.push_str(&format!("{mode},{epoch},{count}\n"));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: usize, words: &str, tags: &str, intent: &str) -> Utterance {
        Utterance {
            id,
            tokens: words.split(' ').map(String::from).collect(),
            slot_tags: tags.split(' ').map(String::from).collect(),
            intent: intent.into(),
        }
    }

    pub(crate) fn toy() -> Vec<Utterance> {
        vec![
            utt(0, "fly to boston", "O O B-city", "flight"),
            utt(1, "fare from new york", "O O B-city I-city", "fare"),
            utt(2, "show flights to denver tomorrow", "O O O B-city B-date", "flight"),
            utt(3, "boston to denver", "B-city O B-city", "flight"),
            utt(4, "cheapest fare to new york", "B-cost O O B-city I-city", "fare"),
            utt(5, "what airline flies to dallas", "O O O O B-city", "airline"),
            utt(6, "airline serving boston tomorrow", "O O B-city B-date", "airline"),
            utt(7, "fares on monday", "O O B-date", "fare"),
            utt(8, "flights from dallas", "O O B-city", "flight"),
            utt(9, "which airline goes to denver", "O O O O B-city", "airline"),
        ]
    }

    fn tiny(mode: Mode, epochs: usize) -> TrainConfig {
        TrainConfig {
            num_layers: Some(1),
            num_heads: Some(2),
            hidden_size: Some(16),
            dropout: 0.0,
            mode,
            batch_size: 4,
            lr: 0.01,
            max_epochs: epochs,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn set_rejects_unknown_keys_and_values() {
        let mut c = TrainConfig::default();
        c.set("mode", "one_pass_crf").unwrap();
        assert_eq!(c.mode, Mode::OnePassCrf);
        c.set("selection", "slot_f1").unwrap();
        assert_eq!(c.selection, Selection::SlotF1);
        assert!(c.set("lr_rate", "1").is_err());
        assert!(c.set("batch_size", "many").is_err());
        assert!(c.set("preset", "geo").is_err());
        for k in TrainConfig::KEYS {
            assert!(!matches!(c.clone().set(k, "?"), Err(Error::Config(m)) if m.contains("unknown key")));
        }
    }

    #[test]
    fn presets_drive_encoder_shape() {
        let vocab = Vocab::build(&toy());
        let c = TrainConfig::default();
        let e = c.encoder_config(&vocab).unwrap();
        assert_eq!((e.num_layers, e.num_heads, e.hidden_size), (2, 8, 64));
        let c = TrainConfig {
            preset: "snips".into(),
            ..TrainConfig::default()
        };
        let e = c.encoder_config(&vocab).unwrap();
        assert_eq!((e.num_layers, e.num_heads, e.hidden_size, e.feed_forward_size), (4, 16, 96, 384));
        assert_eq!((c.batch_size, c.lr), (32, 1e-3));
    }

    #[test]
    fn loss_decreases_over_two_epochs() {
        let data = toy();
        let r = train_on(&tiny(Mode::TwoPass, 2), &data, &data, None, false).unwrap();
        assert_eq!(r.epochs.len(), 2);
        assert!(r.epochs[1].train_loss < r.epochs[0].train_loss);
    }

    #[test]
    fn memorizes_eight_utterances() {
        let data: Vec<Utterance> = toy().into_iter().take(8).collect();
        let r = train_on(&tiny(Mode::TwoPass, 200), &data, &data, None, false).unwrap();
        assert_eq!(r.best_dev.sentence_accuracy, 1.0, "{:?}", r.best_dev);
    }

    #[test]
    fn same_seed_same_report() {
        let data = toy();
        let strip = |mut r: RunReport| {
            for e in &mut r.epochs {
                e.wall_seconds = 0.0;
            }
            r
        };
        let a = strip(train_on(&tiny(Mode::OnePassCrf, 3), &data, &data, Some(&data), false).unwrap());
        let b = strip(train_on(&tiny(Mode::OnePassCrf, 3), &data, &data, Some(&data), false).unwrap());
        assert_eq!(a, b);
        assert!(a.epochs.iter().all(|e| e.test_uncoordinated.is_some()));
    }

    #[test]
    fn best_checkpoint_reproduces_dev_metrics() {
        let data = toy();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            output_dir: dir.path().to_path_buf(),
            ..tiny(Mode::TwoPass, 6)
        };
        let r = train_on(&cfg, &data, &data, None, true).unwrap();
        let best = r
            .epochs
            .iter()
            .map(|e| e.dev.sentence_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_dev.sentence_accuracy, best);
        let (model, meta) = load_checkpoint(r.checkpoint.as_ref().unwrap()).unwrap();
        let again = evaluate_model(&model, &meta.vocab, &data, meta.mode, 64).unwrap();
        assert_eq!(again, r.best_dev);
    }

    #[test]
    fn curve_has_one_row_per_epoch() {
        let data = toy();
        let r = train_on(&tiny(Mode::OnePass, 4), &data, &data, Some(&data), false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curve.csv");
        log_uncoordinated_curve(&[r], &p).unwrap();
        let text = fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "mode,epoch,count");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("one_pass,1,"));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let data = toy();
        let cfg = TrainConfig {
            lr: f64::INFINITY,
            ..tiny(Mode::OnePass, 3)
        };
        match train_on(&cfg, &data, &data, None, false) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
