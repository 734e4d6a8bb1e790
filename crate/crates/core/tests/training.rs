use std::fs;

use nartag::config;
use nartag::corpus::{write_split, Split};
use nartag::synth::{generate, SynthConfig};
use nartag::trainer::{evaluate_checkpoint, read_run_report, train, TrainConfig};
use nartag::Mode;

fn corpus(dir: &std::path::Path) {
    let synth = SynthConfig::small();
    write_split(dir, Split::Train, &generate(&synth, 60, 1)).unwrap();
    write_split(dir, Split::Dev, &generate(&synth, 20, 2)).unwrap();
    write_split(dir, Split::Test, &generate(&synth, 20, 3)).unwrap();
}

fn small_config(data: &std::path::Path, out: &std::path::Path, mode: Mode) -> TrainConfig {
    let text = format!(
        "# tiny model for tests\n\
         data_dir = {}\n\
         output_dir = {}\n\
         num_layers = 1\n\
         num_heads = 2\n\
         hidden_size = 16\n\
         dropout = 0\n\
         lr = 0.01\n\
         batch_size = 8\n\
         max_epochs = 15\n\
         mode = {mode}\n",
        data.display(),
        out.display()
    );
    let mut cfg = TrainConfig::default();
    cfg.apply(&config::parse(&text).unwrap()).unwrap();
    cfg.validate().unwrap();
    cfg
}

#[test]
fn train_from_files_then_evaluate_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    corpus(data.path());
    for mode in Mode::ALL {
        let out = tempfile::tempdir().unwrap();
        let cfg = small_config(data.path(), out.path(), mode);
        let report = train(&cfg).unwrap();
        assert_eq!(report.epochs.len(), 15);
        assert!(report.epochs.last().unwrap().train_loss < report.epochs[0].train_loss);
        assert!(report.best_dev.intent_accuracy > 0.9, "{mode}: {:?}", report.best_dev);

        let on_disk = read_run_report(&out.path().join("run_report.json")).unwrap();
        assert_eq!(on_disk, report);
        let curve = fs::read_to_string(out.path().join("curve.csv")).unwrap();
        assert_eq!(curve.lines().count(), 16);

        let ckpt = report.checkpoint.as_ref().unwrap();
        let dev = evaluate_checkpoint(ckpt, Split::Dev, None, None).unwrap();
        assert_eq!(dev, report.best_dev);
        let test = evaluate_checkpoint(ckpt, Split::Test, None, None).unwrap();
        assert_eq!(test.utterances, 20);
    }
}

#[test]
fn missing_split_is_a_data_error() {
    let data = tempfile::tempdir().unwrap();
    let synth = SynthConfig::small();
    write_split(data.path(), Split::Train, &generate(&synth, 10, 1)).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = train(&small_config(data.path(), out.path(), Mode::TwoPass)).unwrap_err();
    assert!(err.to_string().contains("dev"), "{err}");
}
