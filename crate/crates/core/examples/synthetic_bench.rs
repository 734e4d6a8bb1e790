//! Decode latency of an untrained ATIS-sized model on a synthetic corpus.
//!
//! cargo run --release -p nartag --example synthetic_bench [utterances]

use nartag::bench::{measure_latency, speedup_table, BenchOptions};
use nartag::synth::{generate, SynthConfig};
use nartag::{EncoderConfig, Mode, Model, Vocab};

fn main() -> nartag::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let data = generate(&SynthConfig::atis_like(), n, 7);
    let vocab = Vocab::build(&data);
    let cfg = EncoderConfig::atis(vocab.tokens.len(), vocab.tags.len(), vocab.intents.len());
    let model = Model::<f32>::new(cfg, 1)?;
    println!("{} utterances, {} tags, {} parameters", data.len(), vocab.tags.len(), model.params.num_scalars());
    let mut reports = Mode::ALL
        .iter()
        .map(|&m| measure_latency(&model, &vocab, &data, m, BenchOptions::default()))
        .collect::<nartag::Result<Vec<_>>>()?;
    let table = speedup_table(&mut reports, Mode::OnePassCrf.as_str())?;
    print!("{}", table.to_text());
    println!("# {}", reports[0].hardware);
    Ok(())
}
