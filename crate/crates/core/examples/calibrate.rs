// scratch calibration runs (deleted before shipping)
use layerlab::data::{generate_corpus, TaskKind, TaskSpec};
use layerlab::model::{ModelConfig, TransformerModel};
use layerlab::training::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let task = std::env::args().nth(2).unwrap_or_else(|| "copy".into());
    let (kind, enc, dec) = match task.as_str() {
        "copy" => (TaskKind::CopyModShift, 2, 2),
        _ => (TaskKind::LexicalSwapReorder, 4, 4),
    };
    let spec = TaskSpec { kind, content_vocab: 64, min_len: 3, max_len: 12, seed: 11 };
    let corpus = generate_corpus(&spec, 6600).unwrap();
    eprintln!("corpus: {} train / {} dev", corpus.train.len(), corpus.dev.len());
    let mut model = TransformerModel::build(ModelConfig::desk(enc, dec, corpus.vocab.len(), 7)).unwrap();
    eprintln!("params: {}", model.count_parameters());
    let cfg = TrainConfig { steps, warmup_steps: 400, token_batch_budget: 1500, ..TrainConfig::desk() };
    let t0 = Instant::now();
    let result = train(&mut model, &corpus, &cfg, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    for (s, l, _) in result.loss_curve.iter().step_by((steps as usize / 8).max(1)) {
        eprintln!("step {s}: loss {l:.4}");
    }
    eprintln!("last loss {:.4}", result.loss_curve.last().unwrap().1);
    eprintln!("dev acc: {:.2}%", result.final_dev_accuracy);
    eprintln!("{steps} steps in {dt:.1}s ({:.0} ms/step)", 1000.0 * dt / steps as f64);
}
