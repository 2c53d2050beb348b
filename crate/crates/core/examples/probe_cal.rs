// scratch probe-trend calibration (deleted before shipping)
use layerlab::checkpoint::Checkpoint;
use layerlab::data::{generate_corpus, TaskKind, TaskSpec};
use layerlab::model::{ModelConfig, TransformerModel};
use layerlab::probing::*;
use layerlab::training::{train, TrainConfig};
use std::path::Path;
use std::time::Instant;

fn main() {
    let content: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(64);
    let steps: u64 = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(1800);
    let spec = TaskSpec { kind: TaskKind::LexicalSwapReorder, content_vocab: content, min_len: 3, max_len: 12, seed: 11 };
    let corpus = generate_corpus(&spec, 6600).unwrap();
    let name = format!("/tmp/cal44_{}_{}.bin", content, steps);
    let ckpt_path = Path::new(&name);
    let mut model = if ckpt_path.exists() {
        eprintln!("loading cached model");
        Checkpoint::load(ckpt_path).unwrap().to_model().unwrap()
    } else {
        let mut m = TransformerModel::build(ModelConfig::desk(4, 4, corpus.vocab.len(), 7)).unwrap();
        let cfg = TrainConfig { steps, warmup_steps: 400, token_batch_budget: 1500, ..TrainConfig::desk() };
        let t0 = Instant::now();
        let r = train(&mut m, &corpus, &cfg, None).unwrap();
        eprintln!("trained: dev acc {:.2}% in {:.0}s", r.final_dev_accuracy, t0.elapsed().as_secs_f64());
        Checkpoint::from_model(&m, steps).save(ckpt_path).unwrap();
        m
    };
    model.freeze();
    let hp = ProbeHyperparams::default_suite(5);
    let e = model.config().encoder_depth;
    let d = model.config().decoder_depth;
    for target in [ProbeTarget::encoder(0), ProbeTarget::encoder(e), ProbeTarget::decoder(0), ProbeTarget::decoder(d)] {
        let t0 = Instant::now();
        let trained = train_probe(&model, &corpus, target, &hp).unwrap();
        let acc = evaluate_probe(&model, &corpus.test, &target, &trained.params).unwrap();
        eprintln!("{:?} layer {}: dev {:.2} test {:.2} ({:.0}s)", target.side, target.layer, trained.dev_accuracy, acc, t0.elapsed().as_secs_f64());
    }
    let t0 = Instant::now();
    let ctl = random_encoder_control(&model, &corpus, &hp, 991).unwrap();
    eprintln!("random encoder: emb {:.2} top {:.2} ({:.0}s)", ctl.acc_embedding, ctl.acc_last_layer, t0.elapsed().as_secs_f64());
}
