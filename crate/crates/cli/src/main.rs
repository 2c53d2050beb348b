//! layerlab: train small translation models on synthetic tasks, probe
//! where translation happens layer by layer, and benchmark depth trading.

mod manifest;
mod overrides;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use layerlab::checkpoint::{average_checkpoints, Checkpoint};
use layerlab::data::{self, TaskKind, TaskSpec};
use layerlab::evaluation::{
    beam_decode, bench_depth_tradeoff, bleu, bleu1, encoder_only_translate, render_translations,
    BeamConfig, EncBleuReport, EncBleuRow, SpeedReport,
};
use layerlab::model::{ModelConfig, NormPlacement, TransformerModel};
use layerlab::probing::{
    random_encoder_control, run_probe_suite, suite_targets, Ablation, ProbeHyperparams,
    ProbeParams, ProbeReport, ProbeSide, ProbeTarget, ProjectionInit,
};
use layerlab::training::{train, TrainConfig};
use manifest::ManifestBuilder;
use overrides::Overrides;
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "layerlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Master seed; all randomness of the command flows from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Optional TOML config file; flags win over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bilingual corpus (train/dev/test + vocab).
    GenData {
        #[command(flatten)]
        shared: Shared,
        /// lexical_swap_reorder or copy_mod_shift
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        content_vocab: Option<usize>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Train a base model on a corpus.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        enc_depth: Option<usize>,
        #[arg(long)]
        dec_depth: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        d_ff: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        warmup: Option<u64>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        label_smoothing: Option<f64>,
        #[arg(long)]
        ckpt_interval: Option<u64>,
        /// pre or post
        #[arg(long)]
        norm: Option<String>,
        #[arg(long)]
        model_max_len: Option<usize>,
    },
    /// Average the last n checkpoints of a training run.
    Average {
        #[command(flatten)]
        shared: Shared,
        /// Directory holding ckpt-*.bin files.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        last: Option<usize>,
    },
    /// Train and evaluate the layer-wise probe suite on a frozen model.
    Probe {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Probe a randomly initialized encoder against the trained
        /// model's alignments instead of running the suite.
        #[arg(long)]
        random_encoder: bool,
        #[command(flatten)]
        probe_opts: ProbeOpts,
    },
    /// Probe suite restricted to the decoder sub-layer bypass variants.
    Ablate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        probe_opts: ProbeOpts,
    },
    /// Translate from encoder layers only (projection + frozen classifier).
    EncTranslate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        model: PathBuf,
        /// Directory of probe checkpoints written by `probe`.
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also decode the full model with beam search as the FULL row.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Beam-decode the test split and score it.
    Decode {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_output_len: Option<usize>,
    },
    /// Train identical models at several encoder/decoder depths and time
    /// single-threaded beam decoding.
    BenchSpeed {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        corpus: PathBuf,
        /// Depth pairs, e.g. 6:6,7:5,8:4,9:3,10:2,11:1,18:4
        #[arg(long)]
        configs: Option<String>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        warmup: Option<u64>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        d_ff: Option<usize>,
        /// Cap on timed test sentences (0 = the whole split).
        #[arg(long)]
        max_sentences: Option<usize>,
    },
    /// Render a stored CSV into a Markdown table.
    Report {
        #[command(flatten)]
        shared: Shared,
        /// probe, enc-bleu or speed
        #[arg(long)]
        table: String,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct ProbeOpts {
    #[arg(long)]
    probe_steps: Option<u64>,
    #[arg(long)]
    probe_lr: Option<f64>,
    #[arg(long)]
    probe_budget: Option<usize>,
    #[arg(long)]
    probe_pairs: Option<usize>,
    #[arg(long)]
    probe_dev_interval: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn out_dir(shared: &Shared) -> Result<PathBuf> {
    let dir = shared
        .out
        .clone()
        .ok_or_else(|| anyhow!("--out is required for this command"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_frozen_model(path: &Path) -> Result<TransformerModel> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = ckpt.to_model()?;
    model.freeze();
    Ok(model)
}

fn probe_hyperparams(opts: &ProbeOpts, ov: &Overrides, seed: u64) -> Result<ProbeHyperparams> {
    Ok(ProbeHyperparams {
        steps: ov.u64("probe_steps", opts.probe_steps, 2000)?,
        lr: ov.f64("probe_lr", opts.probe_lr, 1e-3)?,
        token_budget: ov.usize("probe_budget", opts.probe_budget, 512)?,
        train_pairs_cap: ov.usize("probe_pairs", opts.probe_pairs, 4000)?,
        dev_eval_interval: ov.u64("probe_dev_interval", opts.probe_dev_interval, 250)?,
        projection_init: ProjectionInit::Xavier,
        seed,
    })
}

fn probe_file_name(target: &ProbeTarget) -> String {
    let ablation = match target.ablation {
        Ablation::None => String::new(),
        other => format!("-{}", other.name()),
    };
    format!("probe-{}-{:02}{}.bin", target.side.name(), target.layer, ablation)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { shared, task, pairs, content_vocab, min_len, max_len } => {
            let ov = Overrides::load(shared.config.as_deref())?;
            let seed = ov.u64("seed", shared.seed, 42)?;
            let dir = out_dir(&shared)?;
            let task = ov.string("task", task, "lexical_swap_reorder")?;
            let spec = TaskSpec {
                kind: TaskKind::parse(&task)?,
                content_vocab: ov.usize("content_vocab", content_vocab, 64)?,
                min_len: ov.usize("min_len", min_len, 3)?,
                max_len: ov.usize("max_len", max_len, 12)?,
                seed,
            };
            let pairs = ov.usize("pairs", pairs, 22_000)?;
            let corpus = data::generate_corpus(&spec, pairs)?;
            data::write_corpus(&dir, &corpus)?;
            eprintln!(
                "wrote {} train / {} dev / {} test pairs (vocab {})",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                corpus.vocab.len()
            );
            let mut m = ManifestBuilder::new(
                "gen-data",
                seed,
                json!({
                    "task": task,
                    "pairs": pairs,
                    "content_vocab": spec.content_vocab,
                    "min_len": spec.min_len,
                    "max_len": spec.max_len,
                }),
            );
            for f in ["vocab.txt", "train.tsv", "dev.tsv", "test.tsv"] {
                m.output(dir.join(f));
            }
            m.write(&dir)?;
            Ok(())
        }

        Command::Train {
            shared,
            corpus,
            enc_depth,
            dec_depth,
            d_model,
            heads,
            d_ff,
            steps,
            warmup,
            dropout,
            budget,
            label_smoothing,
            ckpt_interval,
            norm,
            model_max_len,
        } => {
            let ov = Overrides::load(shared.config.as_deref())?;
            let seed = ov.u64("seed", shared.seed, 42)?;
            let dir = out_dir(&shared)?;
            let data = data::read_corpus(&corpus)?;
            let desk = TrainConfig::desk();
            let model_cfg = ModelConfig {
                encoder_depth: ov.usize("enc_depth", enc_depth, 6)?,
                decoder_depth: ov.usize("dec_depth", dec_depth, 6)?,
                d_model: ov.usize("d_model", d_model, 64)?,
                heads: ov.usize("heads", heads, 4)?,
                d_ff: ov.usize("d_ff", d_ff, 128)?,
                vocab_size: data.vocab.len(),
                dropout: ov.f64("dropout", dropout, 0.1)? as f32,
                max_len: ov.usize("model_max_len", model_max_len, 64)?,
                norm_placement: NormPlacement::parse(&ov.string("norm", norm, "pre")?)?,
                seed,
            };
            let train_cfg = TrainConfig {
                steps: ov.u64("steps", steps, desk.steps)?,
                warmup_steps: ov.u64("warmup", warmup, desk.warmup_steps)?,
                label_smoothing: ov.f64("label_smoothing", label_smoothing, 0.1)? as f32,
                token_batch_budget: ov.usize("budget", budget, desk.token_batch_budget)?,
                checkpoint_interval: ov.u64("ckpt_interval", ckpt_interval, desk.checkpoint_interval)?,
                seed,
                ..desk
            };
            let mut model = TransformerModel::build(model_cfg.clone())?;
            eprintln!(
                "training {}-{} model ({} parameters) for {} steps",
                model_cfg.encoder_depth,
                model_cfg.decoder_depth,
                model.count_parameters(),
                train_cfg.steps
            );
            let result = train(&mut model, &data, &train_cfg, Some(&dir))?;
            eprintln!("final dev accuracy: {:.2}%", result.final_dev_accuracy);
            let mut m = ManifestBuilder::new(
                "train",
                seed,
                json!({
                    "enc_depth": model_cfg.encoder_depth,
                    "dec_depth": model_cfg.decoder_depth,
                    "d_model": model_cfg.d_model,
                    "heads": model_cfg.heads,
                    "d_ff": model_cfg.d_ff,
                    "dropout": model_cfg.dropout,
                    "norm": model_cfg.norm_placement.name(),
                    "steps": train_cfg.steps,
                    "warmup": train_cfg.warmup_steps,
                    "budget": train_cfg.token_batch_budget,
                    "label_smoothing": train_cfg.label_smoothing,
                    "ckpt_interval": train_cfg.checkpoint_interval,
                    "final_dev_accuracy": result.final_dev_accuracy,
                }),
            );
            m.input(corpus);
            m.output(dir.join("model.bin"));
            m.output(dir.join("loss_curve.csv"));
            for p in &result.checkpoint_paths {
                m.output(p.clone());
            }
            m.write(&dir)?;
            Ok(())
        }

        Command::Average { shared, dir, last } => {
            let ov = Overrides::load(shared.config.as_deref())?;
            let seed = ov.u64("seed", shared.seed, 42)?;
            let out = out_dir(&shared)?;
            let last = ov.usize("last", last, 3)?;
            let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .map_or(false, |n| n.starts_with("ckpt-") && n.ends_with(".bin"))
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no ckpt-*.bin files under {}", dir.display());
            }
            let averaged = average_checkpoints(&paths, last)?;
            let out_path = out.join("averaged.bin");
            averaged.save(&out_path)?;
            eprintln!("averaged the last {last} of {} checkpoints", paths.len());
            let mut m = ManifestBuilder::new("average", seed, json!({ "last": last }));
            for p in &paths {
                m.input(p.clone());
            }
            m.output(out_path);
            m.write(&out)?;
            Ok(())
        }

        Command::Probe { shared, model, corpus, random_encoder, probe_opts } => {
            let ov = Overrides::load(shared.config.as_deref())?;
            let seed = ov.u64("seed", shared.seed, 42)?;
            let dir = out_dir(&shared)?;
            let frozen = load_frozen_model(&model)?;
            let data = data::read_corpus(&corpus)?;
            ensure_vocab_matches(&frozen, &data)?;
            let hp = probe_hyperparams(&probe_opts, &ov, seed)?;
            let mut m = ManifestBuilder::new(
                if random_encoder { "probe-random-encoder" } else { "probe" },
                seed,
                json!({
                    "probe_steps": hp.steps,
                    "probe_lr": hp.lr,
                    "probe_budget": hp.token_budget,
                    "probe_pairs": hp.train_pairs_cap,
                    "random_encoder": random_encoder,
                }),
            );
            m.input(model.clone());
            m.input(corpus.clone());
            if random_encoder {
                let control = random_encoder_control(&frozen, &data, &hp, seed ^ 0x72616e64)?;
                let e = frozen.config().encoder_depth;
                let csv = format!(
                    "side,layer,ablation,accuracy,delta\nrandom_encoder,0,none,{:.2},\nrandom_encoder,{e},none,{:.2},\n",
                    control.acc_embedding, control.acc_last_layer
                );
                let path = dir.join("probe_report.csv");
                fs::write(&path, csv)?;
                eprintln!(
                    "random encoder: embedding {:.2}, top layer {:.2}",
                    control.acc_embedding, control.acc_last_layer
                );
                m.output(path);
                m.write(&dir)?;
                return Ok(());
            }
            let targets = suite_targets(frozen.config());
            let result = run_probe_suite(&frozen, &data, &hp, &targets)?;
            let report_path = dir.join("probe_report.csv");
            fs::write(&report_path, result.report.to_csv())?;
            m.output(report_path);
            let probe_dir = dir.join("probes");
            fs::create_dir_all(&probe_dir)?;
            for trained in &result.probes {
                let path = probe_dir.join(probe_file_name(&trained.target));
                trained.params.to_checkpoint(&trained.target).save(&path)?;
                m.output(path);
            }
            for row in &result.report.rows {
                eprintln!(
                    "{} layer {} [{}]: {:.2}",
                    row.side.name(),
                    row.layer,
                    row.ablation.name(),
                    row.accuracy
                );
            }
            m.write(&dir)?;
            Ok(())
        }

        Command::Ablate { shared, model, corpus, probe_opts } => {
            let ov = Overrides::load(shared.config.as_deref())?;
            let seed = ov.u64("seed", shared.seed, 42)?;
            let dir = out_dir(&shared)?;
            let frozen = load_frozen_model(&model)?;
            let data = data::read_corpus(&corpus)?;
            ensure_vocab_matches(&frozen, &data)?;
            let hp = probe_hyperparams(&probe_opts, &ov, seed)?;
            // unablated decoder rows are kept as the delta baselines
            let mut targets = Vec::new();
            for layer in 1..=frozen.config().decoder_depth {
                targets.push(ProbeTarget::decoder(layer));
                targets.push(ProbeTarget::decoder_ablated(layer, Ablation::SkipSelfAttention));
                targets.push(ProbeTarget::decoder_ablated(layer, Ablation::SkipCrossAttention));
            }
            let result = run_probe_suite(&frozen, &data, &hp, &targets)?;
            let path = dir.join("ablate_report.csv");
            fs::write(&path, result.report.to_csv())?;
            for row in &result.report.rows {
                eprintln!(
                    "decoder layer {} [{}]: {:.2}",
                    row.layer,
                    row.ablation.name(),
                    row.accuracy
                );
            }
            let mut m = ManifestBuilder::new(
                "ablate",
                seed,
                json!({ "probe_steps": hp.steps, "probe_lr": hp.lr }),
            );
            m.input(model).input(corpus).output(path);
            m.write(&dir)?;
            Ok(())
        }

        Command::EncTranslate { shared, model, probes, corpus, full, beam } => {
            let ov = Overrides::load(shared.config.as_deref())?;
            let seed = ov.u64("seed", shared.seed, 42)?;
            let dir = out_dir(&shared)?;
            let frozen = load_frozen_model(&model)?;
            let data = data::read_corpus(&corpus)?;
            ensure_vocab_matches(&frozen, &data)?;
            let beam_cfg = BeamConfig {
                beam_size: ov.usize("beam", beam, 4)?,
                max_output_len: frozen.config().max_len - 2,
            };
            let references: Vec<Vec<u32>> = data.test.iter().map(|p| p.target.clone()).collect();
            let mut rows = Vec::new();
            let mut m = ManifestBuilder::new(
                "enc-translate",
                seed,
                json!({ "full": full, "beam": beam_cfg.beam_size }),
            );
            m.input(model.clone()).input(corpus.clone());
            for layer in 0..=frozen.config().encoder_depth {
                let probe_path = probes.join(probe_file_name(&ProbeTarget::encoder(layer)));
                if !probe_path.exists() {
                    continue;
                }
                let (params, target) = ProbeParams::from_checkpoint(&Checkpoint::load(&probe_path)?)?;
                if !matches!(target.side, ProbeSide::Encoder) || target.layer != layer {
                    bail!("probe file {} does not match encoder layer {layer}", probe_path.display());
                }
                let hyps: Vec<Vec<u32>> = data
                    .test
                    .iter()
                    .map(|p| encoder_only_translate(&frozen, &params, layer, &p.source))
                    .collect::<layerlab::Result<_>>()?;
                let b1 = bleu1(&hyps, &references)?;
                let b4 = bleu(&hyps, &references, 4)?;
                eprintln!("encoder layer {layer}: BLEU-1 {b1:.2}, BLEU {b4:.2}");
                let t_path = dir.join(format!("enc_translations_layer{layer:02}.txt"));
                fs::write(&t_path, render_translations(&hyps, &data.vocab))?;
                m.output(t_path);
                rows.push(EncBleuRow { layer: layer.to_string(), bleu1: b1, bleu: b4 });
            }
            if rows.is_empty() {
                bail!("no encoder probes found under {}", probes.display());
            }
            if full {
                let hyps: Vec<Vec<u32>> = data
                    .test
                    .iter()
                    .map(|p| beam_decode(&frozen, &p.source, &beam_cfg))
                    .collect::<layerlab::Result<_>>()?;
                let b1 = bleu1(&hyps, &references)?;
                let b4 = bleu(&hyps, &references, 4)?;
                eprintln!("FULL model: BLEU-1 {b1:.2}, BLEU {b4:.2}");
                let t_path = dir.join("enc_translations_full.txt");
                fs::write(&t_path, render_translations(&hyps, &data.vocab))?;
                m.output(t_path);
                rows.push(EncBleuRow { layer: "FULL".into(), bleu1: b1, bleu: b4 });
            }
            let report = EncBleuReport { rows };
            let path = dir.join("enc_bleu.csv");
            fs::write(&path, report.to_csv())?;
            m.output(path);
            m.write(&dir)?;
            Ok(())
        }

        Command::Decode { shared, model, corpus, beam, max_output_len } => {
            let ov = Overrides::load(shared.config.as_deref())?;
            let seed = ov.u64("seed", shared.seed, 42)?;
            let dir = out_dir(&shared)?;
            let frozen = load_frozen_model(&model)?;
            let data = data::read_corpus(&corpus)?;
            ensure_vocab_matches(&frozen, &data)?;
            let cfg = BeamConfig {
                beam_size: ov.usize("beam", beam, 4)?,
                max_output_len: ov.usize(
                    "max_output_len",
                    max_output_len,
                    frozen.config().max_len - 2,
                )?,
            };
            let hyps: Vec<Vec<u32>> = data
                .test
                .iter()
                .map(|p| beam_decode(&frozen, &p.source, &cfg))
                .collect::<layerlab::Result<_>>()?;
            let references: Vec<Vec<u32>> = data.test.iter().map(|p| p.target.clone()).collect();
            let b4 = bleu(&hyps, &references, 4)?;
            let b1 = bleu1(&hyps, &references)?;
            eprintln!("BLEU {b4:.2} (BLEU-1 {b1:.2}) over {} sentences", hyps.len());
            let t_path = dir.join("translations.txt");
            fs::write(&t_path, render_translations(&hyps, &data.vocab))?;
            let metrics_path = dir.join("decode_metrics.csv");
            fs::write(&metrics_path, format!("bleu,bleu1\n{b4:.2},{b1:.2}\n"))?;
            let mut m = ManifestBuilder::new(
                "decode",
                seed,
                json!({ "beam": cfg.beam_size, "max_output_len": cfg.max_output_len, "bleu": b4 }),
            );
            m.input(model).input(corpus).output(t_path).output(metrics_path);
            m.write(&dir)?;
            Ok(())
        }

        Command::BenchSpeed {
            shared,
            corpus,
            configs,
            beam,
            reps,
            steps,
            warmup,
            budget,
            d_model,
            heads,
            d_ff,
            max_sentences,
        } => {
            let ov = Overrides::load(shared.config.as_deref())?;
            let seed = ov.u64("seed", shared.seed, 42)?;
            let dir = out_dir(&shared)?;
            let data = data::read_corpus(&corpus)?;
            let configs = ov.string("configs", configs, "6:6,7:5,8:4,9:3,10:2,11:1,18:4")?;
            let depth_pairs = parse_depth_pairs(&configs)?;
            let desk = TrainConfig::desk();
            let template = ModelConfig {
                encoder_depth: 6,
                decoder_depth: 6,
                d_model: ov.usize("d_model", d_model, 64)?,
                heads: ov.usize("heads", heads, 4)?,
                d_ff: ov.usize("d_ff", d_ff, 128)?,
                vocab_size: data.vocab.len(),
                dropout: 0.1,
                max_len: 64,
                norm_placement: NormPlacement::Pre,
                seed,
            };
            let train_cfg = TrainConfig {
                steps: ov.u64("steps", steps, desk.steps)?,
                warmup_steps: ov.u64("warmup", warmup, desk.warmup_steps)?,
                token_batch_budget: ov.usize("budget", budget, desk.token_batch_budget)?,
                seed,
                ..desk
            };
            let beam_cfg = BeamConfig {
                beam_size: ov.usize("beam", beam, 4)?,
                max_output_len: template.max_len - 2,
            };
            let reps = ov.usize("reps", reps, 5)?;
            let max_sentences = ov.usize("max_sentences", max_sentences, 0)?;
            eprintln!(
                "benchmarking {} configurations, {} training steps each",
                depth_pairs.len(),
                train_cfg.steps
            );
            let report = bench_depth_tradeoff(
                &depth_pairs,
                &data,
                &template,
                &train_cfg,
                &beam_cfg,
                reps,
                max_sentences,
            )?;
            for r in &report.rows {
                eprintln!(
                    "{}-{}: {:.3}s decode, speedup {:.2}, BLEU {:.2}",
                    r.enc_depth, r.dec_depth, r.decode_seconds, r.speedup, r.bleu
                );
            }
            let path = dir.join("speed_report.csv");
            fs::write(&path, report.to_csv())?;
            let mut m = ManifestBuilder::new(
                "bench-speed",
                seed,
                json!({
                    "configs": configs,
                    "beam": beam_cfg.beam_size,
                    "reps": reps,
                    "steps": train_cfg.steps,
                    "d_model": template.d_model,
                    "max_sentences": max_sentences,
                }),
            );
            m.input(corpus).output(path);
            m.write(&dir)?;
            Ok(())
        }

        Command::Report { shared, table, input } => {
            let ov = Overrides::load(shared.config.as_deref())?;
            let seed = ov.u64("seed", shared.seed, 42)?;
            let dir = out_dir(&shared)?;
            let text = fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let (name, markdown) = match table.as_str() {
                "probe" => ("report-probe.md", ProbeReport::from_csv(&text)?.markdown()),
                "enc-bleu" => ("report-enc-bleu.md", EncBleuReport::from_csv(&text)?.markdown()),
                "speed" => ("report-speed.md", SpeedReport::from_csv(&text)?.markdown()),
                other => bail!("unknown table {other}; expected probe, enc-bleu or speed"),
            };
            let path = dir.join(name);
            fs::write(&path, &markdown)?;
            print!("{markdown}");
            let mut m = ManifestBuilder::new("report", seed, json!({ "table": table }));
            m.input(input).output(path);
            m.write(&dir)?;
            Ok(())
        }
    }
}

fn ensure_vocab_matches(model: &TransformerModel, corpus: &layerlab::data::Corpus) -> Result<()> {
    if model.config().vocab_size != corpus.vocab.len() {
        bail!(
            "model vocabulary ({}) does not match corpus vocabulary ({})",
            model.config().vocab_size,
            corpus.vocab.len()
        );
    }
    Ok(())
}

fn parse_depth_pairs(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|pair| {
            let (e, d) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| anyhow!("depth pair {pair} is not of the form ENC:DEC"))?;
            Ok((e.parse()?, d.parse()?))
        })
        .collect()
}
