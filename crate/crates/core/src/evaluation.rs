//! Decoding, BLEU scoring, encoder-only translation and the
//! encoder/decoder depth-trading speed benchmark.

use crate::data::{Corpus, EOS};
use crate::error::{Error, Result};
use crate::model::{EncodedSource, ModelConfig, TransformerModel};
use crate::probing::ProbeParams;
use crate::tensor::{matmul, Tensor};
use crate::training::{train, TrainConfig};
use std::collections::HashMap;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_output_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: 4, max_output_len: 62 }
    }
}

/// Anything that can extend decoder prefixes by one step.
pub(crate) trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    /// One vocabulary-sized logit row per prefix; prefixes start with bos.
    fn next_logits(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>>;
}

struct ModelScorer<'a> {
    model: &'a TransformerModel,
    enc: &'a EncodedSource,
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_logits(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        self.model.decode_prefix_logits(self.enc, prefixes)
    }
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

#[derive(Clone, Debug)]
struct Hypothesis {
    prefix: Vec<u32>, // decoder input, starts with bos
    score: f64,
}

/// Standard beam search over summed log-probabilities, no length penalty.
/// Finished hypotheses (emitted eos) are retained; search stops when the
/// best finished hypothesis cannot be beaten by any live prefix (scores
/// only decrease) or at `max_output_len`.
fn beam_core(
    scorer: &dyn NextTokenScorer,
    beam_size: usize,
    max_output_len: usize,
) -> Result<(Vec<u32>, f64)> {
    let mut live = vec![Hypothesis { prefix: vec![crate::data::BOS], score: 0.0 }];
    let mut finished: Option<(Vec<u32>, f64)> = None;
    for _ in 0..max_output_len {
        if live.is_empty() {
            break;
        }
        if let Some((_, best_done)) = &finished {
            if live.iter().all(|h| h.score <= *best_done) {
                break;
            }
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.prefix.clone()).collect();
        let logits = scorer.next_logits(&prefixes)?;
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (i, row) in logits.iter().enumerate() {
            let lp = log_softmax(row);
            for (v, &l) in lp.iter().enumerate() {
                candidates.push((live[i].score + l, i, v as u32));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam_size);
        for &(score, i, v) in candidates.iter().take(beam_size) {
            if v == EOS {
                let tokens = live[i].prefix[1..].to_vec();
                if finished.as_ref().map_or(true, |(_, s)| score > *s) {
                    finished = Some((tokens, score));
                }
            } else {
                let mut prefix = live[i].prefix.clone();
                prefix.push(v);
                next.push(Hypothesis { prefix, score });
            }
        }
        live = next;
    }
    match finished {
        Some(best) => Ok(best),
        None => {
            let best = live
                .into_iter()
                .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(std::cmp::Ordering::Equal))
                .ok_or_else(|| Error::EmptyInput("beam search exhausted all hypotheses".into()))?;
            Ok((best.prefix[1..].to_vec(), best.score))
        }
    }
}

/// Beam search with the greedy completion always scored as a candidate,
/// so the returned hypothesis is never worse than the greedy one.
fn beam_search(
    scorer: &dyn NextTokenScorer,
    beam_size: usize,
    max_output_len: usize,
) -> Result<(Vec<u32>, f64)> {
    let best = beam_core(scorer, beam_size, max_output_len)?;
    if beam_size == 1 {
        return Ok(best);
    }
    let greedy = beam_core(scorer, 1, max_output_len)?;
    Ok(if greedy.1 > best.1 { greedy } else { best })
}

/// Decode one sentence. Beam size 1 degenerates to greedy search.
pub fn beam_decode(model: &TransformerModel, source: &[u32], cfg: &BeamConfig) -> Result<Vec<u32>> {
    if source.is_empty() {
        return Err(Error::EmptyInput("empty source sentence".into()));
    }
    if cfg.beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let enc = model.encode_source(source)?;
    let scorer = ModelScorer { model, enc: &enc };
    Ok(beam_search(&scorer, cfg.beam_size, cfg.max_output_len)?.0)
}

// ── BLEU ─────────────────────────────────────────────────────────────

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU: geometric mean of clipped n-gram precisions
/// (n = 1..=max_n) times the brevity penalty. No smoothing: a zero
/// precision at any order gives a score of 0.
pub fn bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>], max_n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("no hypotheses to score".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Config(format!(
            "{} hypotheses against {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Config("bleu needs at least unigrams".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, re) in hypotheses.iter().zip(references.iter()) {
        hyp_len += hyp.len();
        ref_len += re.len();
        for n in 1..=max_n {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(re, n);
            for (gram, &count) in &h {
                totals[n - 1] += count;
                if let Some(&rc) = r.get(gram) {
                    matches[n - 1] += count.min(rc);
                }
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision_sum = 0.0f64;
    for n in 0..max_n {
        if matches[n] == 0 || totals[n] == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_precision_sum / max_n as f64).exp())
}

/// Unigram BLEU: word-choice quality independent of word order.
pub fn bleu1(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    bleu(hypotheses, references, 1)
}

// ── Encoder-only translation ─────────────────────────────────────────

/// Translate by classifying each projected encoder representation
/// directly: per source position, the probed layer's row goes through the
/// probe projection and the frozen classifier, and the argmax token is
/// emitted. No alignment or reordering is applied, so the output has the
/// source length and the source word order.
pub fn encoder_only_translate(
    model: &TransformerModel,
    probe: &ProbeParams,
    layer: usize,
    source: &[u32],
) -> Result<Vec<u32>> {
    if layer > model.config().encoder_depth {
        return Err(Error::Config(format!(
            "encoder layer {layer} outside depth {}",
            model.config().encoder_depth
        )));
    }
    let layers = model.encode_layers(source)?;
    let d = model.config().d_model;
    let e = Tensor::from_vec(vec![source.len(), d], layers[layer].clone())?;
    let projected = matmul(&e, &probe.projection)?;
    let logits = model.logits(&projected)?;
    let v = model.config().vocab_size;
    let ld = logits.data();
    Ok((0..source.len())
        .map(|i| {
            let row = &ld[i * v..i * v + v];
            let mut best = 0usize;
            for (j, &val) in row.iter().enumerate().skip(1) {
                if val > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect())
}

// ── Depth-trading speed benchmark ────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SpeedRow {
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub params: usize,
    pub train_seconds: f64,
    pub decode_seconds: f64,
    pub speedup: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SpeedReport {
    pub rows: Vec<SpeedRow>,
}

pub const SPEED_REFERENCE: (usize, usize) = (6, 6);

/// Train one model per depth pair under identical settings, then decode
/// the test set sentence by sentence with beam search, single-threaded,
/// one warm-up pass excluded, and report the median wall time over the
/// repetitions plus parameter counts and speedups against the 6-6 row.
pub fn bench_depth_tradeoff(
    depth_pairs: &[(usize, usize)],
    corpus: &Corpus,
    template: &ModelConfig,
    train_cfg: &TrainConfig,
    beam: &BeamConfig,
    repetitions: usize,
    max_sentences: usize,
) -> Result<SpeedReport> {
    if depth_pairs.is_empty() {
        return Err(Error::Config("no depth pairs to benchmark".into()));
    }
    if !depth_pairs.contains(&SPEED_REFERENCE) {
        return Err(Error::Config(
            "the benchmark needs the 6-6 reference row for speedups".into(),
        ));
    }
    if repetitions == 0 {
        return Err(Error::Config("need at least one timed repetition".into()));
    }
    let test: Vec<_> = if max_sentences == 0 {
        corpus.test.iter().collect()
    } else {
        corpus.test.iter().take(max_sentences).collect()
    };
    if test.is_empty() {
        return Err(Error::EmptyInput("empty test split".into()));
    }

    let mut rows = Vec::with_capacity(depth_pairs.len());
    for &(enc, dec) in depth_pairs {
        let mut cfg = template.clone();
        cfg.encoder_depth = enc;
        cfg.decoder_depth = dec;
        let mut model = TransformerModel::build(cfg)?;
        let t0 = Instant::now();
        train(&mut model, corpus, train_cfg, None)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        model.freeze();

        let decode_all = |m: &TransformerModel| -> Result<Vec<Vec<u32>>> {
            test.iter().map(|p| beam_decode(m, &p.source, beam)).collect()
        };
        let hypotheses = decode_all(&model)?; // warm-up, excluded from timing
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t0 = Instant::now();
            decode_all(&model)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let decode_seconds = if times.len() % 2 == 1 {
            times[times.len() / 2]
        } else {
            0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
        };
        let references: Vec<Vec<u32>> = test.iter().map(|p| p.target.clone()).collect();
        let bleu_score = bleu(&hypotheses, &references, 4)?;
        rows.push(SpeedRow {
            enc_depth: enc,
            dec_depth: dec,
            params: model.count_parameters(),
            train_seconds,
            decode_seconds,
            speedup: 1.0,
            bleu: bleu_score,
        });
    }
    let reference_time = rows
        .iter()
        .find(|r| (r.enc_depth, r.dec_depth) == SPEED_REFERENCE)
        .map(|r| r.decode_seconds)
        .expect("reference row exists");
    for r in &mut rows {
        r.speedup = reference_time / r.decode_seconds;
    }
    Ok(SpeedReport { rows })
}

impl SpeedReport {
    /// CSV columns `enc_depth,dec_depth,params,train_seconds,decode_seconds,speedup,bleu`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("enc_depth,dec_depth,params,train_seconds,decode_seconds,speedup,bleu\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.3},{:.4},{:.2},{:.2}\n",
                r.enc_depth, r.dec_depth, r.params, r.train_seconds, r.decode_seconds, r.speedup, r.bleu
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<SpeedReport> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Parse {
                    path: "speed report".into(),
                    line: i + 1,
                    msg: format!("expected 7 fields, found {}", f.len()),
                });
            }
            let err = |msg: &str| Error::Parse {
                path: "speed report".into(),
                line: i + 1,
                msg: msg.into(),
            };
            rows.push(SpeedRow {
                enc_depth: f[0].parse().map_err(|_| err("bad enc depth"))?,
                dec_depth: f[1].parse().map_err(|_| err("bad dec depth"))?,
                params: f[2].parse().map_err(|_| err("bad params"))?,
                train_seconds: f[3].parse().map_err(|_| err("bad train seconds"))?,
                decode_seconds: f[4].parse().map_err(|_| err("bad decode seconds"))?,
                speedup: f[5].parse().map_err(|_| err("bad speedup"))?,
                bleu: f[6].parse().map_err(|_| err("bad bleu"))?,
            });
        }
        Ok(SpeedReport { rows })
    }

    pub fn markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Encoder | Decoder | BLEU | Para. (M) | Train (s) | Decode (s) | Speed up |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {:.1} | {:.3} | {:.2} |\n",
                r.enc_depth,
                r.dec_depth,
                r.bleu,
                r.params as f64 / 1e6,
                r.train_seconds,
                r.decode_seconds,
                r.speedup
            ));
        }
        out
    }
}

// ── Encoder-layer translation report ─────────────────────────────────

#[derive(Debug, Clone)]
pub struct EncBleuRow {
    /// Layer index, or "FULL" for the whole model with beam search.
    pub layer: String,
    pub bleu1: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EncBleuReport {
    pub rows: Vec<EncBleuRow>,
}

impl EncBleuReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,bleu1,bleu\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.2},{:.2}\n", r.layer, r.bleu1, r.bleu));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<EncBleuReport> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Parse {
                    path: "encoder bleu report".into(),
                    line: i + 1,
                    msg: format!("expected 3 fields, found {}", f.len()),
                });
            }
            let err = |msg: &str| Error::Parse {
                path: "encoder bleu report".into(),
                line: i + 1,
                msg: msg.into(),
            };
            rows.push(EncBleuRow {
                layer: f[0].to_string(),
                bleu1: f[1].parse().map_err(|_| err("bad bleu1"))?,
                bleu: f[2].parse().map_err(|_| err("bad bleu"))?,
            });
        }
        Ok(EncBleuReport { rows })
    }

    /// Markdown table with per-layer improvements over the previous row.
    pub fn markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Layer | BLEU 1 | Δ | BLEU | Δ |\n|---|---|---|---|---|\n");
        let mut prev: Option<(f64, f64)> = None;
        for r in &self.rows {
            let (d1, d4) = match prev {
                Some((p1, p4)) => (format!("{:.2}", r.bleu1 - p1), format!("{:.2}", r.bleu - p4)),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "| {} | {:.2} | {} | {:.2} | {} |\n",
                r.layer, r.bleu1, d1, r.bleu, d4
            ));
            prev = Some((r.bleu1, r.bleu));
        }
        out
    }
}

/// Token-id sequences rendered one sentence per line, space-separated.
pub fn render_translations(sentences: &[Vec<u32>], vocab: &crate::data::Vocab) -> String {
    let mut out = String::new();
    for s in sentences {
        let toks: Vec<&str> = s.iter().map(|&id| vocab.token(id)).collect();
        out.push_str(&toks.join(" "));
        out.push('\n');
    }
    out
}

/// Parse space-separated token lines back to id sequences.
pub fn parse_translations(text: &str, vocab: &crate::data::Vocab) -> Vec<Vec<u32>> {
    text.lines()
        .map(|l| l.split(' ').filter(|t| !t.is_empty()).map(|t| vocab.id(t)).collect())
        .collect()
}
