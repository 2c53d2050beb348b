//! Forward passes over ragged batches.
//!
//! Padded [`Batch`] matrices are flattened to ragged row blocks before any
//! compute, so padded positions never enter attention, normalization or
//! the loss; per-sentence trace tensors therefore cover exactly the
//! unpadded positions.

use super::attention::{multi_head_attention, AttnCapture};
use super::{
    AttnParams, BypassSpec, FfParams, NormParams, SkipKind, TransformerModel,
};
use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::tensor::{
    add, add_row_broadcast, cross_entropy, dropout, embedding_lookup, layer_norm, matmul,
    matmul_nt, mul_scalar, relu, Tensor,
};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

pub(crate) const LN_EPS: f32 = 1e-6;

/// Whether a pass is a training pass (dropout active, driven by the given
/// stream) or an evaluation pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Per-sentence record of one traced forward pass.
#[derive(Debug, Clone)]
pub struct SentenceTrace {
    /// `encoder_depth + 1` tensors of `src_len * d_model`; index 0 is the
    /// embedding-layer output.
    pub encoder_layers: Vec<Vec<f32>>,
    /// `decoder_depth + 1` tensors of `tgt_len * d_model`.
    pub decoder_layers: Vec<Vec<f32>>,
    /// Cross-attention matrices in capture orientation
    /// `[tgt_len x src_len]`, layer-major then head
    /// (`alignments[layer * heads + head]`). Empty for a bypassed layer.
    pub alignments: Vec<Vec<f32>>,
    pub src_len: usize,
    pub tgt_len: usize,
    /// Gold labels for the decoder positions (target shifted left + eos).
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub sentences: Vec<SentenceTrace>,
}

/// Final encoder output of a single sentence, detached for decoding.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub rows: Vec<f32>,
    pub len: usize,
    pub d_model: usize,
}

struct Ragged {
    ids: Vec<u32>,
    ranges: Vec<Range<usize>>,
    positions: Vec<usize>,
}

fn ragged_rows(matrix: &crate::data::IdMatrix, lens: &[usize]) -> Ragged {
    let mut ids = Vec::new();
    let mut ranges = Vec::with_capacity(lens.len());
    let mut positions = Vec::new();
    for r in 0..matrix.rows {
        let start = ids.len();
        let len = lens[r];
        ids.extend_from_slice(&matrix.row(r)[..len]);
        positions.extend(0..len);
        ranges.push(start..start + len);
    }
    Ragged { ids, ranges, positions }
}

fn ragged_labels(batch: &Batch) -> Vec<u32> {
    let mut labels = Vec::new();
    for r in 0..batch.labels.rows {
        labels.extend_from_slice(&batch.labels.row(r)[..batch.tgt_lens[r]]);
    }
    labels
}

fn apply_norm(n: &NormParams, x: &Tensor) -> Result<Tensor> {
    layer_norm(x, &n.gain, &n.bias, LN_EPS)
}

fn attn_block(
    a: &AttnParams,
    x_q: &Tensor,
    x_kv: &Tensor,
    q_ranges: &[Range<usize>],
    k_ranges: &[Range<usize>],
    heads: usize,
    causal: bool,
    capture: Option<&mut AttnCapture>,
) -> Result<Tensor> {
    let q = add_row_broadcast(&matmul(x_q, &a.wq)?, &a.bq)?;
    let k = add_row_broadcast(&matmul(x_kv, &a.wk)?, &a.bk)?;
    let v = add_row_broadcast(&matmul(x_kv, &a.wv)?, &a.bv)?;
    let ctx = multi_head_attention(&q, &k, &v, q_ranges, k_ranges, heads, causal, capture)?;
    add_row_broadcast(&matmul(&ctx, &a.wo)?, &a.bo)
}

fn ff_block(f: &FfParams, x: &Tensor) -> Result<Tensor> {
    let h = relu(&add_row_broadcast(&matmul(x, &f.w1)?, &f.b1)?);
    add_row_broadcast(&matmul(&h, &f.w2)?, &f.b2)
}

impl TransformerModel {
    fn embed_scale(&self) -> f32 {
        (self.config().d_model as f32).sqrt()
    }

    fn maybe_dropout(&self, x: &Tensor, mode: &mut Mode) -> Tensor {
        match mode {
            Mode::Train(rng) if self.config().dropout > 0.0 => {
                dropout(x, self.config().dropout, &mut **rng)
            }
            _ => x.clone(),
        }
    }

    /// pre:  x + dropout(f(norm(x)))   post: norm(x + dropout(f(x)))
    fn sublayer(
        &self,
        x: &Tensor,
        norm: &NormParams,
        mode: &mut Mode,
        f: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        match self.config().norm_placement {
            super::NormPlacement::Pre => {
                let h = f(&apply_norm(norm, x)?)?;
                add(x, &self.maybe_dropout(&h, mode))
            }
            super::NormPlacement::Post => {
                let h = f(x)?;
                apply_norm(norm, &add(x, &self.maybe_dropout(&h, mode))?)
            }
        }
    }

    fn embed(&self, ragged: &Ragged, mode: &mut Mode) -> Result<Tensor> {
        let d = self.config().d_model;
        let max = self.config().max_len;
        if let Some(&p) = ragged.positions.iter().max() {
            if p >= max {
                return Err(Error::Length { len: p + 1, max });
            }
        }
        let emb = embedding_lookup(&self.embedding, &ragged.ids)?;
        let scaled = mul_scalar(&emb, self.embed_scale());
        let mut pe = vec![0.0f32; ragged.ids.len() * d];
        for (row, &pos) in ragged.positions.iter().enumerate() {
            pe[row * d..row * d + d].copy_from_slice(&self.pos_enc[pos * d..pos * d + d]);
        }
        let x = add(&scaled, &Tensor::from_vec(vec![ragged.ids.len(), d], pe)?)?;
        Ok(self.maybe_dropout(&x, mode))
    }

    fn capture_layer(
        trace: &mut Option<&mut Vec<Vec<f32>>>,
        x: &Tensor,
        replace_last: bool,
    ) {
        if let Some(t) = trace.as_deref_mut() {
            if replace_last {
                *t.last_mut().expect("capture exists") = x.to_vec();
            } else {
                t.push(x.to_vec());
            }
        }
    }

    fn run_encoder(
        &self,
        x0: Tensor,
        ranges: &[Range<usize>],
        mode: &mut Mode,
        mut trace: Option<&mut Vec<Vec<f32>>>,
    ) -> Result<Tensor> {
        Self::capture_layer(&mut trace, &x0, false);
        let mut x = x0;
        let heads = self.config().heads;
        for layer in &self.encoder {
            x = self.sublayer(&x, &layer.norm1, mode, |h| {
                attn_block(&layer.self_attn, h, h, ranges, ranges, heads, false, None)
            })?;
            x = self.sublayer(&x, &layer.norm2, mode, |h| ff_block(&layer.ff, h))?;
            Self::capture_layer(&mut trace, &x, false);
        }
        // The stack normalization of a pre-norm encoder belongs to the top
        // layer's output; with zero layers the embedding passes through
        // untouched.
        if !self.encoder.is_empty() {
            if let Some(n) = &self.encoder_norm {
                x = apply_norm(n, &x)?;
                Self::capture_layer(&mut trace, &x, true);
            }
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_decoder(
        &self,
        x0: Tensor,
        tgt_ranges: &[Range<usize>],
        enc_out: &Tensor,
        src_ranges: &[Range<usize>],
        bypass: &BypassSpec,
        mode: &mut Mode,
        mut trace: Option<&mut Vec<Vec<f32>>>,
        mut align: Option<&mut Vec<AttnCapture>>,
    ) -> Result<Tensor> {
        Self::capture_layer(&mut trace, &x0, false);
        let mut x = x0;
        let heads = self.config().heads;
        for (j, layer) in self.decoder.iter().enumerate() {
            let index = j + 1;
            if !bypass.skips(index, SkipKind::SelfAttention) {
                x = self.sublayer(&x, &layer.norm1, mode, |h| {
                    attn_block(&layer.self_attn, h, h, tgt_ranges, tgt_ranges, heads, true, None)
                })?;
            }
            if !bypass.skips(index, SkipKind::CrossAttention) {
                let mut layer_capture: Option<AttnCapture> = align.is_some().then(Vec::new);
                x = self.sublayer(&x, &layer.norm2, mode, |h| {
                    attn_block(
                        &layer.cross_attn,
                        h,
                        enc_out,
                        tgt_ranges,
                        src_ranges,
                        heads,
                        false,
                        layer_capture.as_mut(),
                    )
                })?;
                if let Some(a) = align.as_deref_mut() {
                    a.push(layer_capture.unwrap_or_default());
                }
            } else if let Some(a) = align.as_deref_mut() {
                a.push(AttnCapture::new());
            }
            x = self.sublayer(&x, &layer.norm3, mode, |h| ff_block(&layer.ff, h))?;
            Self::capture_layer(&mut trace, &x, false);
        }
        if let Some(n) = &self.decoder_norm {
            x = apply_norm(n, &x)?;
            Self::capture_layer(&mut trace, &x, true);
        }
        Ok(x)
    }

    /// Training-mode forward to the smoothed cross-entropy loss.
    pub fn training_loss(
        &self,
        batch: &Batch,
        label_smoothing: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let src = ragged_rows(&batch.source, &batch.src_lens);
        let tgt = ragged_rows(&batch.decoder_input, &batch.tgt_lens);
        let labels = ragged_labels(batch);
        let mut mode = Mode::Train(rng);
        let enc_in = self.embed(&src, &mut mode)?;
        let enc = self.run_encoder(enc_in, &src.ranges, &mut mode, None)?;
        let dec_in = self.embed(&tgt, &mut mode)?;
        let dec = self.run_decoder(
            dec_in,
            &tgt.ranges,
            &enc,
            &src.ranges,
            &BypassSpec::none(),
            &mut mode,
            None,
            None,
        )?;
        let logits = matmul_nt(&dec, &self.embedding)?;
        cross_entropy(&logits, &labels, label_smoothing, PAD)
    }

    /// Evaluation-mode logits over the ragged label positions.
    pub fn eval_logits(&self, batch: &Batch) -> Result<(Tensor, Vec<u32>)> {
        let src = ragged_rows(&batch.source, &batch.src_lens);
        let tgt = ragged_rows(&batch.decoder_input, &batch.tgt_lens);
        let labels = ragged_labels(batch);
        let mut mode = Mode::Eval;
        let enc_in = self.embed(&src, &mut mode)?;
        let enc = self.run_encoder(enc_in, &src.ranges, &mut mode, None)?;
        let dec_in = self.embed(&tgt, &mut mode)?;
        let dec = self.run_decoder(
            dec_in,
            &tgt.ranges,
            &enc,
            &src.ranges,
            &BypassSpec::none(),
            &mut mode,
            None,
            None,
        )?;
        Ok((matmul_nt(&dec, &self.embedding)?, labels))
    }

    /// Teacher-forced next-token accuracy over non-pad positions, as a
    /// percentage. Argmax ties resolve to the lowest token id.
    pub fn teacher_forced_accuracy(&self, batches: &[Batch]) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for batch in batches {
            let (logits, labels) = self.eval_logits(batch)?;
            let v = self.config().vocab_size;
            let ld = logits.data();
            for (i, &label) in labels.iter().enumerate() {
                let row = &ld[i * v..i * v + v];
                if argmax_lowest(row) == label as usize {
                    correct += 1;
                }
                total += 1;
            }
        }
        Ok(100.0 * correct as f64 / total.max(1) as f64)
    }

    /// Evaluation-mode forward with full capture: every encoder and
    /// decoder layer output plus every cross-attention matrix, under the
    /// given bypass.
    pub fn forward_traced(&self, batch: &Batch, bypass: BypassSpec) -> Result<BatchTrace> {
        bypass.validate(self.config().decoder_depth)?;
        let src = ragged_rows(&batch.source, &batch.src_lens);
        let tgt = ragged_rows(&batch.decoder_input, &batch.tgt_lens);
        let mut mode = Mode::Eval;
        let mut enc_layers: Vec<Vec<f32>> = Vec::new();
        let enc_in = self.embed(&src, &mut mode)?;
        let enc = self.run_encoder(enc_in, &src.ranges, &mut mode, Some(&mut enc_layers))?;
        let mut dec_layers: Vec<Vec<f32>> = Vec::new();
        let mut align: Vec<AttnCapture> = Vec::new();
        let dec_in = self.embed(&tgt, &mut mode)?;
        self.run_decoder(
            dec_in,
            &tgt.ranges,
            &enc,
            &src.ranges,
            &bypass,
            &mut mode,
            Some(&mut dec_layers),
            Some(&mut align),
        )?;

        let d = self.config().d_model;
        let heads = self.config().heads;
        let mut sentences = Vec::with_capacity(batch.size());
        for s in 0..batch.size() {
            let sr = src.ranges[s].clone();
            let tr = tgt.ranges[s].clone();
            let slice = |rows: &Vec<f32>, r: &Range<usize>| rows[r.start * d..r.end * d].to_vec();
            let encoder_layers: Vec<Vec<f32>> = enc_layers.iter().map(|l| slice(l, &sr)).collect();
            let decoder_layers: Vec<Vec<f32>> = dec_layers.iter().map(|l| slice(l, &tr)).collect();
            let mut alignments = Vec::with_capacity(align.len() * heads);
            for layer_cap in &align {
                if layer_cap.is_empty() {
                    for _ in 0..heads {
                        alignments.push(Vec::new());
                    }
                } else {
                    for h in 0..heads {
                        alignments.push(layer_cap[s][h].clone());
                    }
                }
            }
            sentences.push(SentenceTrace {
                encoder_layers,
                decoder_layers,
                alignments,
                src_len: sr.len(),
                tgt_len: tr.len(),
                labels: batch.labels.row(s)[..batch.tgt_lens[s]].to_vec(),
            });
        }
        Ok(BatchTrace { sentences })
    }

    /// Encode one sentence and detach the final representation for
    /// autoregressive decoding.
    pub fn encode_source(&self, source: &[u32]) -> Result<EncodedSource> {
        if source.is_empty() {
            return Err(Error::EmptyInput("empty source sentence".into()));
        }
        let ragged = Ragged {
            ids: source.to_vec(),
            ranges: vec![0..source.len()],
            positions: (0..source.len()).collect(),
        };
        let mut mode = Mode::Eval;
        let x = self.embed(&ragged, &mut mode)?;
        let enc = self.run_encoder(x, &ragged.ranges, &mut mode, None)?;
        Ok(EncodedSource {
            rows: enc.to_vec(),
            len: source.len(),
            d_model: self.config().d_model,
        })
    }

    /// Per-layer encoder outputs for every sentence of a batch:
    /// `result[sentence][layer]` is a `src_len * d_model` buffer.
    pub fn encode_traced(&self, batch: &Batch) -> Result<Vec<Vec<Vec<f32>>>> {
        let src = ragged_rows(&batch.source, &batch.src_lens);
        let mut mode = Mode::Eval;
        let x = self.embed(&src, &mut mode)?;
        let mut layers: Vec<Vec<f32>> = Vec::new();
        self.run_encoder(x, &src.ranges, &mut mode, Some(&mut layers))?;
        let d = self.config().d_model;
        Ok(src
            .ranges
            .iter()
            .map(|r| layers.iter().map(|l| l[r.start * d..r.end * d].to_vec()).collect())
            .collect())
    }

    /// Per-layer encoder outputs of one sentence (`encoder_depth + 1`
    /// entries of `len * d_model`).
    pub fn encode_layers(&self, source: &[u32]) -> Result<Vec<Vec<f32>>> {
        if source.is_empty() {
            return Err(Error::EmptyInput("empty source sentence".into()));
        }
        let ragged = Ragged {
            ids: source.to_vec(),
            ranges: vec![0..source.len()],
            positions: (0..source.len()).collect(),
        };
        let mut mode = Mode::Eval;
        let x = self.embed(&ragged, &mut mode)?;
        let mut layers: Vec<Vec<f32>> = Vec::new();
        self.run_encoder(x, &ragged.ranges, &mut mode, Some(&mut layers))?;
        Ok(layers)
    }

    /// Next-token logits for a set of decoder prefixes (each starting with
    /// `bos`) against one encoded source. Returns one vocabulary row per
    /// prefix.
    pub fn decode_prefix_logits(
        &self,
        enc: &EncodedSource,
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f32>>> {
        if prefixes.is_empty() {
            return Err(Error::EmptyInput("no decoder prefixes".into()));
        }
        let d = self.config().d_model;
        let mut ids = Vec::new();
        let mut ranges = Vec::with_capacity(prefixes.len());
        let mut positions = Vec::new();
        for p in prefixes {
            let start = ids.len();
            ids.extend_from_slice(p);
            positions.extend(0..p.len());
            ranges.push(start..start + p.len());
        }
        let ragged = Ragged { ids, ranges: ranges.clone(), positions };
        let enc_t = Tensor::from_vec(vec![enc.len, d], enc.rows.clone())?;
        let src_ranges: Vec<Range<usize>> = vec![0..enc.len; prefixes.len()];
        let mut mode = Mode::Eval;
        let x = self.embed(&ragged, &mut mode)?;
        let dec = self.run_decoder(
            x,
            &ranges,
            &enc_t,
            &src_ranges,
            &BypassSpec::none(),
            &mut mode,
            None,
            None,
        )?;
        let dd = dec.data();
        let mut last_rows = vec![0.0f32; prefixes.len() * d];
        for (i, r) in ranges.iter().enumerate() {
            last_rows[i * d..i * d + d].copy_from_slice(&dd[(r.end - 1) * d..r.end * d]);
        }
        drop(dd);
        let last = Tensor::from_vec(vec![prefixes.len(), d], last_rows)?;
        let logits = matmul_nt(&last, &self.embedding)?;
        let lv = logits.to_vec();
        let v = self.config().vocab_size;
        Ok((0..prefixes.len()).map(|i| lv[i * v..i * v + v].to_vec()).collect())
    }
}

/// Argmax with ties resolved to the lowest index.
pub(crate) fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = 0usize;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, SentencePair, BOS};
    use crate::model::{ModelConfig, NormPlacement};
    use rand::{Rng, SeedableRng};

    fn toy_config(enc: usize, dec: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            encoder_depth: enc,
            decoder_depth: dec,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            vocab_size: 12,
            dropout: 0.0,
            max_len: 16,
            norm_placement: NormPlacement::Pre,
            seed,
        }
    }

    fn batch_of(pairs: &[SentencePair]) -> Batch {
        let refs: Vec<&SentencePair> = pairs.iter().collect();
        Batch::from_pairs(&refs)
    }

    fn pair(src: &[u32], tgt: &[u32]) -> SentencePair {
        SentencePair { source: src.to_vec(), target: tgt.to_vec() }
    }

    #[test]
    fn zero_depth_encoder_trace_has_only_the_embedding_layer() {
        let model = TransformerModel::build(toy_config(0, 1, 3)).unwrap();
        let layers = model.encode_layers(&[4, 5, 6]).unwrap();
        assert_eq!(layers.len(), 1);
        assert_eq!(layers[0].len(), 3 * 8);
    }

    #[test]
    fn trace_index_zero_is_scaled_embedding_plus_positional_encoding() {
        let model = TransformerModel::build(toy_config(1, 1, 4)).unwrap();
        let batch = batch_of(&[pair(&[5, 7], &[6, 9, 4])]);
        let trace = model.forward_traced(&batch, BypassSpec::none()).unwrap();
        let emb = model.embedding.to_vec();
        let d = 8;
        let scale = (d as f32).sqrt();
        let dec0 = &trace.sentences[0].decoder_layers[0];
        let input = [BOS, 6, 9, 4];
        for (pos, &tok) in input.iter().enumerate() {
            for j in 0..d {
                let want = emb[tok as usize * d + j] * scale + model.pos_enc[pos * d + j];
                assert_eq!(dec0[pos * d + j], want);
            }
        }
    }

    #[test]
    fn padded_sentences_match_their_solo_forward_bitwise() {
        let model = TransformerModel::build(toy_config(2, 2, 5)).unwrap();
        let long = pair(&[4, 5, 6, 7, 8], &[9, 10, 11, 4]);
        let short = pair(&[9, 10], &[5, 6]);
        let batched = model
            .forward_traced(&batch_of(&[long.clone(), short.clone()]), BypassSpec::none())
            .unwrap();
        let solo = model.forward_traced(&batch_of(&[short]), BypassSpec::none()).unwrap();
        let a = &batched.sentences[1];
        let b = &solo.sentences[0];
        assert_eq!(a.encoder_layers, b.encoder_layers, "pad rows leaked into attention");
        assert_eq!(a.decoder_layers, b.decoder_layers);
        assert_eq!(a.alignments, b.alignments);
    }

    #[test]
    fn captured_alignment_rows_are_distributions_over_source_positions() {
        let model = TransformerModel::build(toy_config(2, 2, 6)).unwrap();
        let batch = batch_of(&[pair(&[4, 5, 6], &[7, 8]), pair(&[9, 10], &[11, 4, 5])]);
        let trace = model.forward_traced(&batch, BypassSpec::none()).unwrap();
        for s in &trace.sentences {
            assert_eq!(s.alignments.len(), 2 * 2); // layers x heads
            for mat in &s.alignments {
                assert_eq!(mat.len(), s.tgt_len * s.src_len);
                for t in 0..s.tgt_len {
                    let sum: f32 = mat[t * s.src_len..(t + 1) * s.src_len].iter().sum();
                    assert!((sum - 1.0).abs() < 1e-5, "row sum {sum}");
                }
            }
        }
    }

    #[test]
    fn dropout_zero_train_and_eval_agree() {
        let model = TransformerModel::build(toy_config(2, 2, 7)).unwrap();
        let batch = batch_of(&[pair(&[4, 5, 6], &[7, 8])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train_loss = model.training_loss(&batch, 0.0, &mut rng).unwrap().item();
        let (logits, labels) = model.eval_logits(&batch).unwrap();
        let eval_loss = cross_entropy(&logits, &labels, 0.0, PAD).unwrap().item();
        assert_eq!(train_loss, eval_loss);
    }

    #[test]
    fn dropout_draws_are_deterministic_given_the_stream() {
        let cfg = ModelConfig { dropout: 0.2, ..toy_config(1, 1, 8) };
        let model = TransformerModel::build(cfg).unwrap();
        let batch = batch_of(&[pair(&[4, 5, 6], &[7, 8])]);
        let a = model
            .training_loss(&batch, 0.1, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap()
            .item();
        let b = model
            .training_loss(&batch, 0.1, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap()
            .item();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_mask_blocks_future_target_tokens() {
        let model = TransformerModel::build(toy_config(1, 2, 9)).unwrap();
        let base = pair(&[4, 5, 6, 7], &[8, 9, 10, 11, 4]);
        let mut changed = base.clone();
        let t = 3; // change target token index 3 = decoder input position 4
        changed.target[t] = 5;
        let tr_a = model.forward_traced(&batch_of(&[base]), BypassSpec::none()).unwrap();
        let tr_b = model.forward_traced(&batch_of(&[changed]), BypassSpec::none()).unwrap();
        let d = 8;
        for (la, lb) in tr_a.sentences[0]
            .decoder_layers
            .iter()
            .zip(tr_b.sentences[0].decoder_layers.iter())
        {
            assert_eq!(la[..(t + 1) * d], lb[..(t + 1) * d], "future token leaked backwards");
        }
        let top_a = tr_a.sentences[0].decoder_layers.last().unwrap();
        let top_b = tr_b.sentences[0].decoder_layers.last().unwrap();
        assert_ne!(top_a[(t + 1) * d..], top_b[(t + 1) * d..]);
    }

    #[test]
    fn bypassed_sublayer_parameters_are_never_read() {
        let model = TransformerModel::build(toy_config(1, 3, 10)).unwrap();
        let batch = batch_of(&[pair(&[4, 5, 6], &[7, 8, 9])]);
        let j = 2;
        for (skip, params) in [
            (BypassSpec::skip_cross(j), &model.decoder[j - 1].cross_attn),
            (BypassSpec::skip_self(j), &model.decoder[j - 1].self_attn),
        ] {
            let before = model.forward_traced(&batch, skip).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let saved: Vec<Vec<f32>> = [&params.wq, &params.wk, &params.wv, &params.wo]
                .iter()
                .map(|t| t.to_vec())
                .collect();
            for t in [&params.wq, &params.wk, &params.wv, &params.wo] {
                t.set_data((0..t.numel()).map(|_| rng.random_range(-1.0f32..1.0)).collect());
            }
            let after = model.forward_traced(&batch, skip).unwrap();
            for (a, b) in before.sentences[0]
                .decoder_layers
                .iter()
                .zip(after.sentences[0].decoder_layers.iter())
            {
                assert_eq!(a, b, "bypassed parameters influenced the output");
            }
            for (t, data) in [&params.wq, &params.wk, &params.wv, &params.wo]
                .iter()
                .zip(saved)
            {
                t.set_data(data);
            }
        }
        // layers below the bypass are bitwise identical to the clean run
        let clean = model.forward_traced(&batch, BypassSpec::none()).unwrap();
        let skipped = model.forward_traced(&batch, BypassSpec::skip_cross(3)).unwrap();
        for l in 0..3 {
            assert_eq!(
                clean.sentences[0].decoder_layers[l],
                skipped.sentences[0].decoder_layers[l]
            );
        }
    }

    // Independent f64 re-implementation of the three-sub-layer forward,
    // stepped tensor by tensor on a two-token example.
    mod oracle {
        pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        out[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            out
        }

        pub fn add_bias(x: &mut [f64], b: &[f64]) {
            let d = b.len();
            for (i, v) in x.iter_mut().enumerate() {
                *v += b[i % d];
            }
        }

        pub fn ln(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
            let d = gain.len();
            let rows = x.len() / d;
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = gain[j] * (row[j] - mean) * inv + bias[j];
                }
            }
            out
        }

        pub fn softmax_row(row: &mut [f64]) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }

        /// Single-head attention q[mxd] against k,v[nxd] with optional
        /// causal masking.
        pub fn attention(q: &[f64], k: &[f64], v: &[f64], m: usize, n: usize, d: usize, causal: bool) -> Vec<f64> {
            let scale = 1.0 / (d as f64).sqrt();
            let mut out = vec![0.0; m * d];
            for i in 0..m {
                let limit = if causal { (i + 1).min(n) } else { n };
                let mut row = vec![0.0; limit];
                for (jj, r) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += q[i * d + c] * k[jj * d + c];
                    }
                    *r = s * scale;
                }
                softmax_row(&mut row);
                for (jj, p) in row.iter().enumerate() {
                    for c in 0..d {
                        out[i * d + c] += p * v[jj * d + c];
                    }
                }
            }
            out
        }
    }

    #[test]
    fn unbypassed_decoder_matches_hand_stepped_three_sublayer_oracle() {
        // one layer, one head, d=4: small enough to step by hand
        let cfg = ModelConfig {
            encoder_depth: 1,
            decoder_depth: 1,
            d_model: 4,
            heads: 1,
            d_ff: 8,
            vocab_size: 9,
            dropout: 0.0,
            max_len: 8,
            norm_placement: NormPlacement::Pre,
            seed: 21,
        };
        let model = TransformerModel::build(cfg).unwrap();
        let src = [4u32, 5];
        let tgt = [6u32];
        let batch = batch_of(&[pair(&src, &tgt)]);
        let trace = model.forward_traced(&batch, BypassSpec::none()).unwrap();

        let d = 4usize;
        let f64v = |t: &Tensor| -> Vec<f64> { t.to_vec().iter().map(|&v| v as f64).collect() };
        let emb = f64v(&model.embedding);
        let scale = (d as f64).sqrt();
        let eps = LN_EPS as f64;

        // embedding layer
        let embed_rows = |ids: &[u32]| -> Vec<f64> {
            let mut x = vec![0.0; ids.len() * d];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    x[i * d + j] =
                        emb[id as usize * d + j] * scale + model.pos_enc[i * d + j] as f64;
                }
            }
            x
        };
        let attn_oracle = |a: &super::AttnParams, xq: &[f64], xkv: &[f64], m: usize, n: usize, causal: bool| {
            let mut q = oracle::mm(xq, &f64v(&a.wq), m, d, d);
            oracle::add_bias(&mut q, &f64v(&a.bq));
            let mut k = oracle::mm(xkv, &f64v(&a.wk), n, d, d);
            oracle::add_bias(&mut k, &f64v(&a.bk));
            let mut v = oracle::mm(xkv, &f64v(&a.wv), n, d, d);
            oracle::add_bias(&mut v, &f64v(&a.bv));
            let ctx = oracle::attention(&q, &k, &v, m, n, d, causal);
            let mut out = oracle::mm(&ctx, &f64v(&a.wo), m, d, d);
            oracle::add_bias(&mut out, &f64v(&a.bo));
            out
        };
        let ff_oracle = |f: &super::FfParams, x: &[f64], m: usize| {
            let mut h = oracle::mm(x, &f64v(&f.w1), m, d, 8);
            oracle::add_bias(&mut h, &f64v(&f.b1));
            for v in h.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let mut out = oracle::mm(&h, &f64v(&f.w2), m, 8, d);
            oracle::add_bias(&mut out, &f64v(&f.b2));
            out
        };
        let residual = |x: &[f64], h: &[f64]| -> Vec<f64> {
            x.iter().zip(h.iter()).map(|(a, b)| a + b).collect()
        };

        // encoder
        let el = &model.encoder[0];
        let mut ex = embed_rows(&src);
        let h = attn_oracle(
            &el.self_attn,
            &oracle::ln(&ex, &f64v(&el.norm1.gain), &f64v(&el.norm1.bias), eps),
            &oracle::ln(&ex, &f64v(&el.norm1.gain), &f64v(&el.norm1.bias), eps),
            2,
            2,
            false,
        );
        ex = residual(&ex, &h);
        let h = ff_oracle(&el.ff, &oracle::ln(&ex, &f64v(&el.norm2.gain), &f64v(&el.norm2.bias), eps), 2);
        ex = residual(&ex, &h);
        let enc_norm = model.encoder_norm.as_ref().unwrap();
        let enc_out = oracle::ln(&ex, &f64v(&enc_norm.gain), &f64v(&enc_norm.bias), eps);

        // decoder: bos + one target token = 2 positions
        let dl = &model.decoder[0];
        let mut dx = embed_rows(&[BOS, 6]);
        let h = attn_oracle(
            &dl.self_attn,
            &oracle::ln(&dx, &f64v(&dl.norm1.gain), &f64v(&dl.norm1.bias), eps),
            &oracle::ln(&dx, &f64v(&dl.norm1.gain), &f64v(&dl.norm1.bias), eps),
            2,
            2,
            true,
        );
        dx = residual(&dx, &h);
        let h = attn_oracle(
            &dl.cross_attn,
            &oracle::ln(&dx, &f64v(&dl.norm2.gain), &f64v(&dl.norm2.bias), eps),
            &enc_out,
            2,
            2,
            false,
        );
        dx = residual(&dx, &h);
        let h = ff_oracle(&dl.ff, &oracle::ln(&dx, &f64v(&dl.norm3.gain), &f64v(&dl.norm3.bias), eps), 2);
        dx = residual(&dx, &h);
        let dec_norm = model.decoder_norm.as_ref().unwrap();
        let dec_out = oracle::ln(&dx, &f64v(&dec_norm.gain), &f64v(&dec_norm.bias), eps);

        let got_enc = &trace.sentences[0].encoder_layers[1];
        for (g, w) in got_enc.iter().zip(enc_out.iter()) {
            assert!((*g as f64 - w).abs() < 1e-4, "encoder {g} vs {w}");
        }
        let got_dec = &trace.sentences[0].decoder_layers[1];
        for (g, w) in got_dec.iter().zip(dec_out.iter()) {
            assert!((*g as f64 - w).abs() < 1e-4, "decoder {g} vs {w}");
        }
    }

    #[test]
    fn over_length_input_is_a_length_error() {
        let model = TransformerModel::build(toy_config(1, 1, 2)).unwrap();
        let ids: Vec<u32> = (0..20).map(|i| 4 + (i % 8)).collect();
        let batch = batch_of(&[pair(&ids, &[4, 5])]);
        assert!(matches!(
            model.forward_traced(&batch, BypassSpec::none()),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn post_norm_placement_also_runs() {
        let cfg = ModelConfig { norm_placement: NormPlacement::Post, ..toy_config(2, 2, 31) };
        let model = TransformerModel::build(cfg).unwrap();
        let batch = batch_of(&[pair(&[4, 5, 6], &[7, 8])]);
        let trace = model.forward_traced(&batch, BypassSpec::none()).unwrap();
        assert_eq!(trace.sentences[0].encoder_layers.len(), 3);
        assert_eq!(trace.sentences[0].decoder_layers.len(), 3);
        let (logits, _) = model.eval_logits(&batch).unwrap();
        assert!(logits.to_vec().iter().all(|v| v.is_finite()));
    }
}
