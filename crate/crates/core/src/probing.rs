//! Per-layer probes against a frozen model.
//!
//! A probe is one trained linear projection into the model's own frozen
//! classifier. Encoder probes additionally learn an alignment-weight
//! vector `w`: the captured cross-attention matrices of all decoder layers
//! and heads are fused with `softmax(w)` into a single soft alignment, and
//! the probed encoder representations are carried to target positions by
//! `T_E = A^T * E` before projection. Decoder probes read the analyzed
//! layer directly under teacher forcing, optionally with one sub-layer of
//! that layer bypassed.
//!
//! Every batch of a probing run re-checks the fusion invariants: the head
//! distribution sums to one, every fused alignment column is a
//! distribution over source positions, and projected rows stay inside the
//! convex hull of the encoder rows (max-norm bound).

use crate::checkpoint::{Checkpoint, Entry};
use crate::data::{make_batches, Corpus, SentencePair, PAD};
use crate::error::{Error, Result};
use crate::model::{argmax_lowest, BypassSpec, ModelConfig, TransformerModel};
use crate::tensor::{
    concat_rows, cross_entropy, matmul, matmul_nt, reshape, softmax_rows, transpose, Tensor,
};
use crate::training::{adam_step, AdamState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeSide {
    Encoder,
    Decoder,
}

impl ProbeSide {
    pub fn name(self) -> &'static str {
        match self {
            ProbeSide::Encoder => "encoder",
            ProbeSide::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    SkipSelfAttention,
    SkipCrossAttention,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::SkipSelfAttention => "skip_self",
            Ablation::SkipCrossAttention => "skip_cross",
        }
    }

    pub fn parse(s: &str) -> Result<Ablation> {
        match s {
            "none" => Ok(Ablation::None),
            "skip_self" => Ok(Ablation::SkipSelfAttention),
            "skip_cross" => Ok(Ablation::SkipCrossAttention),
            other => Err(Error::Config(format!("unknown ablation {other}"))),
        }
    }
}

/// One analyzed layer: encoder layer `0..=E` or decoder layer `0..=D`,
/// decoder layers >= 1 optionally with one sub-layer bypassed.
#[derive(Debug, Clone, Copy)]
pub struct ProbeTarget {
    pub side: ProbeSide,
    pub layer: usize,
    pub ablation: Ablation,
}

impl ProbeTarget {
    pub fn encoder(layer: usize) -> Self {
        ProbeTarget { side: ProbeSide::Encoder, layer, ablation: Ablation::None }
    }

    pub fn decoder(layer: usize) -> Self {
        ProbeTarget { side: ProbeSide::Decoder, layer, ablation: Ablation::None }
    }

    pub fn decoder_ablated(layer: usize, ablation: Ablation) -> Self {
        ProbeTarget { side: ProbeSide::Decoder, layer, ablation }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match self.side {
            ProbeSide::Encoder => {
                if self.layer > config.encoder_depth {
                    return Err(Error::Config(format!(
                        "encoder probe layer {} outside depth {}",
                        self.layer, config.encoder_depth
                    )));
                }
                if self.ablation != Ablation::None {
                    return Err(Error::Contract(
                        "ablations apply only to decoder probes".into(),
                    ));
                }
            }
            ProbeSide::Decoder => {
                if self.layer > config.decoder_depth {
                    return Err(Error::Config(format!(
                        "decoder probe layer {} outside depth {}",
                        self.layer, config.decoder_depth
                    )));
                }
                if self.ablation != Ablation::None && self.layer == 0 {
                    return Err(Error::Contract(
                        "the decoder embedding layer has no sub-layers to bypass".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn bypass(&self) -> BypassSpec {
        match self.ablation {
            Ablation::None => BypassSpec::none(),
            Ablation::SkipSelfAttention => BypassSpec::skip_self(self.layer),
            Ablation::SkipCrossAttention => BypassSpec::skip_cross(self.layer),
        }
    }

    /// Stable small integer used to derive per-target seeds.
    fn code(&self) -> u64 {
        let side = match self.side {
            ProbeSide::Encoder => 0u64,
            ProbeSide::Decoder => 1,
        };
        let ab = match self.ablation {
            Ablation::None => 0u64,
            Ablation::SkipSelfAttention => 1,
            Ablation::SkipCrossAttention => 2,
        };
        side * 1024 + self.layer as u64 * 4 + ab
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionInit {
    Xavier,
    Identity,
}

/// Trainable probe parameters: the projection matrix and, for encoder
/// probes, the alignment-weight vector `w` (one weight per captured
/// cross-attention matrix, `decoder_depth * heads` in total).
pub struct ProbeParams {
    pub projection: Tensor,
    pub align_weights: Option<Tensor>,
}

impl ProbeParams {
    pub fn new(target: &ProbeTarget, config: &ModelConfig, init: ProjectionInit, seed: u64) -> ProbeParams {
        let d = config.d_model;
        let projection = match init {
            ProjectionInit::Identity => {
                let mut data = vec![0.0f32; d * d];
                for i in 0..d {
                    data[i * d + i] = 1.0;
                }
                Tensor::parameter(vec![d, d], data).expect("sized buffer")
            }
            ProjectionInit::Xavier => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let limit = (6.0 / (2 * d) as f64).sqrt() as f32;
                Tensor::parameter(vec![d, d], (0..d * d).map(|_| rng.random_range(-limit..limit)).collect())
                    .expect("sized buffer")
            }
        };
        let align_weights = match target.side {
            ProbeSide::Encoder => Some(
                Tensor::parameter(vec![1, config.alignment_width()], vec![0.0; config.alignment_width()])
                    .expect("sized buffer"),
            ),
            ProbeSide::Decoder => None,
        };
        ProbeParams { projection, align_weights }
    }

    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("projection".to_string(), self.projection.clone())];
        if let Some(w) = &self.align_weights {
            out.push(("align_weights".to_string(), w.clone()));
        }
        out
    }

    fn snapshot(&self) -> (Vec<f32>, Option<Vec<f32>>) {
        (self.projection.to_vec(), self.align_weights.as_ref().map(|w| w.to_vec()))
    }

    fn restore(&self, snap: &(Vec<f32>, Option<Vec<f32>>)) {
        self.projection.set_data(snap.0.clone());
        if let (Some(w), Some(data)) = (&self.align_weights, &snap.1) {
            w.set_data(data.clone());
        }
    }

    pub fn to_checkpoint(&self, target: &ProbeTarget) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let (d0, d1) = self.projection.dims2().expect("projection is rank 2");
        ckpt.entries.insert(
            "projection".into(),
            Entry { dims: vec![d0 as u64, d1 as u64], data: self.projection.to_vec() },
        );
        if let Some(w) = &self.align_weights {
            let (w0, w1) = w.dims2().expect("weights are rank 2");
            ckpt.entries.insert(
                "align_weights".into(),
                Entry { dims: vec![w0 as u64, w1 as u64], data: w.to_vec() },
            );
        }
        let side = match target.side {
            ProbeSide::Encoder => 0.0,
            ProbeSide::Decoder => 1.0,
        };
        let ab = match target.ablation {
            Ablation::None => 0.0,
            Ablation::SkipSelfAttention => 1.0,
            Ablation::SkipCrossAttention => 2.0,
        };
        ckpt.entries.insert(
            "meta.probe".into(),
            Entry { dims: vec![3], data: vec![side, target.layer as f32, ab] },
        );
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(ProbeParams, ProbeTarget)> {
        let proj = ckpt.entries.get("projection").ok_or_else(|| Error::CheckpointMismatch {
            name: "projection".into(),
            msg: "missing".into(),
        })?;
        let projection = Tensor::parameter(
            proj.dims.iter().map(|&d| d as usize).collect(),
            proj.data.clone(),
        )?;
        let align_weights = match ckpt.entries.get("align_weights") {
            Some(e) => Some(Tensor::parameter(
                e.dims.iter().map(|&d| d as usize).collect(),
                e.data.clone(),
            )?),
            None => None,
        };
        let meta = ckpt.entries.get("meta.probe").ok_or_else(|| Error::CheckpointMismatch {
            name: "meta.probe".into(),
            msg: "missing".into(),
        })?;
        let target = ProbeTarget {
            side: if meta.data[0] == 0.0 { ProbeSide::Encoder } else { ProbeSide::Decoder },
            layer: meta.data[1] as usize,
            ablation: match meta.data[2] as u32 {
                0 => Ablation::None,
                1 => Ablation::SkipSelfAttention,
                _ => Ablation::SkipCrossAttention,
            },
        };
        Ok((ProbeParams { projection, align_weights }, target))
    }
}

/// Softmax-fused alignment: `p` over the `d*k` heads and the combined
/// matrix `A`, oriented `[src_len x tgt_len]` (columns are target
/// positions). Both stay differentiable with respect to `w`.
pub struct FusedAlignment {
    pub p: Tensor,
    pub a: Tensor,
}

/// Fuse the captured per-head matrices (capture orientation
/// `[tgt_len x src_len]`) under `p = softmax(w)`: `A = sum_i p_i * A_i`
/// with each `A_i` transposed to `[src_len x tgt_len]`.
pub fn fuse_alignments(
    w: &Tensor,
    heads: &[Vec<f32>],
    src_len: usize,
    tgt_len: usize,
) -> Result<FusedAlignment> {
    let (rows, dk) = w.dims2()?;
    if rows != 1 || dk != heads.len() {
        return Err(Error::Config(format!(
            "alignment weights cover {dk} matrices but {} were captured",
            heads.len()
        )));
    }
    let mut stack = vec![0.0f32; dk * src_len * tgt_len];
    for (i, mat) in heads.iter().enumerate() {
        if mat.len() != src_len * tgt_len {
            return Err(Error::BadShape {
                op: "fuse_alignments",
                expected: format!("{tgt_len} x {src_len} capture"),
                got: vec![mat.len()],
            });
        }
        let base = i * src_len * tgt_len;
        for t in 0..tgt_len {
            for s in 0..src_len {
                stack[base + s * tgt_len + t] = mat[t * src_len + s];
            }
        }
    }
    let p = softmax_rows(w, None)?;
    let flat = matmul(&p, &Tensor::from_vec(vec![dk, src_len * tgt_len], stack)?)?;
    let a = reshape(&flat, vec![src_len, tgt_len])?;
    Ok(FusedAlignment { p, a })
}

/// Re-order source representations to the target side: `T_E = A^T * E`,
/// one row per target position.
pub fn project_to_target(e: &Tensor, align: &FusedAlignment) -> Result<Tensor> {
    matmul(&transpose(&align.a)?, e)
}

fn verify_fusion(align: &FusedAlignment, te: &Tensor, e: &Tensor) -> Result<()> {
    let p = align.p.data();
    let psum: f32 = p.iter().sum();
    if (psum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("head distribution sums to {psum}")));
    }
    drop(p);
    let (s, t) = align.a.dims2()?;
    let a = align.a.data();
    for col in 0..t {
        let mut sum = 0.0f32;
        for row in 0..s {
            sum += a[row * t + col];
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!("alignment column {col} sums to {sum}")));
        }
    }
    drop(a);
    let e_max = e.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let te_max = te.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if te_max > e_max * (1.0 + 1e-5) + 1e-6 {
        return Err(Error::Contract(format!(
            "projected row max-norm {te_max} escapes the encoder hull {e_max}"
        )));
    }
    Ok(())
}

/// Captured inputs for one sentence of one probe target.
#[derive(Debug, Clone)]
pub struct CaptureSentence {
    /// Encoder targets: the probed layer's rows `[src_len x d]`;
    /// decoder targets: the probed layer's rows `[tgt_len x d]`.
    pub features: Vec<f32>,
    pub feature_len: usize,
    /// Encoder targets only: all `d*k` cross-attention matrices in capture
    /// orientation `[tgt_len x src_len]`.
    pub heads: Vec<Vec<f32>>,
    pub src_len: usize,
    pub labels: Vec<u32>,
}

/// Frozen-forward captures for a pair list, ready for probe training.
pub struct ProbeDataset {
    pub sentences: Vec<CaptureSentence>,
    pub d_model: usize,
    pub classifier: Tensor,
}

const CAPTURE_BATCH_TOKENS: usize = 2000;

/// Captures for one batch, in batch order.
pub fn capture_from_batch(
    model: &TransformerModel,
    batch: &crate::data::Batch,
    target: &ProbeTarget,
    encoder_override: Option<&TransformerModel>,
) -> Result<Vec<CaptureSentence>> {
    target.validate(model.config())?;
    let trace = model.forward_traced(batch, target.bypass())?;
    let override_layers = match encoder_override {
        Some(m) => Some(m.encode_traced(batch)?),
        None => None,
    };
    let mut sentences = Vec::with_capacity(batch.size());
    for (s, st) in trace.sentences.into_iter().enumerate() {
        let (features, feature_len, heads) = match target.side {
            ProbeSide::Encoder => {
                let features = match &override_layers {
                    Some(per_sentence) => per_sentence[s][target.layer].clone(),
                    None => st.encoder_layers[target.layer].clone(),
                };
                (features, st.src_len, st.alignments.clone())
            }
            ProbeSide::Decoder => {
                (st.decoder_layers[target.layer].clone(), st.tgt_len, Vec::new())
            }
        };
        sentences.push(CaptureSentence {
            features,
            feature_len,
            heads,
            src_len: st.src_len,
            labels: st.labels,
        });
    }
    Ok(sentences)
}

/// Run the frozen model over `pairs` (teacher forcing, eval mode) and keep
/// what the probe target needs. With `encoder_override`, encoder features
/// come from the override model while alignments still come from `model`.
pub fn capture_dataset(
    model: &TransformerModel,
    pairs: &[SentencePair],
    target: &ProbeTarget,
    encoder_override: Option<&TransformerModel>,
) -> Result<ProbeDataset> {
    let max_len = model.config().max_len;
    let batches = make_batches(pairs, CAPTURE_BATCH_TOKENS, max_len, 0)?;
    let mut sentences = Vec::with_capacity(pairs.len());
    for batch in &batches {
        sentences.extend(capture_from_batch(model, batch, target, encoder_override)?);
    }
    Ok(ProbeDataset {
        sentences,
        d_model: model.config().d_model,
        classifier: frozen_classifier(model),
    })
}

/// Detached copy of the tied classifier weights.
fn frozen_classifier(model: &TransformerModel) -> Tensor {
    let (name, emb) = model
        .named_parameters()
        .into_iter()
        .find(|(n, _)| n == "embedding.weight")
        .expect("tied embedding exists");
    debug_assert_eq!(name, "embedding.weight");
    Tensor::from_vec(emb.shape(), emb.to_vec()).expect("sized buffer")
}

/// Probe pipeline over captured sentences: fuse -> T_E -> projection ->
/// frozen classifier. Returns ragged logits and their aligned labels.
pub fn probe_logits(
    sentences: &[&CaptureSentence],
    probe: &ProbeParams,
    classifier: &Tensor,
) -> Result<(Tensor, Vec<u32>)> {
    let mut projected = Vec::with_capacity(sentences.len());
    let mut labels = Vec::new();
    for s in sentences {
        let d = s.features.len() / s.feature_len;
        let feat = Tensor::from_vec(vec![s.feature_len, d], s.features.clone())?;
        let h = match &probe.align_weights {
            Some(w) => {
                let fused = fuse_alignments(w, &s.heads, s.src_len, s.labels.len())?;
                let te = project_to_target(&feat, &fused)?;
                verify_fusion(&fused, &te, &feat)?;
                te
            }
            None => feat,
        };
        projected.push(h);
        labels.extend_from_slice(&s.labels);
    }
    let h = concat_rows(&projected)?;
    let proj = matmul(&h, &probe.projection)?;
    let logits = matmul_nt(&proj, classifier)?;
    Ok((logits, labels))
}

/// Spec-facing single-batch probe forward against the frozen model,
/// preserving batch order.
pub fn probe_forward(
    model: &TransformerModel,
    batch: &crate::data::Batch,
    target: &ProbeTarget,
    probe: &ProbeParams,
) -> Result<(Tensor, Vec<u32>)> {
    if !model.frozen() {
        return Err(Error::Contract("probing requires a frozen model".into()));
    }
    let sentences = capture_from_batch(model, batch, target, None)?;
    let refs: Vec<&CaptureSentence> = sentences.iter().collect();
    probe_logits(&refs, probe, &frozen_classifier(model))
}

fn accuracy_on(sentences: &[&CaptureSentence], probe: &ProbeParams, classifier: &Tensor) -> Result<f64> {
    let (logits, labels) = probe_logits(sentences, probe, classifier)?;
    let (_, v) = logits.dims2()?;
    let ld = logits.data();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if argmax_lowest(&ld[i * v..i * v + v]) == label as usize {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / labels.len().max(1) as f64)
}

/// Probe training hyperparameters. The probe optimizer is Adam at a fixed
/// learning rate with no label smoothing.
#[derive(Debug, Clone)]
pub struct ProbeHyperparams {
    pub steps: u64,
    pub lr: f64,
    pub token_budget: usize,
    /// Training pairs are capped to keep capture memory bounded; probes
    /// are linear models and converge well below the full corpus.
    pub train_pairs_cap: usize,
    pub dev_eval_interval: u64,
    pub projection_init: ProjectionInit,
    pub seed: u64,
}

impl ProbeHyperparams {
    pub fn default_suite(seed: u64) -> Self {
        ProbeHyperparams {
            steps: 2000,
            lr: 1e-3,
            token_budget: 512,
            train_pairs_cap: 4000,
            dev_eval_interval: 250,
            projection_init: ProjectionInit::Xavier,
            seed,
        }
    }
}

pub struct TrainedProbe {
    pub params: ProbeParams,
    pub target: ProbeTarget,
    /// Best accuracy seen on the dev split, in percent.
    pub dev_accuracy: f64,
    pub dev_trace: Vec<(u64, f64)>,
}

/// Train one probe on captured frozen-forward data; the best-dev probe is
/// returned. Only the probe parameters receive gradients.
pub fn train_probe(
    model: &TransformerModel,
    corpus: &Corpus,
    target: ProbeTarget,
    hp: &ProbeHyperparams,
) -> Result<TrainedProbe> {
    train_probe_with_override(model, corpus, target, hp, None)
}

fn train_probe_with_override(
    model: &TransformerModel,
    corpus: &Corpus,
    target: ProbeTarget,
    hp: &ProbeHyperparams,
    encoder_override: Option<&TransformerModel>,
) -> Result<TrainedProbe> {
    if !model.frozen() {
        return Err(Error::Contract("probing requires a frozen model".into()));
    }
    target.validate(model.config())?;
    let train_pairs = &corpus.train[..corpus.train.len().min(hp.train_pairs_cap)];
    let train = capture_dataset(model, train_pairs, &target, encoder_override)?;
    let dev = capture_dataset(model, &corpus.dev, &target, encoder_override)?;

    let seed = hp.seed ^ target.code().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let probe = ProbeParams::new(&target, model.config(), hp.projection_init, seed);
    let trainable = probe.trainable();
    let mut adam = AdamState::new(&trainable);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7375_6666_6c65);

    let dev_refs: Vec<&CaptureSentence> = dev.sentences.iter().collect();
    let mut best = probe.snapshot();
    let mut best_acc = accuracy_on(&dev_refs, &probe, &dev.classifier)?;
    let mut dev_trace = vec![(0u64, best_acc)];

    let mut order: Vec<usize> = (0..train.sentences.len()).collect();
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;
    for step in 1..=hp.steps {
        let mut batch: Vec<&CaptureSentence> = Vec::new();
        let mut tokens = 0usize;
        while tokens < hp.token_budget {
            if cursor >= order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let s = &train.sentences[order[cursor]];
            cursor += 1;
            tokens += s.labels.len();
            batch.push(s);
        }
        let (logits, labels) = probe_logits(&batch, &probe, &train.classifier)?;
        let loss = cross_entropy(&logits, &labels, 0.0, PAD)?;
        loss.backward()?;
        adam_step(&trainable, &mut adam, hp.lr, 0.9, 0.98, 1e-9);
        for (_, p) in &trainable {
            p.zero_grad();
        }
        if step % hp.dev_eval_interval == 0 || step == hp.steps {
            let acc = accuracy_on(&dev_refs, &probe, &dev.classifier)?;
            dev_trace.push((step, acc));
            if acc > best_acc {
                best_acc = acc;
                best = probe.snapshot();
            }
        }
    }
    probe.restore(&best);
    Ok(TrainedProbe { params: probe, target, dev_accuracy: best_acc, dev_trace })
}

/// Accuracy of a trained probe on a pair list (argmax over the
/// vocabulary, ties to the lowest token id, percentage of non-pad
/// positions matching the gold labels).
pub fn evaluate_probe(
    model: &TransformerModel,
    pairs: &[SentencePair],
    target: &ProbeTarget,
    probe: &ProbeParams,
) -> Result<f64> {
    evaluate_probe_with_override(model, pairs, target, probe, None)
}

fn evaluate_probe_with_override(
    model: &TransformerModel,
    pairs: &[SentencePair],
    target: &ProbeTarget,
    probe: &ProbeParams,
    encoder_override: Option<&TransformerModel>,
) -> Result<f64> {
    if !model.frozen() {
        return Err(Error::Contract("probing requires a frozen model".into()));
    }
    let ds = capture_dataset(model, pairs, target, encoder_override)?;
    let refs: Vec<&CaptureSentence> = ds.sentences.iter().collect();
    accuracy_on(&refs, probe, &ds.classifier)
}

/// One row of the layer-wise report.
#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub side: ProbeSide,
    pub layer: usize,
    pub ablation: Ablation,
    pub accuracy: f64,
    /// Base rows: improvement over the previous layer. Ablation rows:
    /// accuracy change against the unablated layer.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

/// The default target list: every encoder and decoder layer, plus both
/// sub-layer ablations for decoder layers >= 1.
pub fn suite_targets(config: &ModelConfig) -> Vec<ProbeTarget> {
    let mut targets = Vec::new();
    for layer in 0..=config.encoder_depth {
        targets.push(ProbeTarget::encoder(layer));
    }
    for layer in 0..=config.decoder_depth {
        targets.push(ProbeTarget::decoder(layer));
    }
    for layer in 1..=config.decoder_depth {
        targets.push(ProbeTarget::decoder_ablated(layer, Ablation::SkipSelfAttention));
        targets.push(ProbeTarget::decoder_ablated(layer, Ablation::SkipCrossAttention));
    }
    targets
}

pub struct SuiteResult {
    pub report: ProbeReport,
    pub probes: Vec<TrainedProbe>,
}

/// Train and evaluate one independent probe per target and assemble the
/// layer-wise accuracy table with its delta columns.
pub fn run_probe_suite(
    model: &TransformerModel,
    corpus: &Corpus,
    hp: &ProbeHyperparams,
    targets: &[ProbeTarget],
) -> Result<SuiteResult> {
    let mut probes = Vec::with_capacity(targets.len());
    let mut accuracies = Vec::with_capacity(targets.len());
    for target in targets {
        let trained = train_probe(model, corpus, *target, hp)?;
        let acc = evaluate_probe(model, &corpus.test, target, &trained.params)?;
        accuracies.push(acc);
        probes.push(trained);
    }
    let find = |side: ProbeSide, layer: usize, ablation: Ablation| -> Option<f64> {
        targets
            .iter()
            .position(|t| t.side == side && t.layer == layer && t.ablation == ablation)
            .map(|i| accuracies[i])
    };
    let mut rows = Vec::with_capacity(targets.len());
    for (target, &acc) in targets.iter().zip(accuracies.iter()) {
        let delta = match target.ablation {
            Ablation::None => {
                if target.layer == 0 {
                    None
                } else {
                    find(target.side, target.layer - 1, Ablation::None).map(|prev| acc - prev)
                }
            }
            _ => find(target.side, target.layer, Ablation::None).map(|base| acc - base),
        };
        rows.push(ProbeRow {
            side: target.side,
            layer: target.layer,
            ablation: target.ablation,
            accuracy: acc,
            delta,
        });
    }
    Ok(SuiteResult { report: ProbeReport { rows }, probes })
}

/// Accuracies of probes trained against a randomly initialized encoder
/// (fresh embedding and encoder stack) while alignments still come from
/// the trained model's decoder.
#[derive(Debug, Clone, Copy)]
pub struct RandomEncoderControl {
    pub acc_embedding: f64,
    pub acc_last_layer: f64,
}

pub fn random_encoder_control(
    model: &TransformerModel,
    corpus: &Corpus,
    hp: &ProbeHyperparams,
    fresh_seed: u64,
) -> Result<RandomEncoderControl> {
    let mut control_cfg = model.config().clone();
    control_cfg.seed = fresh_seed;
    let mut control = TransformerModel::build(control_cfg)?;
    control.freeze();

    let run = |layer: usize| -> Result<f64> {
        let target = ProbeTarget::encoder(layer);
        let trained = train_probe_with_override(model, corpus, target, hp, Some(&control))?;
        evaluate_probe_with_override(model, &corpus.test, &target, &trained.params, Some(&control))
    };
    Ok(RandomEncoderControl {
        acc_embedding: run(0)?,
        acc_last_layer: run(model.config().encoder_depth)?,
    })
}

// ── Report serialization ─────────────────────────────────────────────

impl ProbeReport {
    /// CSV with columns `side,layer,ablation,accuracy,delta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("side,layer,ablation,accuracy,delta\n");
        for r in &self.rows {
            let delta = r.delta.map_or(String::new(), |d| format!("{d:.2}"));
            out.push_str(&format!(
                "{},{},{},{:.2},{}\n",
                r.side.name(),
                r.layer,
                r.ablation.name(),
                r.accuracy,
                delta
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<ProbeReport> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    path: "probe report".into(),
                    line: i + 1,
                    msg: format!("expected 5 fields, found {}", fields.len()),
                });
            }
            let parse_err = |msg: &str| Error::Parse {
                path: "probe report".into(),
                line: i + 1,
                msg: msg.into(),
            };
            rows.push(ProbeRow {
                side: match fields[0] {
                    "encoder" => ProbeSide::Encoder,
                    "decoder" => ProbeSide::Decoder,
                    _ => return Err(parse_err("unknown side")),
                },
                layer: fields[1].parse().map_err(|_| parse_err("bad layer"))?,
                ablation: Ablation::parse(fields[2])?,
                accuracy: fields[3].parse().map_err(|_| parse_err("bad accuracy"))?,
                delta: if fields[4].is_empty() {
                    None
                } else {
                    Some(fields[4].parse().map_err(|_| parse_err("bad delta"))?)
                },
            });
        }
        Ok(ProbeReport { rows })
    }

    /// Markdown table mirroring the layer-wise accuracy layout
    /// (Layer | Encoder Acc, Delta | Decoder Acc, Delta | -Self attention |
    /// -Cross attention).
    pub fn markdown(&self) -> String {
        let get = |side: ProbeSide, layer: usize, ablation: Ablation| -> Option<&ProbeRow> {
            self.rows
                .iter()
                .find(|r| r.side == side && r.layer == layer && r.ablation == ablation)
        };
        let max_layer = self.rows.iter().map(|r| r.layer).max().unwrap_or(0);
        let fmt_acc = |r: Option<&ProbeRow>| -> (String, String) {
            match r {
                Some(row) => (
                    format!("{:.2}", row.accuracy),
                    row.delta.map_or(String::new(), |d| format!("{d:.2}")),
                ),
                None => (String::new(), String::new()),
            }
        };
        let mut out = String::new();
        out.push_str("| Layer | Encoder Acc | Δ | Decoder Acc | Δ | −Self attention Acc | Δ | −Cross attention Acc | Δ |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for layer in 0..=max_layer {
            let (ea, ed) = fmt_acc(get(ProbeSide::Encoder, layer, Ablation::None));
            let (da, dd) = fmt_acc(get(ProbeSide::Decoder, layer, Ablation::None));
            let (sa, sd) = fmt_acc(get(ProbeSide::Decoder, layer, Ablation::SkipSelfAttention));
            let (ca, cd) = fmt_acc(get(ProbeSide::Decoder, layer, Ablation::SkipCrossAttention));
            out.push_str(&format!(
                "| {layer} | {ea} | {ed} | {da} | {dd} | {sa} | {sd} | {ca} | {cd} |\n"
            ));
        }
        out
    }
}
