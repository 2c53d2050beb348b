//! Synthetic bilingual corpora, vocabulary, batching and corpus file I/O.
//!
//! Corpus files are UTF-8 text with one pair per line,
//! `source tokens<TAB>target tokens`, tokens space-separated. Vocabulary
//! files carry one token per line (line number = id) and must start with
//! the four reserved tokens.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token table with dense ids and the four reserved entries at 0..=3.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len() {
            return Err(Error::Config("vocabulary smaller than the reserved set".into()));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Config(format!(
                    "vocabulary line {i} must be {want}, found {}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Joint word-level vocabulary for a synthetic task: reserved tokens
    /// followed by `content` word tokens `w000..`.
    pub fn synthetic(content: usize) -> Vocab {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for i in 0..content {
            tokens.push(format!("w{i:03}"));
        }
        Vocab::new(tokens).expect("reserved tokens are well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a token; unknown tokens map to `UNK`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Content-token id (offset past the reserved entries).
    pub fn content_id(&self, content_index: usize) -> u32 {
        (content_index + RESERVED.len()) as u32
    }

    pub fn content_size(&self) -> usize {
        self.tokens.len() - RESERVED.len()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocab::new(tokens)
    }
}

/// One bilingual example; `bos`/`eos` are added at batch time.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Token-wise bijection plus conditional adjacent swaps on the target
    /// side, so cross-attention has non-trivial alignments to model.
    LexicalSwapReorder,
    /// Target id = source id + 1 modulo the content vocabulary.
    CopyModShift,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LexicalSwapReorder => "lexical_swap_reorder",
            TaskKind::CopyModShift => "copy_mod_shift",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "lexical_swap_reorder" | "lexical-swap-reorder" => Ok(TaskKind::LexicalSwapReorder),
            "copy_mod_shift" | "copy-mod-shift" => Ok(TaskKind::CopyModShift),
            other => Err(Error::TaskSpec(format!("unknown task kind {other}"))),
        }
    }
}

/// Deterministic description of a synthetic task; generation is a pure
/// function of the spec.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub content_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.content_vocab < 2 {
            return Err(Error::TaskSpec(format!(
                "content vocabulary of {} is too small for a bijection",
                self.content_vocab
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::TaskSpec(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// The fixed content-token bijection of this task.
    pub fn substitution(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::CopyModShift => (0..self.content_vocab).map(|c| (c + 1) % self.content_vocab).collect(),
            TaskKind::LexicalSwapReorder => {
                let mut sigma: Vec<usize> = (0..self.content_vocab).collect();
                // separate stream so sentence sampling does not shift sigma
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5157_4150_5349_474d);
                sigma.shuffle(&mut rng);
                sigma
            }
        }
    }
}

/// Train/dev/test splits over one shared vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

/// A generated pair together with the source->target position map the
/// generator used, kept as the alignment ground truth for verification.
#[derive(Debug, Clone)]
pub struct GeneratedPair {
    pub pair: SentencePair,
    pub src_to_tgt: Vec<usize>,
}

/// Apply the task rule to one sampled source-content sentence.
pub fn apply_task_rule(spec: &TaskSpec, sigma: &[usize], source_content: &[usize]) -> GeneratedPair {
    let n = source_content.len();
    let translated: Vec<usize> = source_content.iter().map(|&c| sigma[c]).collect();
    let mut src_to_tgt: Vec<usize> = (0..n).collect();
    let mut target = translated;
    if spec.kind == TaskKind::LexicalSwapReorder {
        let mut i = 0;
        while i + 1 < n {
            if source_content[i] % 2 == 0 {
                target.swap(i, i + 1);
                src_to_tgt.swap(i, i + 1);
            }
            i += 2;
        }
    }
    let vocab_offset = RESERVED.len() as u32;
    GeneratedPair {
        pair: SentencePair {
            source: source_content.iter().map(|&c| c as u32 + vocab_offset).collect(),
            target: target.iter().map(|&c| c as u32 + vocab_offset).collect(),
        },
        src_to_tgt,
    }
}

/// Sample `n_pairs` distinct examples (distinct by source sentence).
pub fn generate_pairs(spec: &TaskSpec, n_pairs: usize) -> Result<Vec<GeneratedPair>> {
    spec.validate()?;
    let sigma = spec.substitution();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::with_capacity(n_pairs);
    let mut attempts = 0usize;
    let attempt_budget = n_pairs.saturating_mul(1000).max(100_000);
    while out.len() < n_pairs {
        attempts += 1;
        if attempts > attempt_budget {
            return Err(Error::TaskSpec(format!(
                "could not sample {n_pairs} distinct sentences from the task space"
            )));
        }
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let sentence: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.content_vocab)).collect();
        if !seen.insert(sentence.clone()) {
            continue;
        }
        out.push(apply_task_rule(spec, &sigma, &sentence));
    }
    Ok(out)
}

/// Generate disjoint train/dev/test splits. The dev and test splits each
/// take 1/22 of the pairs (so the 22,000-pair default yields the
/// 20,000/1,000/1,000 layout), with at least one pair per split.
pub fn generate_corpus(spec: &TaskSpec, n_pairs: usize) -> Result<Corpus> {
    if n_pairs < 3 {
        return Err(Error::TaskSpec(format!("{n_pairs} pairs cannot fill three splits")));
    }
    let pairs = generate_pairs(spec, n_pairs)?;
    let held = (n_pairs / 22).max(1);
    let n_train = n_pairs - 2 * held;
    let mut pairs: Vec<SentencePair> = pairs.into_iter().map(|g| g.pair).collect();
    let dev = pairs.split_off(n_train + held);
    let devtest = pairs.split_off(n_train);
    Ok(Corpus {
        vocab: Vocab::synthetic(spec.content_vocab),
        train: pairs,
        dev: devtest,
        test: dev,
    })
}

// ── Batching ─────────────────────────────────────────────────────────

/// Row-major id matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u32>,
}

impl IdMatrix {
    pub fn row(&self, r: usize) -> &[u32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Padded batch with shifted decoder input and labels.
///
/// Invariant: for every non-pad position `t < T-1`,
/// `labels[b][t] == decoder_input[b][t + 1]` (next-word prediction), and
/// pad positions in `labels` carry the ignore index (`PAD`).
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: IdMatrix,
    pub decoder_input: IdMatrix,
    pub labels: IdMatrix,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>, // decoder-side lengths (target length + 1 for eos)
    pub source_pad_mask: Vec<bool>,
    pub target_pad_mask: Vec<bool>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.src_lens.len()
    }

    pub fn from_pairs(pairs: &[&SentencePair]) -> Batch {
        let b = pairs.len();
        let s = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let t = pairs.iter().map(|p| p.target.len() + 1).max().unwrap_or(0);
        let mut source = vec![PAD; b * s];
        let mut dec_in = vec![PAD; b * t];
        let mut labels = vec![PAD; b * t];
        let mut src_lens = Vec::with_capacity(b);
        let mut tgt_lens = Vec::with_capacity(b);
        for (i, p) in pairs.iter().enumerate() {
            src_lens.push(p.source.len());
            tgt_lens.push(p.target.len() + 1);
            source[i * s..i * s + p.source.len()].copy_from_slice(&p.source);
            dec_in[i * t] = BOS;
            dec_in[i * t + 1..i * t + 1 + p.target.len()].copy_from_slice(&p.target);
            labels[i * t..i * t + p.target.len()].copy_from_slice(&p.target);
            labels[i * t + p.target.len()] = EOS;
        }
        let source_pad_mask: Vec<bool> = (0..b * s).map(|i| source[i] == PAD).collect();
        let target_pad_mask: Vec<bool> = (0..b * t)
            .map(|i| i % t >= tgt_lens[i / t])
            .collect();
        Batch {
            source: IdMatrix { rows: b, cols: s, data: source },
            decoder_input: IdMatrix { rows: b, cols: t, data: dec_in },
            labels: IdMatrix { rows: b, cols: t, data: labels },
            src_lens,
            tgt_lens,
            source_pad_mask,
            target_pad_mask,
        }
    }
}

/// Pack a split into batches under a target-token budget.
///
/// Pairs are shuffled by `seed`, stably sorted by target length, then
/// packed greedily until the sum of raw target lengths would exceed the
/// budget. Every sentence must fit `max_len`.
pub fn make_batches(
    pairs: &[SentencePair],
    token_budget: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("cannot batch an empty split".into()));
    }
    for p in pairs {
        let longest = p.source.len().max(p.target.len() + 2); // bos/eos on the decoder side
        if longest > max_len {
            return Err(Error::Length { len: longest, max: max_len });
        }
        if p.source.is_empty() || p.target.is_empty() {
            return Err(Error::EmptyInput("zero-length sentence in split".into()));
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| pairs[i].target.len());

    let mut batches = Vec::new();
    let mut current: Vec<&SentencePair> = Vec::new();
    let mut tokens = 0usize;
    for &i in &order {
        let t = pairs[i].target.len();
        if !current.is_empty() && tokens + t > token_budget {
            batches.push(Batch::from_pairs(&current));
            current.clear();
            tokens = 0;
        }
        current.push(&pairs[i]);
        tokens += t;
    }
    if !current.is_empty() {
        batches.push(Batch::from_pairs(&current));
    }
    Ok(batches)
}

// ── Corpus files ─────────────────────────────────────────────────────

pub fn write_pairs(path: &Path, pairs: &[SentencePair], vocab: &Vocab) -> Result<()> {
    let mut text = String::new();
    for p in pairs {
        let src: Vec<&str> = p.source.iter().map(|&id| vocab.token(id)).collect();
        let tgt: Vec<&str> = p.target.iter().map(|&id| vocab.token(id)).collect();
        text.push_str(&src.join(" "));
        text.push('\t');
        text.push_str(&tgt.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path, vocab: &Vocab) -> Result<Vec<SentencePair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected `source<TAB>target`, found {} fields", fields.len()),
            });
        }
        let tokenize = |side: &str| -> Vec<u32> {
            side.split(' ').filter(|t| !t.is_empty()).map(|t| vocab.id(t)).collect()
        };
        let source = tokenize(fields[0]);
        let target = tokenize(fields[1]);
        if source.is_empty() || target.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "empty side".into(),
            });
        }
        out.push(SentencePair { source, target });
    }
    Ok(out)
}

/// Write `vocab.txt`, `train.tsv`, `dev.tsv`, `test.tsv` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    corpus.vocab.write(&dir.join("vocab.txt"))?;
    write_pairs(&dir.join("train.tsv"), &corpus.train, &corpus.vocab)?;
    write_pairs(&dir.join("dev.tsv"), &corpus.dev, &corpus.vocab)?;
    write_pairs(&dir.join("test.tsv"), &corpus.test, &corpus.vocab)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let vocab = Vocab::read(&dir.join("vocab.txt"))?;
    let train = read_pairs(&dir.join("train.tsv"), &vocab)?;
    let dev = read_pairs(&dir.join("dev.tsv"), &vocab)?;
    let test = read_pairs(&dir.join("test.tsv"), &vocab)?;
    Ok(Corpus { vocab, train, dev, test })
}
