//! Corpus ingestion, batching and the synthetic alignment task.
//!
//! Every batch is time-major: inputs are `[T×m×F]` (or `[T×m]` token ids),
//! targets and masks are `[T×m]`, flattened with index `t * m + i`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum BatchInputs {
    /// Dense frames, `[T×m×F]`.
    Features(Tensor),
    /// Token ids, `[T×m]`.
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub inputs: BatchInputs,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn steps(&self) -> usize {
        self.targets.len() / self.lengths.len()
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Mask entries of time step `t`.
    pub fn mask_at(&self, t: usize) -> &[f64] {
        let m = self.batch_size();
        &self.mask[t * m..(t + 1) * m]
    }

    pub fn frame_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&v| v == 1.0)
    }

    /// Checks mask/length consistency and zeroed padding.
    pub fn validate(&self) -> Result<()> {
        let m = self.batch_size();
        if m == 0 {
            return Err(Error::Ingestion("batch has no sequences".into()));
        }
        let t_max = self.lengths.iter().copied().max().unwrap_or(0);
        if self.targets.len() != t_max * m || self.mask.len() != t_max * m {
            return Err(Error::Ingestion(format!(
                "targets/mask length {} / {} does not match T={t_max}, m={m}",
                self.targets.len(),
                self.mask.len()
            )));
        }
        for t in 0..t_max {
            for (i, &len) in self.lengths.iter().enumerate() {
                let expect = if t < len { 1.0 } else { 0.0 };
                if self.mask[t * m + i] != expect {
                    return Err(Error::Ingestion(format!("mask[{t}][{i}] inconsistent with length {len}")));
                }
            }
        }
        match &self.inputs {
            BatchInputs::Features(x) => {
                if x.rank() != 3 || x.shape()[0] != t_max || x.shape()[1] != m {
                    return Err(Error::Ingestion(format!("feature tensor shape {:?} is not [T×m×F]", x.shape())));
                }
                let f = x.shape()[2];
                for (r, row) in x.data().chunks_exact(f).enumerate() {
                    if self.mask[r] == 0.0 && row.iter().any(|&v| v != 0.0) {
                        return Err(Error::Ingestion(format!("padded frame {r} is not zero")));
                    }
                }
            }
            BatchInputs::Tokens(tok) => {
                if tok.len() != t_max * m {
                    return Err(Error::Ingestion("token array length does not match T×m".into()));
                }
            }
        }
        Ok(())
    }
}

/// Character vocabulary with dense ids assigned in code-point order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn from_text(text: &str) -> Self {
        let mut symbols: Vec<char> = text.chars().collect();
        symbols.sort_unstable();
        symbols.dedup();
        Self::from_symbols(symbols)
    }

    pub fn from_symbols(symbols: Vec<char>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Vocabulary { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Ingestion(format!("symbol {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbols[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharCorpus {
    pub vocab: Vocabulary,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

impl CharCorpus {
    pub fn from_text(text: &str, train_fraction: f64) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Ingestion("corpus is empty".into()));
        }
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(Error::Ingestion(format!("train fraction {train_fraction} outside (0,1]")));
        }
        let vocab = Vocabulary::from_text(text);
        let mut ids = vocab.encode(text)?;
        let cut = (ids.len() as f64 * train_fraction).round() as usize;
        let valid = ids.split_off(cut);
        Ok(CharCorpus { vocab, train: ids, valid })
    }
}

/// Reads a UTF-8 text file as a character-level corpus and splits it into
/// contiguous train/validation streams.
pub fn load_char_corpus(path: impl AsRef<Path>, train_fraction: f64) -> Result<CharCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    CharCorpus::from_text(&text, train_fraction)
}

/// Deterministic pseudo-English text of exactly `len` characters, for
/// character-level language modelling when no corpus file is given.
///
/// Words are built from syllables over 20 letters and drawn with Zipf
/// frequencies; sentences start with a capital and end in `.`, `?` or `!`.
/// The alphabet stays under 50 symbols.
pub fn synth_char_text(seed: u64, len: usize) -> String {
    const ONSETS: &[&str] = &["", "b", "c", "d", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "w", "y", "st", "tr", "sh", "th", "pl", "br"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "y"];
    const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "ck", "m"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, set: &[&'static str]| set[rng.gen_range(0..set.len())];
    let lexicon: Vec<String> = (0..800)
        .map(|_| {
            let syllables = 1 + rng.gen_range(0..3usize).min(rng.gen_range(0..3));
            (0..syllables).map(|_| [pick(&mut rng, ONSETS), pick(&mut rng, VOWELS), pick(&mut rng, CODAS)].concat()).collect()
        })
        .collect();
    let weights: Vec<f64> = (0..lexicon.len()).map(|r| 1.0 / (r + 1) as f64).collect();
    let zipf = rand::distributions::WeightedIndex::new(&weights).expect("positive weights");
    let mut out = String::with_capacity(len + 64);
    while out.len() < len {
        let words = rng.gen_range(3..15);
        for w in 0..words {
            let word = &lexicon[rng.sample(&zipf)];
            if w == 0 {
                let mut cs = word.chars();
                if let Some(first) = cs.next() {
                    out.extend(first.to_uppercase());
                    out.push_str(cs.as_str());
                }
            } else {
                out.push(' ');
                out.push_str(word);
            }
            if w + 1 < words && rng.gen_bool(0.08) {
                out.push(',');
            }
        }
        let end = rng.gen_range(0..20);
        out.push(if end == 0 { '!' } else if end < 3 { '?' } else { '.' });
        out.push(if rng.gen_bool(0.15) { '\n' } else { ' ' });
    }
    out.truncate(len);
    out
}

/// Cuts a token stream into `m` parallel tracks and walks them in windows of
/// `window` steps. Consecutive batches continue the same tracks, so hidden
/// state can be carried from one window to the next. The target of the last
/// frame of a window is the first input of the following window.
pub fn make_lm_batches(stream: &[usize], m: usize, window: usize) -> Result<Vec<SequenceBatch>> {
    if m == 0 || window == 0 {
        return Err(Error::Ingestion("batch size and window must be positive".into()));
    }
    if stream.len() < m * (window + 1) {
        return Err(Error::Ingestion(format!(
            "stream of {} tokens is too short for {m} tracks of {} tokens",
            stream.len(),
            window + 1
        )));
    }
    let track_len = stream.len() / m;
    let windows = (track_len - 1) / window;
    let mut out = Vec::with_capacity(windows);
    for w in 0..windows {
        let mut inputs = Vec::with_capacity(window * m);
        let mut targets = Vec::with_capacity(window * m);
        for t in 0..window {
            for i in 0..m {
                let pos = i * track_len + w * window + t;
                inputs.push(stream[pos]);
                targets.push(stream[pos + 1]);
            }
        }
        out.push(SequenceBatch {
            inputs: BatchInputs::Tokens(inputs),
            targets,
            mask: vec![1.0; window * m],
            lengths: vec![window; m],
        });
    }
    Ok(out)
}

/// One labelled sequence: `[T×F]` frames with a label per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSequence {
    pub frames: Tensor,
    pub labels: Vec<usize>,
}

impl AlignedSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatches {
    pub batches: Vec<SequenceBatch>,
    /// Sequences removed for exceeding the length cap.
    pub dropped: usize,
}

/// Packs `order`-ed sequences into batches of up to `m`, each padded with
/// zero frames to its own longest member. Sequences longer than `cap` are
/// dropped.
pub fn make_padded_batches(sequences: &[AlignedSequence], m: usize, cap: Option<usize>) -> Result<PaddedBatches> {
    let order: Vec<usize> = (0..sequences.len()).collect();
    make_padded_batches_in_order(sequences, &order, m, cap)
}

pub fn make_padded_batches_in_order(
    sequences: &[AlignedSequence],
    order: &[usize],
    m: usize,
    cap: Option<usize>,
) -> Result<PaddedBatches> {
    if m == 0 {
        return Err(Error::Ingestion("batch size must be positive".into()));
    }
    let mut kept = Vec::with_capacity(order.len());
    let mut dropped = 0;
    for &i in order {
        let s = &sequences[i];
        if s.is_empty() {
            return Err(Error::Ingestion(format!("sequence {i} is empty")));
        }
        if cap.is_some_and(|c| s.len() > c) {
            dropped += 1;
        } else {
            kept.push(s);
        }
    }
    if kept.is_empty() {
        return Err(Error::Ingestion("every sequence exceeds the length cap".into()));
    }
    let batches = kept.chunks(m).map(pad_batch).collect::<Result<Vec<_>>>()?;
    Ok(PaddedBatches { batches, dropped })
}

fn pad_batch(group: &[&AlignedSequence]) -> Result<SequenceBatch> {
    let m = group.len();
    let f = group[0].frames.last_dim();
    let t_max = group.iter().map(|s| s.len()).max().unwrap();
    let mut x = vec![0.0; t_max * m * f];
    let mut targets = vec![0; t_max * m];
    let mut mask = vec![0.0; t_max * m];
    for (i, s) in group.iter().enumerate() {
        if s.frames.last_dim() != f || s.frames.shape()[0] != s.len() {
            return Err(Error::Ingestion(format!(
                "sequence frames {:?} inconsistent with {} labels of width {f}",
                s.frames.shape(),
                s.len()
            )));
        }
        for t in 0..s.len() {
            let r = t * m + i;
            x[r * f..(r + 1) * f].copy_from_slice(&s.frames.data()[t * f..(t + 1) * f]);
            targets[r] = s.labels[t];
            mask[r] = 1.0;
        }
    }
    Ok(SequenceBatch {
        inputs: BatchInputs::Features(Tensor::new(vec![t_max, m, f], x)?),
        targets,
        mask,
        lengths: group.iter().map(|s| s.len()).collect(),
    })
}

/// Parameters of the synthetic frame-labelling task.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTaskConfig {
    pub sequences: usize,
    pub features: usize,
    pub classes: usize,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentDataset {
    pub features: usize,
    pub classes: usize,
    pub sequences: Vec<AlignedSequence>,
}

const DATASET_MAGIC: &[u8; 4] = b"RNAL";
const DATASET_VERSION: u32 = 1;

/// Generates a frame-labelling task.
///
/// A latent regime `z_t ∈ [0, classes)` persists over time and switches at
/// random; the label of each frame is `z_t`. Each regime has a prototype
/// vector. The observed frame is the prototype plus noise plus a slowly
/// drifting per-sequence offset, then passed through a fixed per-feature
/// affine map with large offsets and unequal scales. Single frames are
/// ambiguous; context on both sides disambiguates them.
pub fn synth_alignment_task(seed: u64, cfg: &AlignmentTaskConfig) -> Result<AlignmentDataset> {
    if cfg.features == 0 || cfg.classes < 2 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Configuration(format!("invalid alignment task configuration {cfg:?}")));
    }
    let f = cfg.features;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let prototypes: Vec<Vec<f64>> =
        (0..cfg.classes).map(|_| (0..f).map(|_| normal(&mut rng)).collect()).collect();
    let scales: Vec<f64> = (0..f).map(|_| 10f64.powf(rng.gen_range(0.0..1.5))).collect();
    let offsets: Vec<f64> = (0..f).map(|_| rng.gen_range(-10.0..10.0)).collect();

    const SWITCH_PROB: f64 = 0.15;
    const NOISE: f64 = 0.9;
    const DRIFT: f64 = 0.15;

    let mut sequences = Vec::with_capacity(cfg.sequences);
    for _ in 0..cfg.sequences {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut z = rng.gen_range(0..cfg.classes);
        let mut drift: Vec<f64> = (0..f).map(|_| normal(&mut rng)).collect();
        let mut frames = Vec::with_capacity(len * f);
        let mut labels = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.gen_bool(SWITCH_PROB) {
                z = (z + rng.gen_range(1..cfg.classes)) % cfg.classes;
            }
            for k in 0..f {
                drift[k] += DRIFT * normal(&mut rng);
                let latent = prototypes[z][k] + drift[k] + NOISE * normal(&mut rng);
                frames.push(scales[k] * latent + offsets[k]);
            }
            labels.push(z);
        }
        sequences.push(AlignedSequence { frames: Tensor::new(vec![len, f], frames)?, labels });
    }
    Ok(AlignmentDataset { features: f, classes: cfg.classes, sequences })
}

impl AlignmentDataset {
    /// Splits off the last `valid` sequences as a validation set.
    pub fn split(mut self, valid: usize) -> (AlignmentDataset, AlignmentDataset) {
        let cut = self.sequences.len().saturating_sub(valid);
        let tail = self.sequences.split_off(cut);
        let v = AlignmentDataset { features: self.features, classes: self.classes, sequences: tail };
        (self, v)
    }

    /// Frequency of the most common label, the accuracy of always predicting
    /// it.
    pub fn majority_fraction(&self) -> f64 {
        let mut counts = vec![0usize; self.classes];
        let mut total = 0;
        for s in &self.sequences {
            for &l in &s.labels {
                counts[l] += 1;
                total += 1;
            }
        }
        *counts.iter().max().unwrap() as f64 / total as f64
    }

    /// Header (magic, version, count, F, classes) followed by each sequence's
    /// length, frames and labels, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sequences.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.features as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        for s in &self.sequences {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            for v in s.frames.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &l in &s.labels {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Ingestion("not a dataset file".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Ingestion(format!("unsupported dataset version {version}")));
        }
        let count = r.u64()? as usize;
        let features = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let mut sequences = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let frames = (0..len * features).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let labels = (0..len).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if labels.iter().any(|&l| l >= classes) {
                return Err(Error::Ingestion("label out of range".into()));
            }
            sequences.push(AlignedSequence { frames: Tensor::new(vec![len, features], frames)?, labels });
        }
        Ok(AlignmentDataset { features, classes, sequences })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Ingestion(format!("dataset truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Seeded permutation of `0..n`.
pub fn shuffled_order(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
