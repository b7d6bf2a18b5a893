//! Anchor sentence selection: score every candidate sentence of a class by
//! its linguistic contrastive loss against pooled class probe images and keep
//! the `M` lowest.

pub mod io;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasynth::{ClassCorpus, LongTailDataset};
use crate::encoders::Encoders;
use crate::error::{Error, Result};
use crate::hashing::Hash32;
use crate::numcore::ops::{log_softmax_in_place, normalize_rows_raw};
use crate::numcore::Tensor;

pub use io::{decode_anchors, encode_anchors, read_anchors, write_anchors};

pub const PROBE_CAP: usize = 50;
pub const DEFAULT_M: usize = 64;

/// Up to `cap` images of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    pub class: usize,
    /// Training-row indices into the dataset.
    pub rows: Vec<usize>,
    pub images: Tensor,
}

/// First `min(count, cap)` images of the class after a seeded shuffle.
pub fn build_probe(dataset: &LongTailDataset, class: usize, cap: usize, seed: u64) -> Result<ProbeBatch> {
    if class >= dataset.classes {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: dataset.classes,
        });
    }
    let mut rows: Vec<usize> = dataset.class_indices(class).collect();
    if rows.is_empty() || cap == 0 {
        return Err(Error::EmptyClass {
            class,
            what: "training images",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ class as u64);
    rows.shuffle(&mut rng);
    rows.truncate(cap);
    let images = dataset.train.select_rows(&rows)?;
    Ok(ProbeBatch { class, rows, images })
}

/// All classes' probe images, embedded once and L2-normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePool {
    /// Row-major `[n, D]` unit rows.
    units: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl ProbePool {
    pub fn new(probes: &[ProbeBatch], encoders: &Encoders) -> Result<Self> {
        let dim = encoders.dim();
        let mut units = Vec::new();
        let mut labels = Vec::new();
        for p in probes {
            let e = encoders.visual.encode_images(&p.images)?;
            units.extend(normalize_rows_raw(e.data(), dim, labels.len())?);
            labels.extend(std::iter::repeat_n(p.class, p.rows.len()));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty probe pool".into()));
        }
        Ok(ProbePool { units, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Loss of one sentence embedding against the pool: mean over the
    /// class's probe images of `-log softmax_j(cos(I_j, t) / tau)`, the softmax
    /// running over every pooled image.
    pub fn score_embedding(&self, text: &[f64], class: usize, tau: f64) -> Result<f64> {
        let n = text.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNorm { row: 0 });
        }
        let mut logits: Vec<f64> = self
            .units
            .chunks_exact(self.dim)
            .map(|u| u.iter().zip(text).map(|(a, b)| a * b).sum::<f64>() / n / tau)
            .collect();
        log_softmax_in_place(&mut logits);
        let (mut total, mut k) = (0.0, 0usize);
        for (lp, &l) in logits.iter().zip(&self.labels) {
            if l == class {
                total -= lp;
                k += 1;
            }
        }
        if k == 0 {
            return Err(Error::EmptyClass {
                class,
                what: "probe images",
            });
        }
        Ok(total / k as f64)
    }
}

/// Scores a single sentence of `class` against the pooled probes.
pub fn score_sentence(
    tokens: &[u32],
    class: usize,
    pool: &ProbePool,
    encoders: &Encoders,
    tau: f64,
) -> Result<f64> {
    let e = encoders.linguistic.encode_texts(&[tokens.to_vec()])?;
    pool.score_embedding(e.data(), class, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Anss,
    Cutoff,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Anss => "anss",
            SelectionMode::Cutoff => "cutoff",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "anss" => Ok(SelectionMode::Anss),
            "cutoff" | "cut-off" | "cut_off" => Ok(SelectionMode::Cutoff),
            other => Err(Error::Config(format!("unknown selection mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorEntry {
    pub sentence_id: usize,
    pub score: f64,
}

/// Exactly `m` entries per class, padded cyclically when a class has fewer
/// sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub mode: SelectionMode,
    pub m: usize,
    pub checkpoint: Hash32,
    pub classes: Vec<Vec<AnchorEntry>>,
}

impl AnchorSet {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Distinct sentence ids selected for a class.
    pub fn distinct(&self, class: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = self.classes[class].iter().map(|e| e.sentence_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Token sequences in class-major order, `C * M` of them.
    pub fn tokens(&self, corpus: &ClassCorpus) -> Result<Vec<Vec<u32>>> {
        if corpus.num_classes() != self.num_classes() {
            return Err(Error::shape("anchor tokens", &[self.num_classes()], &[corpus.num_classes()]));
        }
        let mut out = Vec::with_capacity(self.num_classes() * self.m);
        for (c, entries) in self.classes.iter().enumerate() {
            let by_id: HashMap<usize, &[u32]> = corpus
                .sentences(c)
                .iter()
                .map(|s| (s.id, s.tokens.as_slice()))
                .collect();
            for e in entries {
                let t = by_id.get(&e.sentence_id).ok_or_else(|| {
                    Error::format(
                        "anchor set",
                        format!("sentence {} is not in class {c}", e.sentence_id),
                    )
                })?;
                out.push(t.to_vec());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorParams {
    pub m: usize,
    pub mode: SelectionMode,
    pub probe_cap: usize,
    pub seed: u64,
}

impl Default for AnchorParams {
    fn default() -> Self {
        AnchorParams {
            m: DEFAULT_M,
            mode: SelectionMode::Anss,
            probe_cap: PROBE_CAP,
            seed: 0,
        }
    }
}

/// Scores every sentence of every class, in corpus order.
pub fn score_corpus(
    corpus: &ClassCorpus,
    dataset: &LongTailDataset,
    encoders: &Encoders,
    probe_cap: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if corpus.num_classes() != dataset.classes {
        return Err(Error::shape("select_anchors", &[dataset.classes], &[corpus.num_classes()]));
    }
    let probes = (0..dataset.classes)
        .map(|c| build_probe(dataset, c, probe_cap, seed))
        .collect::<Result<Vec<_>>>()?;
    let pool = ProbePool::new(&probes, encoders)?;
    let tau = encoders.tau.get();
    (0..corpus.num_classes())
        .into_par_iter()
        .map(|c| {
            let toks: Vec<Vec<u32>> = corpus.sentences(c).iter().map(|s| s.tokens.clone()).collect();
            let emb = encoders.linguistic.encode_texts(&toks)?;
            emb.rows().map(|row| pool.score_embedding(row, c, tau)).collect()
        })
        .collect()
}

fn pad_cyclic(mut picked: Vec<AnchorEntry>, m: usize) -> Vec<AnchorEntry> {
    let k = picked.len();
    for i in k..m {
        picked.push(picked[i % k]);
    }
    picked
}

/// Picks anchors from precomputed per-class scores (corpus order).
pub fn select_from_scores(
    corpus: &ClassCorpus,
    scores: &[Vec<f64>],
    m: usize,
    mode: SelectionMode,
    checkpoint: Hash32,
) -> Result<AnchorSet> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be at least 1".into()));
    }
    let mut classes = Vec::with_capacity(corpus.num_classes());
    for (c, ss) in corpus.classes.iter().enumerate() {
        if ss.is_empty() {
            return Err(Error::EmptyClass { class: c, what: "sentences" });
        }
        let mut entries: Vec<AnchorEntry> = ss
            .iter()
            .zip(&scores[c])
            .map(|(s, &score)| AnchorEntry { sentence_id: s.id, score })
            .collect();
        if mode == SelectionMode::Anss {
            entries.sort_by(|a, b| {
                a.score
                    .total_cmp(&b.score)
                    .then(a.sentence_id.cmp(&b.sentence_id))
            });
        }
        entries.truncate(m);
        classes.push(pad_cyclic(entries, m));
    }
    Ok(AnchorSet {
        mode,
        m,
        checkpoint,
        classes,
    })
}

/// Scores and selects anchors. `checkpoint` is the hash recorded as the
/// provenance of the scoring encoders.
pub fn select_anchors(
    corpus: &ClassCorpus,
    dataset: &LongTailDataset,
    encoders: &Encoders,
    params: &AnchorParams,
    checkpoint: Hash32,
) -> Result<AnchorSet> {
    if params.m == 0 {
        return Err(Error::InvalidArgument("M must be at least 1".into()));
    }
    let scores = score_corpus(corpus, dataset, encoders, params.probe_cap, params.seed)?;
    select_from_scores(corpus, &scores, params.m, params.mode, checkpoint)
}

#[cfg(test)]
mod tests;
