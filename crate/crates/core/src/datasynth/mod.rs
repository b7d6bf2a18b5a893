//! Synthetic long-tailed data: Pareto class counts, feature-vector "images",
//! class-level text corpora, shot bands and the square-root sampler.

pub mod corpus;
pub mod io;
pub mod world;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub use corpus::{
    corpus_stats, gen_corpus, ClassCorpus, CorpusParams, CorpusStats, CorpusTruth, Sentence,
    Source, MAX_TOKENS,
};
pub use io::{read_corpus, read_dataset, write_corpus, write_dataset};
pub use world::{SyntheticWorld, Vocabulary, WorldParams, EOS, SOS};

/// Power-law class counts over class rank.
///
/// `counts[c] = round(n_max * (c+1)^-p)` with `p = ln(n_max/n_min) / ln(C)`,
/// so the first class has `n_max` samples and the last exactly `n_min`.
/// `alpha` names the target distribution but the exponent is fixed by the
/// endpoints.
pub fn gen_pareto_counts(classes: usize, n_max: usize, n_min: usize, alpha: f64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two classes, got {classes}"
        )));
    }
    if n_min < 1 || n_max <= n_min {
        return Err(Error::InvalidArgument(format!(
            "infeasible count bounds: n_max={n_max}, n_min={n_min}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let p = (n_max as f64 / n_min as f64).ln() / (classes as f64).ln();
    let mut counts: Vec<usize> = (0..classes)
        .map(|c| {
            let v = (n_max as f64 * ((c + 1) as f64).powf(-p)).round() as usize;
            v.max(n_min)
        })
        .collect();
    counts[0] = n_max;
    counts[classes - 1] = n_min;
    Ok(counts)
}

/// Long-tailed training split plus a balanced test split.
///
/// Samples are stored class-contiguously: all of class 0, then class 1, and
/// so on. Feature values are rounded to `f32` precision so the on-disk form is
/// exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    pub classes: usize,
    pub d_img: usize,
    pub counts: Vec<usize>,
    pub train: Tensor,
    pub train_labels: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub test: Tensor,
    pub test_labels: Vec<usize>,
    /// Power parameter the counts were generated for; not persisted.
    pub alpha: Option<f64>,
}

impl LongTailDataset {
    pub fn n_max(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn n_min(&self) -> usize {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_labels.is_empty()
    }

    /// Offset of the first training sample of each class.
    pub fn class_offsets(&self) -> Vec<usize> {
        offsets(&self.counts)
    }

    /// Indices of the training samples of one class.
    pub fn class_indices(&self, class: usize) -> std::ops::Range<usize> {
        let off = self.class_offsets();
        off[class]..off[class] + self.counts[class]
    }

    pub fn train_row(&self, i: usize) -> &[f64] {
        self.train.row(i)
    }
}

fn offsets(counts: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    counts
        .iter()
        .map(|&c| {
            let o = acc;
            acc += c;
            o
        })
        .collect()
}

fn draw_rows(
    world: &SyntheticWorld,
    counts: &[usize],
    noise: Option<&Normal<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let d = world.d_img();
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for &p in &world.prototypes[c] {
                let e = noise.map_or(0.0, |dist| dist.sample(rng));
                data.push((p + e) as f32 as f64);
            }
            labels.push(c);
        }
    }
    Ok((Tensor::new(&[total, d], data)?, labels))
}

/// Draws `counts[c]` noisy copies of each class prototype, plus
/// `test_per_class` held-out samples per class.
pub fn gen_synthetic(
    world: &SyntheticWorld,
    counts: &[usize],
    noise_sigma: f64,
    test_per_class: usize,
    seed: u64,
) -> Result<LongTailDataset> {
    let c = world.classes();
    if world.d_img() < 2 {
        return Err(Error::InvalidArgument("d_img must be at least 2".into()));
    }
    if counts.len() != c {
        return Err(Error::shape("gen_synthetic", &[c], &[counts.len()]));
    }
    if counts.contains(&0) || test_per_class == 0 {
        return Err(Error::InvalidArgument("every class needs samples".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_sigma {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = (noise_sigma > 0.0)
        .then(|| Normal::new(0.0, noise_sigma).expect("finite positive sigma"));
    let (train, train_labels) = draw_rows(world, counts, normal.as_ref(), &mut rng)?;
    let test_counts = vec![test_per_class; c];
    let (test, test_labels) = draw_rows(world, &test_counts, normal.as_ref(), &mut rng)?;
    Ok(LongTailDataset {
        classes: c,
        d_img: world.d_img(),
        counts: counts.to_vec(),
        train,
        train_labels,
        test_counts,
        test,
        test_labels,
        alpha: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Many,
    Medium,
    Few,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Many, Band::Medium, Band::Few];
}

/// Per-class shot band.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotBands {
    pub many_threshold: usize,
    pub few_threshold: usize,
    pub bands: Vec<Band>,
}

impl ShotBands {
    pub fn band(&self, class: usize) -> Option<Band> {
        self.bands.get(class).copied()
    }
}

pub const MANY_SHOT_THRESHOLD: usize = 100;
pub const FEW_SHOT_THRESHOLD: usize = 20;

/// Many: at least 100 training samples. Few: at most 20. Medium otherwise.
pub fn split_shots(counts: &[usize]) -> ShotBands {
    let bands = counts
        .iter()
        .map(|&n| {
            if n >= MANY_SHOT_THRESHOLD {
                Band::Many
            } else if n <= FEW_SHOT_THRESHOLD {
                Band::Few
            } else {
                Band::Medium
            }
        })
        .collect();
    ShotBands {
        many_threshold: MANY_SHOT_THRESHOLD,
        few_threshold: FEW_SHOT_THRESHOLD,
        bands,
    }
}

/// Class probabilities proportional to the square root of the class counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerWeights(pub Vec<f64>);

impl SamplerWeights {
    pub fn sqrt(counts: &[usize]) -> Self {
        let roots: Vec<f64> = counts.iter().map(|&n| (n as f64).sqrt()).collect();
        let total: f64 = roots.iter().sum();
        SamplerWeights(roots.into_iter().map(|r| r / total).collect())
    }
}

/// Endless stream of training-sample indices: a class drawn with probability
/// proportional to `sqrt(count)`, then a uniform sample within that class.
pub struct SqrtSampler {
    counts: Vec<usize>,
    offsets: Vec<usize>,
    classes: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl SqrtSampler {
    pub fn new(counts: &[usize], seed: u64) -> Result<Self> {
        if counts.is_empty() || counts.iter().all(|&n| n == 0) {
            return Err(Error::InvalidArgument("sampler needs a non-empty class".into()));
        }
        let roots: Vec<f64> = counts.iter().map(|&n| (n as f64).sqrt()).collect();
        let classes = WeightedIndex::new(&roots)
            .map_err(|e| Error::InvalidArgument(format!("sampler weights: {e}")))?;
        Ok(SqrtSampler {
            counts: counts.to_vec(),
            offsets: offsets(counts),
            classes,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn weights(&self) -> SamplerWeights {
        SamplerWeights::sqrt(&self.counts)
    }

    /// Draws a class id only.
    pub fn next_class(&mut self) -> usize {
        self.classes.sample(&mut self.rng)
    }

    /// Draws a `(class, sample index)` pair.
    pub fn next_sample(&mut self) -> (usize, usize) {
        let c = self.next_class();
        let i = self.offsets[c] + self.rng.random_range(0..self.counts[c]);
        (c, i)
    }

    pub fn batch(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_sample().1).collect()
    }
}

impl Iterator for SqrtSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.next_sample().1)
    }
}
