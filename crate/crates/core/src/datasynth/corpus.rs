//! Class-level text corpora: descriptive sentences, distractors and prompts.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

use super::world::{SyntheticWorld, Vocabulary, EOS, SOS};

/// Token limit per sentence, start and end markers included.
pub const MAX_TOKENS: usize = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Encyclopedia,
    Prompt,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Encyclopedia => "encyclopedia",
            Source::Prompt => "prompt",
        })
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encyclopedia" => Ok(Source::Encyclopedia),
            "prompt" => Ok(Source::Prompt),
            other => Err(Error::format("corpus", format!("unknown source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    /// Global id; equals the record's line index in the corpus file.
    pub id: usize,
    pub tokens: Vec<u32>,
    pub source: Source,
}

/// Per-class sentence lists, in corpus order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCorpus {
    pub classes: Vec<Vec<Sentence>>,
    pub max_tokens: usize,
}

impl ClassCorpus {
    pub fn new(classes: Vec<Vec<Sentence>>, max_tokens: usize) -> Result<Self> {
        for (c, sentences) in classes.iter().enumerate() {
            if sentences.is_empty() {
                return Err(Error::EmptyClass {
                    class: c,
                    what: "sentences",
                });
            }
            for s in sentences {
                if s.tokens.is_empty() {
                    return Err(Error::format("corpus", format!("sentence {} is empty", s.id)));
                }
                if s.tokens.len() > max_tokens {
                    return Err(Error::Overlength {
                        index: s.id,
                        len: s.tokens.len(),
                        limit: max_tokens,
                    });
                }
            }
        }
        Ok(ClassCorpus {
            classes,
            max_tokens,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_sentences(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn sentences(&self, class: usize) -> &[Sentence] {
        &self.classes[class]
    }

    /// Looks a sentence up by global id.
    pub fn sentence(&self, id: usize) -> Option<&Sentence> {
        self.classes.iter().flatten().find(|s| s.id == id)
    }

    /// Copy keeping only sentences of the given source.
    pub fn filter_source(&self, source: Source) -> Result<Self> {
        let classes = self
            .classes
            .iter()
            .map(|ss| ss.iter().filter(|s| s.source == source).cloned().collect())
            .collect();
        ClassCorpus::new(classes, self.max_tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusParams {
    /// Average number of descriptive sentences per class; each class draws its
    /// own count uniformly from `[ceil(n/2), floor(3n/2)]`.
    pub sentences_per_class: usize,
    pub prompt_count: usize,
    /// Fraction of descriptive sentences replaced by distractors describing
    /// another class.
    pub noise_fraction: f64,
    pub max_tokens: usize,
    /// Filler words per descriptive sentence, inclusive range.
    pub filler_range: (usize, usize),
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            sentences_per_class: 40,
            prompt_count: 80,
            noise_fraction: 0.2,
            max_tokens: MAX_TOKENS,
            filler_range: (3, 10),
        }
    }
}

/// Generator-side ground truth that is not part of the corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusTruth {
    /// `(sentence id, class the distractor actually describes)`.
    pub distractors: Vec<(usize, usize)>,
}

impl CorpusTruth {
    pub fn is_distractor(&self, id: usize) -> bool {
        self.distractors.iter().any(|&(d, _)| d == id)
    }
}

/// Prompt templates as sequences of template-word indices; the class name is
/// appended to each.
const TEMPLATES: &[&[usize]] = &[
    &[0, 1, 2, 3],
    &[0, 1, 2, 3, 4],
    &[0, 5, 2, 3],
    &[0, 1, 2, 3, 6],
    &[7, 1, 2, 3],
    &[0, 8, 1, 2, 3],
    &[0, 1, 2, 9, 3],
    &[10, 2, 3],
    &[0, 11, 2, 3],
    &[0, 1, 2, 3, 11],
];

fn descriptive(
    class: usize,
    world: &SyntheticWorld,
    params: &CorpusParams,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let vocab: &Vocabulary = &world.vocab;
    let attrs = &world.class_attributes[class];
    let mut body = vec![vocab.class_name(class)];
    let n_attr = rng.random_range(1..=attrs.len());
    let mut chosen = attrs.clone();
    chosen.shuffle(rng);
    body.extend(chosen[..n_attr].iter().map(|&a| vocab.attribute(a)));
    let (lo, hi) = params.filler_range;
    let n_fill = rng.random_range(lo..=hi.max(lo));
    body.extend((0..n_fill).map(|_| vocab.filler(rng.random_range(0..vocab.fillers))));
    body.shuffle(rng);
    body.truncate(params.max_tokens - 2);
    let mut tokens = Vec::with_capacity(body.len() + 2);
    tokens.push(SOS);
    tokens.extend(body);
    tokens.push(EOS);
    tokens
}

fn prompt(class: usize, k: usize, vocab: &Vocabulary) -> Vec<u32> {
    let template = TEMPLATES[k % TEMPLATES.len()];
    let mut tokens = vec![SOS];
    tokens.extend(
        template
            .iter()
            .map(|&w| vocab.template_word(w % vocab.template_words)),
    );
    tokens.push(vocab.class_name(class));
    tokens.push(EOS);
    tokens
}

/// Builds a corpus for every class of `world`.
///
/// Each class gets its descriptive sentences first, in random order with
/// distractors mixed in, followed by `prompt_count` template sentences.
pub fn gen_corpus(
    world: &SyntheticWorld,
    params: &CorpusParams,
    seed: u64,
) -> Result<(ClassCorpus, CorpusTruth)> {
    let vocab = &world.vocab;
    if vocab.fillers == 0 || vocab.template_words == 0 || vocab.attributes == 0 {
        return Err(Error::InvalidArgument("empty vocabulary".into()));
    }
    if !(0.0..=1.0).contains(&params.noise_fraction) {
        return Err(Error::InvalidArgument(format!(
            "noise_fraction {} outside [0, 1]",
            params.noise_fraction
        )));
    }
    if params.max_tokens < 4 {
        return Err(Error::InvalidArgument(format!(
            "max_tokens {} leaves no room for content",
            params.max_tokens
        )));
    }
    let c_count = world.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truth = CorpusTruth::default();
    let mut next_id = 0usize;
    let mut classes = Vec::with_capacity(c_count);
    let spc = params.sentences_per_class;
    for c in 0..c_count {
        let n_desc = if spc == 0 {
            0
        } else {
            rng.random_range(spc.div_ceil(2)..=(3 * spc / 2).max(spc.div_ceil(2)))
        };
        let n_noise = if c_count > 1 {
            (params.noise_fraction * n_desc as f64).round() as usize
        } else {
            0
        };
        let mut kinds: Vec<Option<usize>> = vec![None; n_desc];
        for k in kinds.iter_mut().take(n_noise) {
            let mut other = rng.random_range(0..c_count - 1);
            if other >= c {
                other += 1;
            }
            *k = Some(other);
        }
        kinds.shuffle(&mut rng);
        let mut sentences = Vec::with_capacity(n_desc + params.prompt_count);
        for kind in kinds {
            let described = kind.unwrap_or(c);
            let tokens = descriptive(described, world, params, &mut rng);
            if let Some(other) = kind {
                truth.distractors.push((next_id, other));
            }
            sentences.push(Sentence {
                id: next_id,
                tokens,
                source: Source::Encyclopedia,
            });
            next_id += 1;
        }
        for k in 0..params.prompt_count {
            sentences.push(Sentence {
                id: next_id,
                tokens: prompt(c, k, vocab),
                source: Source::Prompt,
            });
            next_id += 1;
        }
        classes.push(sentences);
    }
    Ok((ClassCorpus::new(classes, params.max_tokens)?, truth))
}

/// Sentence-count and length summary of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    #[serde(rename = "M_min")]
    pub m_min: usize,
    #[serde(rename = "M_max")]
    pub m_max: usize,
    #[serde(rename = "M_mean")]
    pub m_mean: f64,
    #[serde(rename = "M_med")]
    pub m_median: f64,
    /// Average tokens per sentence, start and end markers included.
    #[serde(rename = "L_avg")]
    pub l_avg: f64,
}

pub fn corpus_stats(corpus: &ClassCorpus) -> CorpusStats {
    let mut counts: Vec<usize> = corpus.classes.iter().map(Vec::len).collect();
    counts.sort_unstable();
    let n = counts.len();
    let total: usize = counts.iter().sum();
    let median = if n == 0 {
        0.0
    } else if n % 2 == 1 {
        counts[n / 2] as f64
    } else {
        (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0
    };
    let tokens: usize = corpus.classes.iter().flatten().map(|s| s.tokens.len()).sum();
    CorpusStats {
        m_min: counts.first().copied().unwrap_or(0),
        m_max: counts.last().copied().unwrap_or(0),
        m_mean: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        m_median: median,
        l_avg: if total == 0 {
            0.0
        } else {
            tokens as f64 / total as f64
        },
    }
}
