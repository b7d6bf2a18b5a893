use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Start-of-sequence marker.
pub const SOS: u32 = 0;
/// End-of-sequence marker.
pub const EOS: u32 = 1;

/// Integer token layout shared by the corpus generator and the text encoder.
///
/// `[SOS, EOS, fillers.., template words.., attribute words.., class names..]`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub fillers: usize,
    pub template_words: usize,
    pub attributes: usize,
    pub classes: usize,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        2 + self.fillers + self.template_words + self.attributes + self.classes
    }

    pub fn filler(&self, i: usize) -> u32 {
        debug_assert!(i < self.fillers);
        (2 + i) as u32
    }

    pub fn template_word(&self, i: usize) -> u32 {
        debug_assert!(i < self.template_words);
        (2 + self.fillers + i) as u32
    }

    pub fn attribute(&self, a: usize) -> u32 {
        debug_assert!(a < self.attributes);
        (2 + self.fillers + self.template_words + a) as u32
    }

    pub fn class_name(&self, c: usize) -> u32 {
        debug_assert!(c < self.classes);
        (2 + self.fillers + self.template_words + self.attributes + c) as u32
    }

    /// The attribute index a token names, if any.
    pub fn attribute_of(&self, tok: u32) -> Option<usize> {
        let base = 2 + self.fillers + self.template_words;
        let t = tok as usize;
        (base..base + self.attributes).contains(&t).then(|| t - base)
    }

    /// The class a class-name token names, if any.
    pub fn class_of(&self, tok: u32) -> Option<usize> {
        let base = 2 + self.fillers + self.template_words + self.attributes;
        let t = tok as usize;
        (base..base + self.classes).contains(&t).then(|| t - base)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldParams {
    pub classes: usize,
    pub d_img: usize,
    /// Size of the shared attribute inventory.
    pub attributes: usize,
    /// Attributes carried by each class.
    pub attributes_per_class: usize,
    /// Weight of the class-specific direction relative to each attribute direction.
    pub identity_weight: f64,
    pub fillers: usize,
    pub template_words: usize,
}

impl WorldParams {
    pub fn new(classes: usize, d_img: usize) -> Self {
        WorldParams {
            classes,
            d_img,
            attributes: (2 * classes).max(4),
            attributes_per_class: 3,
            identity_weight: 1.0,
            fillers: 40,
            template_words: 12,
        }
    }
}

/// Latent structure both modalities are generated from.
///
/// Every attribute owns a random direction in image space. A class prototype
/// is the normalised sum of its attributes' directions plus a class-specific
/// direction, and descriptive sentences name the same attributes, so text and
/// images share a genuine signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub vocab: Vocabulary,
    pub class_attributes: Vec<Vec<usize>>,
    pub attribute_directions: Vec<Vec<f64>>,
    /// Unit-norm class prototypes, `classes x d_img`.
    pub prototypes: Vec<Vec<f64>>,
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl SyntheticWorld {
    pub fn generate(params: WorldParams, seed: u64) -> Result<Self> {
        if params.d_img < 2 {
            return Err(Error::InvalidArgument(format!(
                "d_img must be at least 2, got {}",
                params.d_img
            )));
        }
        if params.classes == 0 {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        let k = params.attributes_per_class;
        if k == 0 || k > params.attributes {
            return Err(Error::InvalidArgument(format!(
                "attributes_per_class {k} must be in [1, {}]",
                params.attributes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        let mut class_attributes = Vec::with_capacity(params.classes);
        let mut attempts = 0usize;
        while class_attributes.len() < params.classes {
            let mut set: Vec<usize> = sample(&mut rng, params.attributes, k).into_vec();
            set.sort_unstable();
            attempts += 1;
            if seen.insert(set.clone()) || attempts > 1000 * params.classes {
                class_attributes.push(set);
            }
        }
        let attribute_directions: Vec<Vec<f64>> = (0..params.attributes)
            .map(|_| random_unit(params.d_img, &mut rng))
            .collect();
        let prototypes = class_attributes
            .iter()
            .map(|attrs| {
                let own = random_unit(params.d_img, &mut rng);
                let mut p: Vec<f64> = own.iter().map(|v| v * params.identity_weight).collect();
                for &a in attrs {
                    for (x, u) in p.iter_mut().zip(&attribute_directions[a]) {
                        *x += u;
                    }
                }
                let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                p.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let vocab = Vocabulary {
            fillers: params.fillers,
            template_words: params.template_words,
            attributes: params.attributes,
            classes: params.classes,
        };
        Ok(SyntheticWorld {
            params,
            vocab,
            class_attributes,
            attribute_directions,
            prototypes,
        })
    }

    pub fn classes(&self) -> usize {
        self.params.classes
    }

    pub fn d_img(&self) -> usize {
        self.params.d_img
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_ranges_are_disjoint() {
        let v = Vocabulary {
            fillers: 3,
            template_words: 2,
            attributes: 4,
            classes: 5,
        };
        assert_eq!(v.size(), 16);
        assert_eq!(v.filler(0), 2);
        assert_eq!(v.template_word(1), 6);
        assert_eq!(v.attribute(0), 7);
        assert_eq!(v.class_name(4), 15);
        assert_eq!(v.attribute_of(10), Some(3));
        assert_eq!(v.attribute_of(11), None);
        assert_eq!(v.class_of(11), Some(0));
    }

    #[test]
    fn prototypes_are_unit_and_attribute_sets_distinct() {
        let w = SyntheticWorld::generate(WorldParams::new(20, 16), 5).unwrap();
        for p in &w.prototypes {
            let n: f64 = p.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let distinct: BTreeSet<_> = w.class_attributes.iter().collect();
        assert_eq!(distinct.len(), 20);
    }

    #[test]
    fn rejects_tiny_image_dimension() {
        assert!(SyntheticWorld::generate(WorldParams::new(3, 1), 0).is_err());
    }
}
