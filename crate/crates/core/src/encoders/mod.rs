//! Visual and linguistic encoders, the learnable temperature, and the frozen
//! teacher pair used for distillation.

pub mod checkpoint;

use std::cell::Cell;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hashing::{sha256, Hash32};
use crate::numcore::{EmbeddingBatch, Gradients, Graph, SimilarityMatrix, Tensor, Var};

pub use checkpoint::Checkpoint;

/// Anything holding trainable tensors in a fixed order.
pub trait Parameters {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
}

/// Places a module's parameters on the tape, tracked or frozen.
pub fn bind<P: Parameters + ?Sized>(p: &P, g: &mut Graph, trainable: bool) -> Vec<Var> {
    p.parameters()
        .into_iter()
        .map(|(_, t)| {
            if trainable {
                g.param(t)
            } else {
                g.constant(t.clone())
            }
        })
        .collect()
}

/// Copies gradients from the tape onto the module's tensors.
pub fn store_grads<P: Parameters + ?Sized>(p: &mut P, grads: &Gradients, vars: &[Var]) {
    for (t, v) in p.parameters_mut().into_iter().zip(vars) {
        let n = t.len();
        t.grad = Some(grads.get_or_zeros(*v, n));
    }
}

fn write_params<P: Parameters + ?Sized>(p: &P, prefix: &str, ck: &mut Checkpoint) {
    for (name, t) in p.parameters() {
        ck.push(format!("{prefix}.{name}"), t);
    }
}

/// Two-layer perceptron `d_img -> hidden -> D` with a tanh in between.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(d_img: usize, hidden: usize, d: usize, rng: &mut R) -> Self {
        VisualEncoder {
            w1: Tensor::randn(&[d_img, hidden], (1.0 / d_img as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, d], (1.0 / hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros(d_img: usize, hidden: usize, d: usize) -> Self {
        VisualEncoder {
            w1: Tensor::zeros(&[d_img, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn d_img(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// `x` is `[N, d_img]`; `vars` come from [`bind`].
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let d_in = self.d_img();
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != d_in {
            return Err(Error::shape("encode_images", xs, &[0, d_in]));
        }
        let h = g.matmul(x, vars[0])?;
        let h = g.add_bias(h, vars[1])?;
        let h = g.tanh(h);
        let o = g.matmul(h, vars[2])?;
        g.add_bias(o, vars[3])
    }

    /// Embeds a batch of image vectors without tracking gradients.
    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = bind(self, &mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let w1 = ck.get(&format!("{prefix}.w1"))?.clone();
        let w2 = ck.get(&format!("{prefix}.w2"))?.clone();
        let (d_img, hidden) = w1.dims2()?;
        let d = w2.dims2()?.1;
        VisualEncoder {
            w1,
            b1: ck.take(&format!("{prefix}.b1"), &[hidden])?,
            w2,
            b2: ck.take(&format!("{prefix}.b2"), &[d])?,
        }
        .check_dims(d_img)
    }

    fn check_dims(self, d_img: usize) -> Result<Self> {
        if self.w2.shape()[0] != self.w1.shape()[1] || self.d_img() != d_img {
            return Err(Error::shape("visual encoder", self.w1.shape(), self.w2.shape()));
        }
        Ok(self)
    }
}

impl Parameters for VisualEncoder {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

thread_local! {
    static LINGUISTIC_LOADS: Cell<usize> = const { Cell::new(0) };
}

/// How many times linguistic-encoder parameters have been read from a
/// checkpoint on this thread.
pub fn linguistic_load_count() -> usize {
    LINGUISTIC_LOADS.with(Cell::get)
}

/// Token embedding table, mean pool over the sequence (markers included),
/// then a linear projection to `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinguisticEncoder {
    pub table: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub max_tokens: usize,
}

impl LinguisticEncoder {
    pub fn new<R: Rng + ?Sized>(
        vocab: usize,
        d_token: usize,
        d: usize,
        max_tokens: usize,
        rng: &mut R,
    ) -> Self {
        LinguisticEncoder {
            table: Tensor::randn(&[vocab, d_token], 1.0, rng),
            proj_w: Tensor::randn(&[d_token, d], (1.0 / d_token as f64).sqrt(), rng),
            proj_b: Tensor::zeros(&[d]),
            max_tokens,
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.proj_w.shape()[1]
    }

    pub fn check_lengths(&self, seqs: &[Vec<u32>]) -> Result<()> {
        for (i, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidArgument(format!("sequence {i} is empty")));
            }
            if s.len() > self.max_tokens {
                return Err(Error::Overlength {
                    index: i,
                    len: s.len(),
                    limit: self.max_tokens,
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], seqs: Arc<Vec<Vec<u32>>>) -> Result<Var> {
        self.check_lengths(&seqs)?;
        let pooled = g.embed_mean(vars[0], seqs)?;
        let o = g.matmul(pooled, vars[1])?;
        g.add_bias(o, vars[2])
    }

    /// Embeds token sequences without tracking gradients.
    pub fn encode_texts(&self, seqs: &[Vec<u32>]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = bind(self, &mut g, false);
        let out = self.forward(&mut g, &vars, Arc::new(seqs.to_vec()))?;
        Ok(g.value(out).clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str, max_tokens: usize) -> Result<Self> {
        LINGUISTIC_LOADS.with(|c| c.set(c.get() + 1));
        let table = ck.get(&format!("{prefix}.table"))?.clone();
        let proj_w = ck.get(&format!("{prefix}.proj_w"))?.clone();
        let (_, dt) = table.dims2()?;
        let (dt2, d) = proj_w.dims2()?;
        if dt != dt2 {
            return Err(Error::shape("linguistic encoder", table.shape(), proj_w.shape()));
        }
        Ok(LinguisticEncoder {
            table,
            proj_w,
            proj_b: ck.take(&format!("{prefix}.proj_b"), &[d])?,
            max_tokens,
        })
    }

    /// Content hash of the parameters.
    pub fn hash(&self) -> Hash32 {
        let mut ck = Checkpoint::new();
        write_params(self, "linguistic", &mut ck);
        sha256(&ck.encode())
    }
}

impl Parameters for LinguisticEncoder {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("table", &self.table),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.table, &mut self.proj_w, &mut self.proj_b]
    }
}

/// Learnable softmax temperature, kept inside `[MIN, MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Temperature {
    pub value: Tensor,
}

impl Temperature {
    pub const MIN: f64 = 0.01;
    pub const MAX: f64 = 1.0;
    pub const INIT: f64 = 0.07;

    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        let mut t = Temperature {
            value: Tensor::scalar(tau),
        };
        t.clamp();
        Ok(t)
    }

    pub fn get(&self) -> f64 {
        self.value.item()
    }

    pub fn clamp(&mut self) {
        let v = self.value.item().clamp(Self::MIN, Self::MAX);
        self.value.data_mut()[0] = v;
    }
}

impl Parameters for Temperature {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("value", &self.value)]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.value]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_img: usize,
    pub hidden: usize,
    pub embed: usize,
    pub d_token: usize,
    pub vocab: usize,
    pub max_tokens: usize,
}

impl EncoderDims {
    /// Hidden width `2D`, token width `D`.
    pub fn new(d_img: usize, embed: usize, vocab: usize) -> Self {
        EncoderDims {
            d_img,
            hidden: 2 * embed,
            embed,
            d_token: embed,
            vocab,
            max_tokens: crate::datasynth::MAX_TOKENS,
        }
    }
}

/// The pair of encoders trained in stage one, with their temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub visual: VisualEncoder,
    pub linguistic: LinguisticEncoder,
    pub tau: Temperature,
}

impl Encoders {
    pub fn new<R: Rng + ?Sized>(dims: EncoderDims, tau: f64, rng: &mut R) -> Result<Self> {
        Ok(Encoders {
            visual: VisualEncoder::new(dims.d_img, dims.hidden, dims.embed, rng),
            linguistic: LinguisticEncoder::new(
                dims.vocab,
                dims.d_token,
                dims.embed,
                dims.max_tokens,
                rng,
            ),
            tau: Temperature::new(tau)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.visual.dim()
    }

    pub fn encode_images(&self, images: &Tensor, labels: Vec<usize>) -> Result<EmbeddingBatch> {
        EmbeddingBatch::new(self.visual.encode_images(images)?, labels)
    }

    pub fn encode_texts(&self, seqs: &[Vec<u32>], labels: Vec<usize>) -> Result<EmbeddingBatch> {
        EmbeddingBatch::new(self.linguistic.encode_texts(seqs)?, labels)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        write_params(&self.visual, "visual", &mut ck);
        write_params(&self.linguistic, "linguistic", &mut ck);
        ck.push("tau", &self.tau.value);
        ck.set_meta("max_tokens", self.linguistic.max_tokens.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let max_tokens = ck
            .meta("max_tokens")
            .and_then(|v| v.parse().ok())
            .unwrap_or(crate::datasynth::MAX_TOKENS);
        let visual = VisualEncoder::from_checkpoint(ck, "visual")?;
        let linguistic = LinguisticEncoder::from_checkpoint(ck, "linguistic", max_tokens)?;
        if visual.dim() != linguistic.dim() {
            return Err(Error::shape(
                "encoders",
                &[visual.dim()],
                &[linguistic.dim()],
            ));
        }
        Ok(Encoders {
            visual,
            linguistic,
            tau: Temperature::new(ck.take("tau", &[1])?.item())?,
        })
    }
}

/// Frozen encoder pair with its own frozen temperature.
///
/// There is no mutable access; the parameters cannot change once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPair {
    encoders: Encoders,
}

impl TeacherPair {
    pub fn snapshot(encoders: &Encoders) -> Self {
        TeacherPair {
            encoders: encoders.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(TeacherPair {
            encoders: Encoders::from_checkpoint(ck)?,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Hash32)> {
        let (ck, hash) = Checkpoint::read(path)
            .map_err(|e| Error::Missing(format!("teacher checkpoint: {e}")))?;
        Ok((Self::from_checkpoint(&ck)?, hash))
    }

    pub fn tau(&self) -> f64 {
        self.encoders.tau.get()
    }

    pub fn encoders(&self) -> &Encoders {
        &self.encoders
    }

    /// Teacher image-text cosine similarities. Nothing here is on a tape.
    pub fn similarity(&self, images: &Tensor, texts: &[Vec<u32>]) -> Result<SimilarityMatrix> {
        let ei = self.encoders.visual.encode_images(images)?;
        let et = self.encoders.linguistic.encode_texts(texts)?;
        crate::numcore::cosine_sim_matrix(&ei, &et).map(SimilarityMatrix)
    }

    pub fn hash(&self) -> Hash32 {
        self.encoders.to_checkpoint().hash()
    }
}
