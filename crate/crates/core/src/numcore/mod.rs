//! Dense `f64` tensors, their forward kernels, a reverse-mode tape with exact
//! gradients, AdamW, a cosine schedule and finite-difference checking.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{
    argmax, cosine, cosine_sim_matrix, cross_entropy, layer_norm, matmul, softmax, softmax_vec,
    LAYER_NORM_EPS, PROB_FLOOR,
};
pub use optim::{adamw_step, cosine_lr, LrSchedule, OptimState};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `N x D` embeddings with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = embeddings.dims2()?;
        if n != labels.len() {
            return Err(Error::shape("EmbeddingBatch", embeddings.shape(), &[labels.len()]));
        }
        Ok(EmbeddingBatch { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// Cosine similarities between image rows and text columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(pub Tensor);

impl SimilarityMatrix {
    pub fn between(images: &EmbeddingBatch, texts: &EmbeddingBatch) -> Result<Self> {
        cosine_sim_matrix(&images.embeddings, &texts.embeddings).map(SimilarityMatrix)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get2(i, j)
    }
}
