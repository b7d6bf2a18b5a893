//! Ablation heads and zero-shot classification.
//!
//! FC: `softmax(W e + b)` on the image embedding alone.
//! KNN: `softmax_c(max_m cos(e, E^T_{c,m}) / tau)`.
//! Zero-shot: `argmax_c cos(e, mean_m E^T_{c,m})`.

use rand::Rng;

use crate::encoders::Parameters;
use crate::error::{Error, Result};
use crate::numcore::{argmax, cosine, softmax_vec, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct FcParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl FcParams {
    pub fn new<R: Rng + ?Sized>(d: usize, classes: usize, rng: &mut R) -> Self {
        FcParams {
            w: Tensor::randn(&[d, classes], (1.0 / d as f64).sqrt(), rng),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn zeros(d: usize, classes: usize) -> Self {
        FcParams {
            w: Tensor::zeros(&[d, classes]),
            b: Tensor::zeros(&[classes]),
        }
    }
}

impl Parameters for FcParams {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w", &self.w), ("b", &self.b)]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

pub fn fc_graph(g: &mut Graph, vars: &[Var], ei: Var) -> Result<Var> {
    let z = g.matmul(ei, vars[0])?;
    let z = g.add_bias(z, vars[1])?;
    Ok(g.softmax_last(z))
}

pub fn fc_forward(ei: &[f64], fc: &FcParams) -> Result<Vec<f64>> {
    let (d, c) = fc.w.dims2()?;
    if ei.len() != d {
        return Err(Error::shape("fc_forward", &[ei.len()], &[d, c]));
    }
    let z: Vec<f64> = (0..c)
        .map(|j| (0..d).map(|k| ei[k] * fc.w.get2(k, j)).sum::<f64>() + fc.b.data()[j])
        .collect();
    Ok(softmax_vec(&z))
}

/// `ei` is `[B, D]`, `et` is `[C, M, D]`, `tau` a single-element node.
pub fn knn_graph(g: &mut Graph, ei: Var, et: Var, tau: Var) -> Result<Var> {
    let (c, m, d) = match *g.shape(et) {
        [c, m, d] => (c, m, d),
        ref s => return Err(Error::shape("knn_forward", s, &[0, 0, 0])),
    };
    let flat = g.reshape(et, &[c * m, d])?;
    let cos = g.cosine_matrix(ei, flat)?;
    let best = g.group_max_last(cos, m)?;
    let z = g.div_scalar(best, tau)?;
    Ok(g.softmax_last(z))
}

pub fn knn_forward(ei: &[f64], anchors: &Tensor, tau: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let e = g.constant(Tensor::new(&[1, ei.len()], ei.to_vec())?);
    let et = g.constant(anchors.clone());
    let t = g.constant(Tensor::scalar(tau));
    let p = knn_graph(&mut g, e, et, t)?;
    Ok(g.value(p).data().to_vec())
}

/// Mean anchor embedding per class, `C x D` row-major.
pub fn class_means(anchors: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (c, m, d) = match *anchors.shape() {
        [c, m, d] => (c, m, d),
        ref s => return Err(Error::shape("class_means", s, &[0, 0, 0])),
    };
    Ok((0..c)
        .map(|ci| {
            let mut mean = vec![0.0; d];
            for j in 0..m {
                let row = &anchors.data()[(ci * m + j) * d..(ci * m + j + 1) * d];
                mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            mean
        })
        .collect())
}

/// Nearest class mean by cosine, smaller class id on ties.
pub fn zero_shot_classify(ei: &[f64], anchors: &Tensor) -> Result<usize> {
    let means = class_means(anchors)?;
    let sims = means
        .iter()
        .map(|m| cosine(ei, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax(&sims))
}
