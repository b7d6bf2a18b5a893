//! Language-guided recognition head, its loss, the fine-tuning loop and the
//! ablation heads.
//!
//! For an image embedding `e` and anchor embeddings `E^T` (`C x M x D`):
//!
//! ```text
//! Q    = Linear(LN(e))           K = Linear(LN(E^T))        V = E^T
//! A_c  = softmax_m(Q K_c^T / sqrt(D))                       G_c = A_c V_c
//! P^I  = softmax(MLP(e))         P^T = softmax_c(cos(e, G_c) / tau)
//! P    = P^I + P^T
//! ```

pub mod cache;
pub mod finetune;
pub mod heads;

use std::sync::Arc;

use rand::Rng;

use crate::encoders::{bind, Parameters, Temperature};
use crate::error::{Error, Result};
use crate::numcore::{argmax, cross_entropy, Graph, Tensor, Var, LAYER_NORM_EPS, PROB_FLOOR};

pub use cache::{read_cache, write_cache, AnchorEmbeddings, CACHE_HEADER_BYTES};
pub use finetune::{
    encode_finetune_trace, encode_predictions, predict_batch, run_finetune, FinetuneConfig, FinetuneOutcome, FinetunedModel, Head, HeadKind,
    Prediction,
};
pub use heads::{fc_forward, knn_forward, zero_shot_classify, FcParams};

#[derive(Debug, Clone, PartialEq)]
pub struct LgrParams {
    pub q_gain: Tensor,
    pub q_bias: Tensor,
    pub q_w: Tensor,
    pub q_b: Tensor,
    pub k_gain: Tensor,
    pub k_bias: Tensor,
    pub k_w: Tensor,
    pub k_b: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub tau: Temperature,
}

impl LgrParams {
    pub fn new<R: Rng + ?Sized>(d: usize, classes: usize, tau: f64, rng: &mut R) -> Result<Self> {
        let s = (1.0 / d as f64).sqrt();
        Ok(LgrParams {
            q_gain: Tensor::ones(&[d]),
            q_bias: Tensor::zeros(&[d]),
            q_w: Tensor::randn(&[d, d], s, rng),
            q_b: Tensor::zeros(&[d]),
            k_gain: Tensor::ones(&[d]),
            k_bias: Tensor::zeros(&[d]),
            k_w: Tensor::randn(&[d, d], s, rng),
            k_b: Tensor::zeros(&[d]),
            mlp_w1: Tensor::randn(&[d, d], (2.0 / d as f64).sqrt(), rng),
            mlp_b1: Tensor::zeros(&[d]),
            mlp_w2: Tensor::randn(&[d, classes], s, rng),
            mlp_b2: Tensor::zeros(&[classes]),
            tau: Temperature::new(tau)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.q_w.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.mlp_b2.len()
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        let c = self.classes();
        let want: [(&Tensor, &[usize]); 12] = [
            (&self.q_gain, &[d]),
            (&self.q_bias, &[d]),
            (&self.q_w, &[d, d]),
            (&self.q_b, &[d]),
            (&self.k_gain, &[d]),
            (&self.k_bias, &[d]),
            (&self.k_w, &[d, d]),
            (&self.k_b, &[d]),
            (&self.mlp_w1, &[d, d]),
            (&self.mlp_b1, &[d]),
            (&self.mlp_w2, &[d, c]),
            (&self.mlp_b2, &[c]),
        ];
        for (t, shape) in want {
            if t.shape() != shape {
                return Err(Error::shape("lgr params", t.shape(), shape));
            }
        }
        Ok(())
    }
}

impl Parameters for LgrParams {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("q_gain", &self.q_gain),
            ("q_bias", &self.q_bias),
            ("q_w", &self.q_w),
            ("q_b", &self.q_b),
            ("k_gain", &self.k_gain),
            ("k_bias", &self.k_bias),
            ("k_w", &self.k_w),
            ("k_b", &self.k_b),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
            ("tau", &self.tau.value),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.q_gain,
            &mut self.q_bias,
            &mut self.q_w,
            &mut self.q_b,
            &mut self.k_gain,
            &mut self.k_bias,
            &mut self.k_w,
            &mut self.k_b,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.tau.value,
        ]
    }
}

/// Head nodes on a tape, all batched over `B` images.
#[derive(Debug, Clone, Copy)]
pub struct LgrVars {
    /// `[B, C]`
    pub p_i: Var,
    /// `[B, C]`
    pub p_t: Var,
    /// `[B, C, M]`
    pub attn: Var,
    /// `[B, C, D]`
    pub gather: Var,
}

/// Builds the head on a tape. `vars` come from binding `params`; `ei` is
/// `[B, D]` and `et` is `[C, M, D]`.
pub fn lgr_graph(g: &mut Graph, params: &LgrParams, vars: &[Var], ei: Var, et: Var) -> Result<LgrVars> {
    let (c, m, d) = match *g.shape(et) {
        [c, m, d] => (c, m, d),
        ref s => return Err(Error::shape("lgr_forward", s, &[0, 0, params.dim()])),
    };
    let eis = g.shape(ei).to_vec();
    if eis.len() != 2 || eis[1] != d || d != params.dim() || c != params.classes() {
        return Err(Error::shape("lgr_forward", &eis, &[c, m, d]));
    }
    let b = eis[0];

    let q = g.layer_norm(ei, vars[0], vars[1], LAYER_NORM_EPS)?;
    let q = g.matmul(q, vars[2])?;
    let q = g.add_bias(q, vars[3])?;

    let flat = g.reshape(et, &[c * m, d])?;
    let k = g.layer_norm(flat, vars[4], vars[5], LAYER_NORM_EPS)?;
    let k = g.matmul(k, vars[6])?;
    let k = g.add_bias(k, vars[7])?;

    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let scores = g.reshape(scores, &[b, c, m])?;
    let attn = g.softmax_last(scores);
    let gather = g.attend_gather(attn, et)?;

    let h = g.matmul(ei, vars[8])?;
    let h = g.add_bias(h, vars[9])?;
    let h = g.relu(h);
    let logits = g.matmul(h, vars[10])?;
    let logits = g.add_bias(logits, vars[11])?;
    let p_i = g.softmax_last(logits);

    let ein = g.normalize_last(ei)?;
    let gn = g.normalize_last(gather)?;
    let cos = g.row_dot(ein, gn)?;
    let cos = g.div_scalar(cos, vars[12])?;
    let p_t = g.softmax_last(cos);
    Ok(LgrVars {
        p_i,
        p_t,
        attn,
        gather,
    })
}

/// Mean over the batch of `sum_k -ln(max(P_k[y], floor))` for each
/// probability node `P_k` (`[B, C]`).
pub fn ce_graph(g: &mut Graph, probs: &[Var], labels: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in probs {
        let (b, c) = g.value(p).dims2()?;
        if b != labels.len() {
            return Err(Error::shape("rec_loss", &[b, c], &[labels.len()]));
        }
        let mut w = vec![0.0; b * c];
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            w[i * c + y] = -1.0 / b as f64;
        }
        let lp = g.ln_floor(p, PROB_FLOOR);
        let term = g.weighted_sum(lp, Arc::new(w))?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no probability terms".into()))
}

/// Per-sample head output.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub p_i: Vec<f64>,
    pub p_t: Vec<f64>,
    /// `C x M`, row-major.
    pub attn: Vec<f64>,
    /// `C x D`, row-major.
    pub gather: Vec<f64>,
}

impl HeadOutput {
    /// `P = P^I + P^T`, not renormalised.
    pub fn p(&self) -> Vec<f64> {
        self.p_i.iter().zip(&self.p_t).map(|(a, b)| a + b).collect()
    }
}

/// Runs the head on a batch of image embeddings without tracking gradients.
pub fn lgr_forward_batch(ei: &Tensor, anchors: &Tensor, params: &LgrParams) -> Result<Vec<HeadOutput>> {
    let mut g = Graph::new();
    let vars = bind(params, &mut g, false);
    let e = g.constant(ei.clone());
    let et = g.constant(anchors.clone());
    let out = lgr_graph(&mut g, params, &vars, e, et)?;
    let (b, c) = g.value(out.p_i).dims2()?;
    let m = anchors.shape()[1];
    let d = anchors.shape()[2];
    let (pi, pt) = (g.value(out.p_i).data(), g.value(out.p_t).data());
    let (at, ga) = (g.value(out.attn).data(), g.value(out.gather).data());
    Ok((0..b)
        .map(|i| HeadOutput {
            p_i: pi[i * c..(i + 1) * c].to_vec(),
            p_t: pt[i * c..(i + 1) * c].to_vec(),
            attn: at[i * c * m..(i + 1) * c * m].to_vec(),
            gather: ga[i * c * d..(i + 1) * c * d].to_vec(),
        })
        .collect())
}

/// Head output for a single image embedding.
pub fn lgr_forward(ei: &[f64], anchors: &Tensor, params: &LgrParams) -> Result<HeadOutput> {
    let e = Tensor::new(&[1, ei.len()], ei.to_vec())?;
    Ok(lgr_forward_batch(&e, anchors, params)?.remove(0))
}

/// `CE(P^I, y) + CE(P^T, y)` with probabilities floored at [`PROB_FLOOR`].
pub fn rec_loss(out: &HeadOutput, y: usize) -> Result<f64> {
    Ok(cross_entropy(&out.p_i, y)? + cross_entropy(&out.p_t, y)?)
}

/// Argmax of `P^I + P^T`, smaller class id on ties.
pub fn predict(out: &HeadOutput) -> usize {
    argmax(&out.p())
}
