//! Stage two: fine-tune the visual encoder together with a head while the
//! anchor text embeddings stay fixed; batched inference and the prediction
//! dump.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasynth::{LongTailDataset, SqrtSampler};
use crate::encoders::{bind, store_grads, Checkpoint, Parameters, Temperature, VisualEncoder};
use crate::error::{Error, Result};
use crate::hashing::{to_hex, Hash32};
use crate::numcore::{adamw_step, argmax, Graph, LrSchedule, OptimState, Tensor, Var};

use super::heads::{fc_graph, knn_graph, FcParams};
use super::{ce_graph, lgr_graph, AnchorEmbeddings, HeadOutput, LgrParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Lgr,
    Fc,
    Knn,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Lgr => "lgr",
            HeadKind::Fc => "fc",
            HeadKind::Knn => "knn",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lgr" => Ok(HeadKind::Lgr),
            "fc" => Ok(HeadKind::Fc),
            "knn" => Ok(HeadKind::Knn),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Head {
    Lgr(LgrParams),
    Fc(FcParams),
    /// The KNN head's only parameter is its temperature.
    Knn(Temperature),
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Lgr(_) => HeadKind::Lgr,
            Head::Fc(_) => HeadKind::Fc,
            Head::Knn(_) => HeadKind::Knn,
        }
    }

    fn params(&self) -> &dyn Parameters {
        match self {
            Head::Lgr(p) => p,
            Head::Fc(p) => p,
            Head::Knn(t) => t,
        }
    }

    fn params_mut(&mut self) -> &mut dyn Parameters {
        match self {
            Head::Lgr(p) => p,
            Head::Fc(p) => p,
            Head::Knn(t) => t,
        }
    }

    fn clamp(&mut self) {
        match self {
            Head::Lgr(p) => p.tau.clamp(),
            Head::Knn(t) => t.clamp(),
            Head::Fc(_) => {}
        }
    }
}

/// A fine-tuned visual encoder and its head. Holds no text-side parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetunedModel {
    pub visual: VisualEncoder,
    pub head: Head,
}

impl FinetunedModel {
    /// Fresh head on top of a pre-trained visual encoder.
    pub fn init(visual: VisualEncoder, kind: HeadKind, classes: usize, tau: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        let d = visual.dim();
        let head = match kind {
            HeadKind::Lgr => Head::Lgr(LgrParams::new(d, classes, tau, &mut rng)?),
            HeadKind::Fc => Head::Fc(FcParams::new(d, classes, &mut rng)),
            HeadKind::Knn => Head::Knn(Temperature::new(tau)?),
        };
        Ok(FinetunedModel { visual, head })
    }

    pub fn kind(&self) -> HeadKind {
        self.head.kind()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut ps = self.visual.parameters_mut();
        ps.extend(self.head.params_mut().parameters_mut());
        ps
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.visual.parameters() {
            ck.push(format!("visual.{name}"), t);
        }
        let prefix = self.kind().to_string();
        for (name, t) in self.head.params().parameters() {
            ck.push(format!("{prefix}.{name}"), t);
        }
        ck.set_meta("head", prefix);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: HeadKind = ck
            .meta("head")
            .ok_or_else(|| Error::format("checkpoint", "no head recorded"))?
            .parse()?;
        let visual = VisualEncoder::from_checkpoint(ck, "visual")?;
        let d = visual.dim();
        let get = |n: &str| ck.get(&format!("{kind}.{n}")).cloned();
        let tau = |n: &str| -> Result<Temperature> {
            Ok(Temperature {
                value: ck.take(&format!("{kind}.{n}"), &[1])?,
            })
        };
        let head = match kind {
            HeadKind::Lgr => {
                let p = LgrParams {
                    q_gain: get("q_gain")?,
                    q_bias: get("q_bias")?,
                    q_w: get("q_w")?,
                    q_b: get("q_b")?,
                    k_gain: get("k_gain")?,
                    k_bias: get("k_bias")?,
                    k_w: get("k_w")?,
                    k_b: get("k_b")?,
                    mlp_w1: get("mlp_w1")?,
                    mlp_b1: get("mlp_b1")?,
                    mlp_w2: get("mlp_w2")?,
                    mlp_b2: get("mlp_b2")?,
                    tau: tau("tau")?,
                };
                p.check()?;
                if p.dim() != d {
                    return Err(Error::shape("lgr checkpoint", &[p.dim()], &[d]));
                }
                Head::Lgr(p)
            }
            HeadKind::Fc => {
                let w = get("w")?;
                let c = w.dims2()?.1;
                if w.shape()[0] != d {
                    return Err(Error::shape("fc checkpoint", w.shape(), &[d, c]));
                }
                Head::Fc(FcParams {
                    w,
                    b: ck.take("fc.b", &[c])?,
                })
            }
            HeadKind::Knn => Head::Knn(tau("value")?),
        };
        Ok(FinetunedModel { visual, head })
    }

    /// Probability nodes the loss is taken over: `[P^I, P^T]` for LGR, the
    /// single output otherwise.
    fn probs(&self, g: &mut Graph, head: &[Var], ei: Var, et: Var) -> Result<Vec<Var>> {
        Ok(match &self.head {
            Head::Lgr(p) => {
                let o = lgr_graph(g, p, head, ei, et)?;
                vec![o.p_i, o.p_t]
            }
            Head::Fc(_) => vec![fc_graph(g, head, ei)?],
            Head::Knn(_) => vec![knn_graph(g, ei, et, head[0])?],
        })
    }

    /// Mean recognition loss over a batch; gradients land on the tensors.
    pub fn loss_and_grads(&mut self, images: &Tensor, labels: &[usize], anchors: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let vv = bind(&self.visual, &mut g, true);
        let hv = bind(self.head.params(), &mut g, true);
        let x = g.constant(images.clone());
        let et = g.constant(anchors.clone());
        let ei = self.visual.forward(&mut g, &vv, x)?;
        let probs = self.probs(&mut g, &hv, ei, et)?;
        let loss = ce_graph(&mut g, &probs, labels)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("recognition loss {value}")));
        }
        let grads = g.backward(loss)?;
        store_grads(&mut self.visual, &grads, &vv);
        store_grads(self.head.params_mut(), &grads, &hv);
        Ok(value)
    }

    /// LGR head outputs for a batch of images (LGR models only).
    pub fn head_outputs(&self, images: &Tensor, anchors: &AnchorEmbeddings) -> Result<Vec<HeadOutput>> {
        let Head::Lgr(p) = &self.head else {
            return Err(Error::InvalidArgument("head outputs need an LGR model".into()));
        };
        let ei = self.visual.encode_images(images)?;
        super::lgr_forward_batch(&ei, &anchors.embeddings, p)
    }
}

/// One test-time decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// `P^I` at the predicted class, where the head has an image branch.
    pub p_i: Option<f64>,
    /// `P^T` at the predicted class, where the head has a text branch.
    pub p_t: Option<f64>,
    /// Score vector the argmax ran over.
    pub scores: Vec<f64>,
}

const CHUNK: usize = 256;

fn predict_chunk(model: &FinetunedModel, anchors: &AnchorEmbeddings, images: &Tensor) -> Result<Vec<Prediction>> {
    let mut g = Graph::new();
    let vv = bind(&model.visual, &mut g, false);
    let hv = bind(model.head.params(), &mut g, false);
    let x = g.constant(images.clone());
    let et = g.constant(anchors.embeddings.clone());
    let ei = model.visual.forward(&mut g, &vv, x)?;
    let probs = model.probs(&mut g, &hv, ei, et)?;
    let (b, c) = g.value(probs[0]).dims2()?;
    let rows: Vec<&[f64]> = probs.iter().map(|&p| g.value(p).data()).collect();
    Ok((0..b)
        .map(|i| {
            let parts: Vec<&[f64]> = rows.iter().map(|r| &r[i * c..(i + 1) * c]).collect();
            let scores: Vec<f64> = (0..c).map(|j| parts.iter().map(|p| p[j]).sum()).collect();
            let label = argmax(&scores);
            let (p_i, p_t) = match model.kind() {
                HeadKind::Lgr => (Some(parts[0][label]), Some(parts[1][label])),
                HeadKind::Fc => (Some(parts[0][label]), None),
                HeadKind::Knn => (None, Some(parts[0][label])),
            };
            Prediction {
                label,
                p_i,
                p_t,
                scores,
            }
        })
        .collect())
}

/// Predicts every row of `images` using only the visual encoder, the head and
/// the cached anchor embeddings. Chunks run in parallel and are merged in
/// order.
pub fn predict_batch(model: &FinetunedModel, anchors: &AnchorEmbeddings, images: &Tensor) -> Result<Vec<Prediction>> {
    let n = images.dims2()?.0;
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = chunks
        .par_iter()
        .map(|idx| predict_chunk(model, anchors, &images.select_rows(idx)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// `sample_id<TAB>true_label<TAB>pred_label<TAB>P^I[pred]<TAB>P^T[pred]`;
/// a head without one of the branches writes `-` in its column.
pub fn encode_predictions(preds: &[Prediction], labels: &[usize]) -> String {
    let mut out = String::new();
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
    for (i, (p, y)) in preds.iter().zip(labels).enumerate() {
        writeln!(out, "{i}\t{y}\t{}\t{}\t{}", p.label, opt(p.p_i), opt(p.p_t)).expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub head: HeadKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            head: HeadKind::Lgr,
            epochs: 20,
            batch_size: 64,
            base_lr: 3e-3,
            min_lr: 0.0,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneTraceRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn encode_finetune_trace(rows: &[FinetuneTraceRow]) -> String {
    let mut out = String::new();
    for r in rows {
        writeln!(out, "{}\t{}\t{}", r.epoch, r.step, r.loss).expect("string write");
    }
    out
}

pub struct FinetuneOutcome {
    pub model: FinetunedModel,
    pub trace: Vec<FinetuneTraceRow>,
}

/// Fine-tunes `model` on square-root-sampled batches. `pretrain` is the hash
/// of the checkpoint the anchors must have been embedded with.
pub fn run_finetune(
    dataset: &LongTailDataset,
    anchors: &AnchorEmbeddings,
    mut model: FinetunedModel,
    cfg: &FinetuneConfig,
    pretrain: Hash32,
) -> Result<FinetuneOutcome> {
    if anchors.checkpoint != pretrain {
        return Err(Error::HashMismatch {
            artifact: "anchor embeddings".into(),
            expected: to_hex(&pretrain),
            found: to_hex(&anchors.checkpoint),
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if anchors.classes() != dataset.classes || anchors.dim() != model.visual.dim() {
        return Err(Error::shape(
            "run_finetune",
            anchors.embeddings.shape(),
            &[dataset.classes, anchors.m(), model.visual.dim()],
        ));
    }
    let spe = crate::cvlp::steps_per_epoch(dataset.len(), cfg.batch_size);
    let total = spe * cfg.epochs;
    let mut trace = Vec::with_capacity(cfg.epochs);
    if total == 0 {
        return Ok(FinetuneOutcome { model, trace });
    }
    let sched = LrSchedule::new(cfg.base_lr, cfg.min_lr, total)?;
    let mut opt = OptimState::new(cfg.base_lr, cfg.weight_decay);
    let mut sampler = SqrtSampler::new(&dataset.counts, cfg.seed ^ 0x6674)?;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..spe {
            let draws: Vec<(usize, usize)> = (0..cfg.batch_size).map(|_| sampler.next_sample()).collect();
            let rows: Vec<usize> = draws.iter().map(|d| d.1).collect();
            let labels: Vec<usize> = draws.iter().map(|d| d.0).collect();
            let images = dataset.train.select_rows(&rows)?;
            let loss = model
                .loss_and_grads(&images, &labels, &anchors.embeddings)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFiniteLoss { step },
                    other => other,
                })?;
            sum += loss;
            let lr = sched.lr(step)?;
            adamw_step(&mut model.params_mut(), &mut opt, lr)?;
            model.head.clamp();
            step += 1;
        }
        trace.push(FinetuneTraceRow {
            epoch,
            step,
            loss: sum / spe as f64,
        });
    }
    for p in model.params_mut() {
        p.grad = None;
    }
    Ok(FinetuneOutcome { model, trace })
}
