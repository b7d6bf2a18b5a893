//! Class-wise visual-linguistic pre-training: batch pairing, the class-wise
//! contrastive loss, the distillation loss and the training loop.

pub mod trace;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasynth::{ClassCorpus, LongTailDataset, SqrtSampler};
use crate::encoders::{bind, store_grads, Encoders, Parameters, TeacherPair};
use crate::error::{Error, Result};
use crate::numcore::{
    adamw_step, softmax, Graph, LrSchedule, OptimState, SimilarityMatrix, Tensor, Var,
};

pub use trace::{read_trace, write_trace, TraceRow};

/// `N` images and `N` token sequences; text `i` belongs to the class of image `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub images: Tensor,
    pub texts: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl PairedBatch {
    pub fn new(images: Tensor, texts: Vec<Vec<u32>>, labels: Vec<usize>) -> Result<Self> {
        let n = images.dims2()?.0;
        if texts.len() != n || labels.len() != n {
            return Err(Error::shape("paired batch", &[n], &[texts.len(), labels.len()]));
        }
        Ok(PairedBatch {
            images,
            texts,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Draws `n` images with the sampler and, for each, one sentence uniformly
    /// from its class.
    pub fn draw<R: Rng + ?Sized>(
        dataset: &LongTailDataset,
        corpus: &ClassCorpus,
        sampler: &mut SqrtSampler,
        rng: &mut R,
        n: usize,
    ) -> Result<Self> {
        let mut rows = Vec::with_capacity(n);
        let mut texts = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (c, i) = sampler.next_sample();
            let pool = corpus.sentences(c);
            if pool.is_empty() {
                return Err(Error::EmptyClass {
                    class: c,
                    what: "sentences",
                });
            }
            rows.push(i);
            texts.push(pool[rng.random_range(0..pool.len())].tokens.clone());
            labels.push(c);
        }
        PairedBatch::new(dataset.train.select_rows(&rows)?, texts, labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lambda: 0.5,
            epochs: 30,
            batch_size: 64,
            base_lr: 3e-3,
            min_lr: 0.0,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CclTerms {
    pub l_vis: f64,
    pub l_lin: f64,
    pub l_ccl: f64,
}

fn positive_weights(row_labels: &[usize], col_labels: &[usize], n_avg: usize) -> Result<Vec<f64>> {
    let m = col_labels.len();
    let mut w = vec![0.0; row_labels.len() * m];
    for (i, &li) in row_labels.iter().enumerate() {
        let pos = col_labels.iter().filter(|&&l| l == li).count();
        if pos == 0 {
            return Err(Error::EmptyPositiveSet { index: i });
        }
        let k = -1.0 / (pos as f64 * n_avg as f64);
        for (j, &lj) in col_labels.iter().enumerate() {
            if lj == li {
                w[i * m + j] = k;
            }
        }
    }
    Ok(w)
}

/// Tape version of the class-wise contrastive loss on an image-by-text
/// similarity matrix. Returns `(L_vis, L_lin, L_ccl)`.
pub fn ccl_graph(
    g: &mut Graph,
    s: Var,
    tau: Var,
    image_labels: &[usize],
    text_labels: &[usize],
) -> Result<(Var, Var, Var)> {
    let shape = g.shape(s).to_vec();
    if shape != [image_labels.len(), text_labels.len()] {
        return Err(Error::shape(
            "ccl_loss",
            &shape,
            &[image_labels.len(), text_labels.len()],
        ));
    }
    let z = g.div_scalar(s, tau)?;
    let rows = g.log_softmax_last(z);
    let w_vis = positive_weights(image_labels, text_labels, image_labels.len())?;
    let l_vis = g.weighted_sum(rows, Arc::new(w_vis))?;
    let zt = g.transpose(z)?;
    let cols = g.log_softmax_last(zt);
    let w_lin = positive_weights(text_labels, image_labels, text_labels.len())?;
    let l_lin = g.weighted_sum(cols, Arc::new(w_lin))?;
    let l_ccl = g.add(l_vis, l_lin)?;
    Ok((l_vis, l_lin, l_ccl))
}

/// Class-wise contrastive loss; texts carry the same labels as the images.
pub fn ccl_loss(s: &SimilarityMatrix, labels: &[usize], tau: f64) -> Result<CclTerms> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let mut g = Graph::new();
    let sv = g.constant(s.0.clone());
    let tv = g.constant(Tensor::scalar(tau));
    let (a, b, c) = ccl_graph(&mut g, sv, tv, labels, labels)?;
    Ok(CclTerms {
        l_vis: g.scalar(a),
        l_lin: g.scalar(b),
        l_ccl: g.scalar(c),
    })
}

/// Teacher weights on the diagonal: the teacher's softmax probability of the
/// positive pair `(i, i)`, row-wise and column-wise.
fn teacher_diagonal(s_teacher: &Tensor, tau_teacher: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, m) = s_teacher.dims2()?;
    if n != m {
        return Err(Error::shape("distill_loss", &[n, m], &[n, n]));
    }
    let scaled = Tensor::new(
        &[n, n],
        s_teacher.data().iter().map(|v| v / tau_teacher).collect(),
    )?;
    let rows = softmax(&scaled, 1)?;
    let cols = softmax(&scaled, 0)?;
    Ok((
        (0..n).map(|i| rows.get2(i, i)).collect(),
        (0..n).map(|i| cols.get2(i, i)).collect(),
    ))
}

/// Tape version of the distillation loss. The teacher similarities are read
/// as plain values; nothing flows back into `s_teacher`.
pub fn distill_graph(
    g: &mut Graph,
    s: Var,
    tau: Var,
    s_teacher: Var,
    tau_teacher: f64,
) -> Result<Var> {
    let (ss, st) = (g.shape(s).to_vec(), g.shape(s_teacher).to_vec());
    if ss != st || ss.len() != 2 || ss[0] != ss[1] {
        return Err(Error::shape("distill_loss", &ss, &st));
    }
    let n = ss[0];
    let (p_row, p_col) = teacher_diagonal(g.value(s_teacher), tau_teacher)?;
    let diag = |p: &[f64]| {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = -p[i] / n as f64;
        }
        Arc::new(w)
    };
    let z = g.div_scalar(s, tau)?;
    let rows = g.log_softmax_last(z);
    let l_t = g.weighted_sum(rows, diag(&p_row))?;
    let zt = g.transpose(z)?;
    let cols = g.log_softmax_last(zt);
    let l_i = g.weighted_sum(cols, diag(&p_col))?;
    g.add(l_t, l_i)
}

pub fn distill_loss(
    s: &SimilarityMatrix,
    s_teacher: &SimilarityMatrix,
    tau: f64,
    tau_teacher: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let sv = g.constant(s.0.clone());
    let tv = g.constant(Tensor::scalar(tau));
    let st = g.constant(s_teacher.0.clone());
    let l = distill_graph(&mut g, sv, tv, st, tau_teacher)?;
    Ok(g.scalar(l))
}

/// Combines the two losses on the tape. `l_dis` is `None` exactly when
/// `lambda == 1`.
pub fn combine(g: &mut Graph, l_ccl: Var, l_dis: Option<Var>, lambda: f64) -> Result<Var> {
    match l_dis {
        None if lambda == 1.0 => Ok(l_ccl),
        None => Err(Error::InvalidArgument(
            "distillation term required when lambda < 1".into(),
        )),
        Some(d) if lambda == 0.0 => Ok(d),
        Some(d) => {
            let a = g.scale(l_ccl, lambda);
            let b = g.scale(d, 1.0 - lambda);
            g.add(a, b)
        }
    }
}

/// Loss values and parameter gradients for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainStep {
    pub l_ccl: f64,
    /// `None` when the teacher was not evaluated.
    pub l_dis: Option<f64>,
    pub l_pre: f64,
}

/// Evaluates the pre-training objective and writes gradients onto the
/// encoders' tensors. The teacher is only evaluated when `lambda < 1`.
pub fn pretrain_loss(
    batch: &PairedBatch,
    encoders: &mut Encoders,
    teacher: Option<&TeacherPair>,
    lambda: f64,
) -> Result<PretrainStep> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mut g = Graph::new();
    let vv = bind(&encoders.visual, &mut g, true);
    let lv = bind(&encoders.linguistic, &mut g, true);
    let tv = bind(&encoders.tau, &mut g, true);
    let x = g.constant(batch.images.clone());
    let ei = encoders.visual.forward(&mut g, &vv, x)?;
    let et = encoders
        .linguistic
        .forward(&mut g, &lv, Arc::new(batch.texts.clone()))?;
    let s = g.cosine_matrix(ei, et)?;
    let (_, _, l_ccl) = ccl_graph(&mut g, s, tv[0], &batch.labels, &batch.labels)?;
    let l_dis = if lambda < 1.0 {
        let teacher = teacher.ok_or_else(|| {
            Error::Missing("teacher pair required when lambda < 1".into())
        })?;
        let st = teacher.similarity(&batch.images, &batch.texts)?;
        let st = g.constant(st.0);
        Some(distill_graph(&mut g, s, tv[0], st, teacher.tau())?)
    } else {
        None
    };
    let l_pre = combine(&mut g, l_ccl, l_dis, lambda)?;
    let step = PretrainStep {
        l_ccl: g.scalar(l_ccl),
        l_dis: l_dis.map(|v| g.scalar(v)),
        l_pre: g.scalar(l_pre),
    };
    if !step.l_pre.is_finite() {
        return Err(Error::NonFinite(format!("pre-training loss {}", step.l_pre)));
    }
    let grads = g.backward(l_pre)?;
    store_grads(&mut encoders.visual, &grads, &vv);
    store_grads(&mut encoders.linguistic, &grads, &lv);
    store_grads(&mut encoders.tau, &grads, &tv);
    Ok(step)
}

pub(crate) fn all_params(enc: &mut Encoders) -> Vec<&mut Tensor> {
    let mut ps = enc.visual.parameters_mut();
    ps.extend(enc.linguistic.parameters_mut());
    ps.extend(enc.tau.parameters_mut());
    ps
}

pub struct PretrainOutcome {
    pub encoders: Encoders,
    pub trace: Vec<TraceRow>,
}

pub fn steps_per_epoch(train_len: usize, batch_size: usize) -> usize {
    train_len.div_ceil(batch_size).max(1)
}

/// Runs the pre-training loop. The trace holds one row per epoch with the
/// epoch-mean losses and the temperature at the end of the epoch.
pub fn run_pretrain(
    dataset: &LongTailDataset,
    corpus: &ClassCorpus,
    mut encoders: Encoders,
    teacher: Option<&TeacherPair>,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.num_classes() != dataset.classes {
        return Err(Error::shape(
            "run_pretrain",
            &[dataset.classes],
            &[corpus.num_classes()],
        ));
    }
    if encoders.visual.d_img() != dataset.d_img {
        return Err(Error::shape(
            "run_pretrain",
            &[dataset.d_img],
            &[encoders.visual.d_img()],
        ));
    }
    if cfg.lambda < 1.0 && teacher.is_none() {
        return Err(Error::Missing("teacher pair required when lambda < 1".into()));
    }
    let spe = steps_per_epoch(dataset.len(), cfg.batch_size);
    let total = spe * cfg.epochs;
    let mut trace = Vec::with_capacity(cfg.epochs);
    if total == 0 {
        return Ok(PretrainOutcome { encoders, trace });
    }
    let sched = LrSchedule::new(cfg.base_lr, cfg.min_lr, total)?;
    let mut opt = OptimState::new(cfg.base_lr, cfg.weight_decay);
    let mut sampler = SqrtSampler::new(&dataset.counts, cfg.seed)?;
    let mut text_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7465_7874);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut ccl, mut dis, mut pre) = (0.0, 0.0, 0.0);
        for _ in 0..spe {
            let batch = PairedBatch::draw(dataset, corpus, &mut sampler, &mut text_rng, cfg.batch_size)?;
            let out = pretrain_loss(&batch, &mut encoders, teacher, cfg.lambda)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFiniteLoss { step },
                    other => other,
                })?;
            ccl += out.l_ccl;
            dis += out.l_dis.unwrap_or(0.0);
            pre += out.l_pre;
            let lr = sched.lr(step)?;
            adamw_step(&mut all_params(&mut encoders), &mut opt, lr)?;
            encoders.tau.clamp();
            step += 1;
        }
        let k = spe as f64;
        trace.push(TraceRow {
            epoch,
            step,
            l_ccl: ccl / k,
            l_dis: (cfg.lambda < 1.0).then_some(dis / k),
            l_pre: pre / k,
            tau: encoders.tau.get(),
        });
    }
    for p in all_params(&mut encoders) {
        p.grad = None;
    }
    Ok(PretrainOutcome { encoders, trace })
}

/// Mean cosine of same-class image-text pairs minus the mean over
/// different-class pairs.
pub fn class_separation(encoders: &Encoders, batch: &PairedBatch) -> Result<f64> {
    let ei = encoders.visual.encode_images(&batch.images)?;
    let et = encoders.linguistic.encode_texts(&batch.texts)?;
    let s = crate::numcore::cosine_sim_matrix(&ei, &et)?;
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..batch.len() {
        for j in 0..batch.len() {
            if batch.labels[i] == batch.labels[j] {
                same += s.get2(i, j);
                ns += 1;
            } else {
                diff += s.get2(i, j);
                nd += 1;
            }
        }
    }
    if nd == 0 {
        return Err(Error::InvalidArgument("batch has a single class".into()));
    }
    Ok(same / ns as f64 - diff / nd as f64)
}

#[cfg(test)]
mod tests;
