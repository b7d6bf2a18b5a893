//! Finite-difference checks over the three losses, the recognition head and
//! every tape op, on small random instances.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cvlp::{all_params, ccl_graph, distill_graph, pretrain_loss, PairedBatch};
use crate::encoders::{EncoderDims, Encoders, Parameters, TeacherPair};
use crate::error::Result;
use crate::lgr::{ce_graph, lgr_graph, LgrParams};
use crate::numcore::{gradcheck, GradCheckConfig, GradCheckReport, Graph, Tensor, Var, LAYER_NORM_EPS};

/// Builds a scalar loss from parameter nodes; `extra` carries constants.
type Build = fn(&mut Graph, &[Var], &Extra) -> Result<Var>;

/// Non-differentiated data of an instance.
#[derive(Debug, Clone, Default)]
pub struct Extra {
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub consts: Vec<Tensor>,
    pub seqs: Vec<Vec<u32>>,
    pub group: usize,
}

/// A registered check: a name, an instance generator and the loss.
pub struct GradCase {
    pub name: &'static str,
    gen: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Extra),
    build: Build,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn render(&self) -> String {
        let w = self.cases.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.cases {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(
                out,
                "{verdict}  {:<w$}  instances={:<3} max_rel_err={:.3e}",
                c.name, c.instances, c.max_rel_error
            )
            .expect("string write");
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient of the named case by 1.1.
    pub corrupt: Option<String>,
    pub check: GradCheckConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 20,
            seed: 0,
            corrupt: None,
            check: GradCheckConfig::default(),
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries bounded away from zero so kinks (relu, max) stay outside the
/// finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        let s = if *v < 0.0 { -1.0 } else { 1.0 };
        *v = s * (0.05 + v.abs());
    }
    t
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

fn reduce(g: &mut Graph, y: Var, e: &Extra) -> Result<Var> {
    let n = g.value(y).len();
    g.weighted_sum(y, Arc::new(e.weights[..n].to_vec()))
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn small(rng: &mut ChaCha8Rng, hi: usize) -> usize {
    rng.random_range(1..=hi)
}

fn labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

fn unary(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Extra) {
    let (b, d) = (small(rng, 4), 1 + small(rng, 5));
    let x = away_from_zero(rng, &[b, d]);
    let w = weights(rng, b * d);
    (vec![x], Extra { weights: w, ..Extra::default() })
}

fn similarity_instance(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Extra) {
    let n = small(rng, 6);
    let s = positive(rng, &[n, n], -1.0, 1.0);
    let tau = Tensor::scalar(rng.random_range(0.1..0.8));
    let st = positive(rng, &[n, n], -1.0, 1.0);
    let c = small(rng, 4);
    let l = labels(rng, n, c);
    (vec![s, tau], Extra { labels: l, consts: vec![st], ..Extra::default() })
}

fn lgr_instance(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Extra) {
    let (c, m, d, b) = (small(rng, 4), small(rng, 3), 2 + small(rng, 6), small(rng, 4));
    let mut p = LgrParams::new(d, c, rng.random_range(0.05..0.5), rng).expect("valid tau");
    for t in [&mut p.q_gain, &mut p.q_bias, &mut p.q_b, &mut p.k_gain, &mut p.k_bias, &mut p.k_b, &mut p.mlp_b1, &mut p.mlp_b2] {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let mut inputs: Vec<Tensor> = p.parameters().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.push(randn(rng, &[b, d]));
    let et = randn(rng, &[c, m, d]);
    let l = labels(rng, b, c);
    (inputs, Extra { labels: l, consts: vec![et], ..Extra::default() })
}

fn lgr_loss(g: &mut Graph, v: &[Var], e: &Extra) -> Result<Var> {
    let d = g.shape(v[2])[0];
    let c = g.shape(v[10])[1];
    // rebuild a template whose shapes match; values come from the vars
    let template = LgrParams::new(d, c, 0.1, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n = v.len();
    let et = g.constant(e.consts[0].clone());
    let out = lgr_graph(g, &template, &v[..n - 1], v[n - 1], et)?;
    ce_graph(g, &[out.p_i, out.p_t], &e.labels)
}

/// The registered suite, losses first.
pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "L_ccl",
            gen: similarity_instance,
            build: |g, v, e| Ok(ccl_graph(g, v[0], v[1], &e.labels, &e.labels)?.2),
        },
        GradCase {
            name: "L_dis",
            gen: similarity_instance,
            build: |g, v, e| {
                let st = g.constant(e.consts[0].clone());
                distill_graph(g, v[0], v[1], st, 0.25)
            },
        },
        GradCase {
            name: "L_rec o lgr_forward",
            gen: lgr_instance,
            build: lgr_loss,
        },
        GradCase {
            name: "matmul",
            gen: |rng| {
                let (a, b, c) = (small(rng, 4), small(rng, 4), small(rng, 4));
                let x = vec![randn(rng, &[a, b]), randn(rng, &[b, c])];
                (x, Extra { weights: weights(rng, a * c), ..Extra::default() })
            },
            build: |g, v, e| {
                let y = g.matmul(v[0], v[1])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "matmul_nt",
            gen: |rng| {
                let (a, b, c) = (small(rng, 4), small(rng, 4), small(rng, 4));
                let x = vec![randn(rng, &[a, b]), randn(rng, &[c, b])];
                (x, Extra { weights: weights(rng, a * c), ..Extra::default() })
            },
            build: |g, v, e| {
                let y = g.matmul_nt(v[0], v[1])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "transpose",
            gen: unary,
            build: |g, v, e| {
                let y = g.transpose(v[0])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "reshape",
            gen: unary,
            build: |g, v, e| {
                let n = g.value(v[0]).len();
                let y = g.reshape(v[0], &[n])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "add",
            gen: |rng| {
                let (b, d) = (small(rng, 4), small(rng, 5));
                let x = vec![randn(rng, &[b, d]), randn(rng, &[b, d])];
                (x, Extra { weights: weights(rng, b * d), ..Extra::default() })
            },
            build: |g, v, e| {
                let y = g.add(v[0], v[1])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "add_bias",
            gen: |rng| {
                let (b, d) = (small(rng, 4), small(rng, 5));
                let x = vec![randn(rng, &[b, d]), randn(rng, &[d])];
                (x, Extra { weights: weights(rng, b * d), ..Extra::default() })
            },
            build: |g, v, e| {
                let y = g.add_bias(v[0], v[1])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "scale",
            gen: unary,
            build: |g, v, e| {
                let y = g.scale(v[0], -1.7);
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "div_scalar",
            gen: |rng| {
                let (mut x, e) = unary(rng);
                x.push(Tensor::scalar(rng.random_range(0.2..2.0)));
                (x, e)
            },
            build: |g, v, e| {
                let y = g.div_scalar(v[0], v[1])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "tanh",
            gen: unary,
            build: |g, v, e| {
                let y = g.tanh(v[0]);
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "relu",
            gen: unary,
            build: |g, v, e| {
                let y = g.relu(v[0]);
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "layer_norm",
            gen: |rng| {
                let (mut x, e) = unary(rng);
                let d = x[0].shape()[1];
                x.push(randn(rng, &[d]));
                x.push(randn(rng, &[d]));
                (x, e)
            },
            build: |g, v, e| {
                let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "softmax_last",
            gen: unary,
            build: |g, v, e| {
                let y = g.softmax_last(v[0]);
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "log_softmax_last",
            gen: unary,
            build: |g, v, e| {
                let y = g.log_softmax_last(v[0]);
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "normalize_last",
            gen: unary,
            build: |g, v, e| {
                let y = g.normalize_last(v[0])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "cosine_matrix",
            gen: |rng| {
                let (a, b, d) = (small(rng, 4), small(rng, 4), 1 + small(rng, 5));
                let x = vec![randn(rng, &[a, d]), randn(rng, &[b, d])];
                (x, Extra { weights: weights(rng, a * b), ..Extra::default() })
            },
            build: |g, v, e| {
                let y = g.cosine_matrix(v[0], v[1])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "embed_mean",
            gen: |rng| {
                let (vocab, d, n) = (2 + small(rng, 6), small(rng, 5), small(rng, 4));
                let seqs: Vec<Vec<u32>> = (0..n)
                    .map(|_| (0..small(rng, 5)).map(|_| rng.random_range(0..vocab as u32)).collect())
                    .collect();
                let x = vec![randn(rng, &[vocab, d])];
                (x, Extra { weights: weights(rng, n * d), seqs, ..Extra::default() })
            },
            build: |g, v, e| {
                let y = g.embed_mean(v[0], Arc::new(e.seqs.clone()))?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "attend_gather",
            gen: |rng| {
                let (b, c, m, d) = (small(rng, 3), small(rng, 4), small(rng, 3), small(rng, 5));
                let x = vec![randn(rng, &[b, c, m]), randn(rng, &[c, m, d])];
                (x, Extra { weights: weights(rng, b * c * d), ..Extra::default() })
            },
            build: |g, v, e| {
                let y = g.attend_gather(v[0], v[1])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "row_dot",
            gen: |rng| {
                let (b, c, d) = (small(rng, 3), small(rng, 4), small(rng, 5));
                let x = vec![randn(rng, &[b, d]), randn(rng, &[b, c, d])];
                (x, Extra { weights: weights(rng, b * c), ..Extra::default() })
            },
            build: |g, v, e| {
                let y = g.row_dot(v[0], v[1])?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "group_max_last",
            gen: |rng| {
                let (b, c, m) = (small(rng, 3), small(rng, 4), small(rng, 3));
                // distinct values spaced well beyond the step
                let n = b * c * m;
                let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
                for i in (1..n).rev() {
                    vals.swap(i, rng.random_range(0..=i));
                }
                let x = vec![Tensor::new(&[b, c * m], vals).expect("shape matches")];
                (x, Extra { weights: weights(rng, b * c), group: m, ..Extra::default() })
            },
            build: |g, v, e| {
                let y = g.group_max_last(v[0], e.group)?;
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "ln_floor",
            gen: |rng| {
                let (b, d) = (small(rng, 4), small(rng, 5));
                let x = vec![positive(rng, &[b, d], 0.05, 2.0)];
                (x, Extra { weights: weights(rng, b * d), ..Extra::default() })
            },
            build: |g, v, e| {
                let y = g.ln_floor(v[0], 1e-12);
                reduce(g, y, e)
            },
        },
        GradCase {
            name: "weighted_sum",
            gen: unary,
            build: reduce_first,
        },
    ]
}

fn reduce_first(g: &mut Graph, v: &[Var], e: &Extra) -> Result<Var> {
    reduce(g, v[0], e)
}

fn check_case(case: &GradCase, rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Result<GradCheckReport> {
    let (inputs, extra) = (case.gen)(rng);
    let factor = if cfg.corrupt.as_deref() == Some(case.name) { 1.1 } else { 1.0 };
    gradcheck(
        |xs: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.param(t)).collect();
            let loss = (case.build)(&mut g, &vars, &extra)?;
            let grads = g.backward(loss)?;
            Ok((
                g.scalar(loss),
                vars.iter()
                    .zip(xs)
                    .map(|(v, t)| grads.get_or_zeros(*v, t.len()).into_iter().map(|x| x * factor).collect())
                    .collect(),
            ))
        },
        &inputs,
        &cfg.check,
    )
}

/// `L_pre` through both encoders end to end, `lambda = 0.5`.
fn check_pretrain(rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Result<GradCheckReport> {
    let (d_img, d, vocab) = (1 + small(rng, 4), 1 + small(rng, 7), 4 + small(rng, 6));
    let dims = EncoderDims::new(d_img, d, vocab);
    let mut enc = Encoders::new(dims, rng.random_range(0.1..0.5), rng)?;
    let teacher = TeacherPair::snapshot(&Encoders::new(dims, rng.random_range(0.1..0.5), rng)?);
    let n = 1 + small(rng, 5);
    let c = small(rng, 4);
    let labels = labels(rng, n, c);
    let texts: Vec<Vec<u32>> = (0..n)
        .map(|_| (0..1 + small(rng, 4)).map(|_| rng.random_range(0..vocab as u32)).collect())
        .collect();
    let batch = PairedBatch::new(randn(rng, &[n, d_img]), texts, labels)?;
    let factor = if cfg.corrupt.as_deref() == Some("L_pre") { 1.1 } else { 1.0 };
    let inputs: Vec<Tensor> = all_params(&mut enc).into_iter().map(|t| t.clone()).collect();
    gradcheck(
        |xs: &[Tensor]| {
            let mut e = enc.clone();
            for (p, x) in all_params(&mut e).into_iter().zip(xs) {
                *p = x.clone();
            }
            let out = pretrain_loss(&batch, &mut e, Some(&teacher), 0.5)?;
            let grads = all_params(&mut e)
                .into_iter()
                .zip(xs)
                .map(|(t, x)| {
                    t.grad
                        .as_ref()
                        .map_or_else(|| vec![0.0; x.len()], |g| g.iter().map(|v| v * factor).collect())
                })
                .collect();
            Ok((out.l_pre, grads))
        },
        &inputs,
        &cfg.check,
    )
}

fn fold(name: &str, reports: &[GradCheckReport], tol: f64) -> CaseResult {
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    CaseResult {
        name: name.to_string(),
        instances: reports.len(),
        max_rel_error: worst,
        passed: worst <= tol && reports.iter().all(|r| r.passed),
    }
}

/// Runs every case on `cfg.instances` random instances.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut out = Vec::new();
    let all = cases();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (i, case) in all.iter().enumerate() {
        if i == 2 {
            let reports = (0..cfg.instances)
                .map(|_| check_pretrain(&mut rng, cfg))
                .collect::<Result<Vec<_>>>()?;
            out.push(fold("L_pre", &reports, cfg.check.tolerance));
        }
        let reports = (0..cfg.instances)
            .map(|_| check_case(case, &mut rng, cfg))
            .collect::<Result<Vec<_>>>()?;
        out.push(fold(case.name, &reports, cfg.check.tolerance));
    }
    Ok(SuiteReport { cases: out })
}

/// Names accepted by [`SuiteConfig::corrupt`].
pub fn case_names() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = cases().iter().map(|c| c.name).collect();
    names.insert(2, "L_pre");
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let r = run_suite(&SuiteConfig { instances: 4, ..SuiteConfig::default() }).unwrap();
        assert!(r.passed(), "{}", r.render());
        assert_eq!(r.cases.len(), case_names().len());
    }

    #[test]
    fn corrupted_gradient_is_named() {
        for name in ["L_ccl", "layer_norm", "L_pre"] {
            let cfg = SuiteConfig {
                instances: 3,
                corrupt: Some(name.to_string()),
                ..SuiteConfig::default()
            };
            let r = run_suite(&cfg).unwrap();
            assert_eq!(r.failures(), vec![name]);
            assert!(r.render().contains(&format!("FAIL  {name}")));
        }
    }
}
