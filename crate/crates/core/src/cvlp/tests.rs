use super::*;
use crate::datasynth::{gen_corpus, gen_pareto_counts, gen_synthetic, CorpusParams, SyntheticWorld, WorldParams};
use crate::encoders::EncoderDims;
use crate::numcore::{gradcheck, GradCheckConfig};
use proptest::prelude::*;
use rand::Rng;

fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
    SimilarityMatrix(Tensor::from_rows(rows).unwrap())
}

fn rand_sim(n: usize, rng: &mut ChaCha8Rng) -> SimilarityMatrix {
    let rows = (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect::<Vec<Vec<f64>>>();
    sim(&rows)
}

/// Direct transcription: for each i, average of -log(e^{s_ij/t} / sum_k e^{s_ik/t})
/// over positives j, then the same down the columns.
fn naive_ccl(s: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let n = s.len();
    let mut vis = 0.0;
    let mut lin = 0.0;
    for i in 0..n {
        let denom_row: f64 = (0..n).map(|k| (s[i][k] / tau).exp()).sum();
        let denom_col: f64 = (0..n).map(|k| (s[k][i] / tau).exp()).sum();
        let pos: Vec<usize> = (0..n).filter(|&j| labels[j] == labels[i]).collect();
        let mut a = 0.0;
        let mut b = 0.0;
        for &j in &pos {
            a += -((s[i][j] / tau).exp() / denom_row).ln();
            b += -((s[j][i] / tau).exp() / denom_col).ln();
        }
        vis += a / pos.len() as f64;
        lin += b / pos.len() as f64;
    }
    (vis + lin) / n as f64
}

fn naive_dis(s: &[Vec<f64>], st: &[Vec<f64>], tau: f64, tau_t: f64) -> f64 {
    let n = s.len();
    let p = |m: &[Vec<f64>], t: f64, i: usize, by_row: bool| {
        let num = (m[i][i] / t).exp();
        let den: f64 = (0..n)
            .map(|k| if by_row { m[i][k] } else { m[k][i] })
            .map(|v| (v / t).exp())
            .sum();
        num / den
    };
    let mut total = 0.0;
    for i in 0..n {
        total += -p(st, tau_t, i, true) * p(s, tau, i, true).ln();
        total += -p(st, tau_t, i, false) * p(s, tau, i, false).ln();
    }
    total / n as f64
}

fn rows_of(s: &SimilarityMatrix) -> Vec<Vec<f64>> {
    s.0.rows().map(<[f64]>::to_vec).collect()
}

#[test]
fn ccl_single_sample_is_zero() {
    let t = ccl_loss(&sim(&[vec![0.3]]), &[4], 0.07).unwrap();
    assert_eq!(t.l_ccl, 0.0);
}

#[test]
fn ccl_uniform_same_class_is_two_ln_n() {
    for n in 2..7 {
        let s = SimilarityMatrix(Tensor::full(&[n, n], 0.4));
        let t = ccl_loss(&s, &vec![1; n], 0.1).unwrap();
        assert!((t.l_ccl - 2.0 * (n as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn ccl_two_by_two_reference_value() {
    let t = ccl_loss(&sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]), &[0, 1], 1.0).unwrap();
    let expect = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    assert!((t.l_ccl - expect).abs() < 1e-12);
    assert!((t.l_ccl - 0.6265).abs() < 1e-4);
    assert!((t.l_vis - t.l_lin).abs() < 1e-15);
}

#[test]
fn ccl_matches_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(1..7);
        let s = rand_sim(n, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let tau = rng.random_range(0.05..1.0);
        let got = ccl_loss(&s, &labels, tau).unwrap().l_ccl;
        let want = naive_ccl(&rows_of(&s), &labels, tau);
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn ccl_rejects_empty_positive_set() {
    let mut g = Graph::new();
    let s = g.constant(Tensor::zeros(&[2, 2]));
    let t = g.constant(Tensor::scalar(1.0));
    assert!(matches!(
        ccl_graph(&mut g, s, t, &[0, 1], &[0, 0]),
        Err(Error::EmptyPositiveSet { index: 1 })
    ));
}

proptest! {
    #[test]
    fn ccl_nonnegative_and_shift_invariant(seed in 0u64..500, n in 1usize..7, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rand_sim(n, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let base = ccl_loss(&s, &labels, 0.2).unwrap().l_ccl;
        prop_assert!(base >= 0.0);
        let shifted = SimilarityMatrix(Tensor::new(&[n, n], s.0.data().iter().map(|v| v + shift).collect()).unwrap());
        let moved = ccl_loss(&shifted, &labels, 0.2).unwrap().l_ccl;
        prop_assert!((base - moved).abs() <= 1e-10);
    }

    #[test]
    fn ccl_invariant_to_swapping_same_class_samples(seed in 0u64..500, n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rows_of(&rand_sim(n, &mut rng));
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[1] = labels[0];
        // swap sample 0 and 1 on both sides
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(0, 1);
        let swapped: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| s[i][j]).collect()).collect();
        let a = ccl_loss(&sim(&s), &labels, 0.3).unwrap().l_ccl;
        let b = ccl_loss(&sim(&swapped), &labels, 0.3).unwrap().l_ccl;
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn distill_single_sample_is_zero() {
    assert_eq!(distill_loss(&sim(&[vec![0.2]]), &sim(&[vec![0.9]]), 0.07, 0.05).unwrap(), 0.0);
}

#[test]
fn distill_uniform_teacher_weights_by_one_over_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4;
    let s = rand_sim(n, &mut rng);
    let st = SimilarityMatrix(Tensor::full(&[n, n], 0.5));
    let got = distill_loss(&s, &st, 0.5, 0.07).unwrap();
    let rows = rows_of(&s);
    let mut want = 0.0;
    for i in 0..n {
        let lr = (rows[i][i] / 0.5) - rows[i].iter().map(|v| (v / 0.5).exp()).sum::<f64>().ln();
        let lc = (rows[i][i] / 0.5) - (0..n).map(|k| (rows[k][i] / 0.5).exp()).sum::<f64>().ln();
        want += -(lr + lc) / n as f64;
    }
    assert!((got - want / n as f64).abs() < 1e-12);
}

#[test]
fn distill_matches_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let n = rng.random_range(1..7);
        let s = rand_sim(n, &mut rng);
        let st = rand_sim(n, &mut rng);
        let (tau, tt) = (rng.random_range(0.05..1.0), rng.random_range(0.05..1.0));
        let got = distill_loss(&s, &st, tau, tt).unwrap();
        let want = naive_dis(&rows_of(&s), &rows_of(&st), tau, tt);
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }
    let s = rand_sim(3, &mut rng);
    assert!(matches!(
        distill_loss(&s, &rand_sim(2, &mut rng), 0.1, 0.1),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn no_gradient_reaches_teacher_similarities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let s = g.param(&rand_sim(3, &mut rng).0);
    let t = g.param(&Tensor::scalar(0.2));
    let st = g.param(&rand_sim(3, &mut rng).0);
    let l = distill_graph(&mut g, s, t, st, 0.1).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(st).is_none());
    assert!(grads.get(s).is_some());
}

fn loss_grad_check<F>(n: usize, seed: u64, build: F)
where
    F: Fn(&mut Graph, Var, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rand_sim(n, &mut rng).0;
    let tau = Tensor::scalar(rng.random_range(0.1..0.8));
    let r = gradcheck(
        |xs: &[Tensor]| {
            let mut g = Graph::new();
            let sv = g.param(&xs[0]);
            let tv = g.param(&xs[1]);
            let l = build(&mut g, sv, tv)?;
            let grads = g.backward(l)?;
            Ok((
                g.scalar(l),
                vec![grads.get_or_zeros(sv, xs[0].len()), grads.get_or_zeros(tv, 1)],
            ))
        },
        &[s, tau],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn ccl_and_distill_gradients() {
    for seed in 0..10 {
        let n = 2 + seed as usize % 5;
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
        loss_grad_check(n, seed, |g, s, t| Ok(ccl_graph(g, s, t, &labels, &labels)?.2));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let st = rand_sim(n, &mut rng).0;
        loss_grad_check(n, seed, |g, s, t| {
            let stv = g.constant(st.clone());
            distill_graph(g, s, t, stv, 0.3)
        });
    }
}

fn tiny_setup(seed: u64) -> (Encoders, TeacherPair, PairedBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = EncoderDims::new(5, 4, 12);
    let enc = Encoders::new(dims, 0.3, &mut rng).unwrap();
    let teacher = TeacherPair::snapshot(&Encoders::new(dims, 0.2, &mut rng).unwrap());
    let n = 5;
    let labels = vec![0, 1, 0, 2, 1];
    let texts = (0..n)
        .map(|i| vec![0, 2 + labels[i] as u32, 3 + i as u32, 1])
        .collect();
    let batch = PairedBatch::new(Tensor::randn(&[n, 5], 1.0, &mut rng), texts, labels).unwrap();
    (enc, teacher, batch)
}

#[test]
fn pretrain_loss_lambda_endpoints_are_exact() {
    let (mut enc, teacher, batch) = tiny_setup(1);
    let s = SimilarityMatrix(crate::numcore::cosine_sim_matrix(
        &enc.visual.encode_images(&batch.images).unwrap(),
        &enc.linguistic.encode_texts(&batch.texts).unwrap(),
    ).unwrap());
    let st = teacher.similarity(&batch.images, &batch.texts).unwrap();
    let tau = enc.tau.get();
    let ccl = ccl_loss(&s, &batch.labels, tau).unwrap().l_ccl;
    let dis = distill_loss(&s, &st, tau, teacher.tau()).unwrap();

    let one = pretrain_loss(&batch, &mut enc, None, 1.0).unwrap();
    assert_eq!(one.l_pre.to_bits(), ccl.to_bits());
    assert_eq!(one.l_dis, None);
    let zero = pretrain_loss(&batch, &mut enc, Some(&teacher), 0.0).unwrap();
    assert_eq!(zero.l_pre.to_bits(), dis.to_bits());
    let half = pretrain_loss(&batch, &mut enc, Some(&teacher), 0.5).unwrap();
    assert!((half.l_pre - 0.5 * (ccl + dis)).abs() < 1e-12);
    assert!(pretrain_loss(&batch, &mut enc, None, 0.5).is_err());
    assert!(pretrain_loss(&batch, &mut enc, None, 1.5).is_err());
}

fn set_params(enc: &mut Encoders, xs: &[Tensor]) {
    for (p, x) in all_params(enc).into_iter().zip(xs) {
        *p = x.clone();
    }
}

#[test]
fn pretrain_loss_gradients() {
    for (seed, lambda) in [(2, 0.5), (3, 1.0), (4, 0.0)] {
        let (mut enc, teacher, batch) = tiny_setup(seed);
        let inputs: Vec<Tensor> = all_params(&mut enc).into_iter().map(|t| t.clone()).collect();
        let r = gradcheck(
            |xs: &[Tensor]| {
                let mut e = enc.clone();
                set_params(&mut e, xs);
                let out = pretrain_loss(&batch, &mut e, Some(&teacher), lambda)?;
                let grads = all_params(&mut e)
                    .into_iter()
                    .map(|t| t.grad.clone().unwrap())
                    .collect();
                Ok((out.l_pre, grads))
            },
            &inputs,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "lambda {lambda}: {r:?}");
    }
}

fn tiny_task(seed: u64) -> (LongTailDataset, ClassCorpus) {
    let world = SyntheticWorld::generate(WorldParams::new(4, 6), seed).unwrap();
    let counts = gen_pareto_counts(4, 40, 4, 6.0).unwrap();
    let ds = gen_synthetic(&world, &counts, 0.3, 5, seed).unwrap();
    let params = CorpusParams { sentences_per_class: 6, prompt_count: 4, ..Default::default() };
    let (corpus, _) = gen_corpus(&world, &params, seed).unwrap();
    (ds, corpus)
}

fn tiny_encoders(ds: &LongTailDataset, corpus: &ClassCorpus) -> Encoders {
    let vocab = corpus
        .classes
        .iter()
        .flatten()
        .flat_map(|s| s.tokens.iter())
        .max()
        .map_or(2, |&t| t as usize + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    Encoders::new(EncoderDims::new(ds.d_img, 8, vocab), 0.07, &mut rng).unwrap()
}

#[test]
fn zero_epochs_leave_encoders_unchanged() {
    let (ds, corpus) = tiny_task(1);
    let enc = tiny_encoders(&ds, &corpus);
    let cfg = PretrainConfig { epochs: 0, lambda: 1.0, ..Default::default() };
    let out = run_pretrain(&ds, &corpus, enc.clone(), None, &cfg).unwrap();
    assert_eq!(out.encoders, enc);
    assert!(out.trace.is_empty());
}

#[test]
fn pretraining_is_deterministic_and_learns() {
    let (ds, corpus) = tiny_task(2);
    let enc = tiny_encoders(&ds, &corpus);
    let teacher = TeacherPair::snapshot(&enc);
    let cfg = PretrainConfig { epochs: 8, batch_size: 16, lambda: 0.5, seed: 4, ..Default::default() };
    let a = run_pretrain(&ds, &corpus, enc.clone(), Some(&teacher), &cfg).unwrap();
    let b = run_pretrain(&ds, &corpus, enc.clone(), Some(&teacher), &cfg).unwrap();
    assert_eq!(a.encoders.to_checkpoint().encode(), b.encoders.to_checkpoint().encode());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace.len(), 8);
    for row in &a.trace {
        assert!((row.l_pre - 0.5 * row.l_ccl - 0.5 * row.l_dis.unwrap()).abs() < 1e-9);
        assert!((Temperature::MIN..=Temperature::MAX).contains(&row.tau));
    }
    assert!(a.trace.last().unwrap().l_ccl < a.trace[0].l_ccl);
    assert_eq!(teacher, TeacherPair::snapshot(&enc));
}

#[test]
fn lambda_one_never_needs_teacher() {
    let (ds, corpus) = tiny_task(3);
    let enc = tiny_encoders(&ds, &corpus);
    let cfg = PretrainConfig { epochs: 1, batch_size: 16, lambda: 1.0, ..Default::default() };
    let out = run_pretrain(&ds, &corpus, enc.clone(), None, &cfg).unwrap();
    assert!(out.trace.iter().all(|r| r.l_dis.is_none()));
    let cfg = PretrainConfig { lambda: 0.5, ..cfg };
    assert!(matches!(run_pretrain(&ds, &corpus, enc, None, &cfg), Err(Error::Missing(_))));
}

use crate::encoders::Temperature;
