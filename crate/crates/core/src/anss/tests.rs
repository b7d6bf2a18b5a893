use super::*;
use crate::cvlp::{run_pretrain, PretrainConfig};
use crate::datasynth::{
    gen_corpus, gen_pareto_counts, gen_synthetic, CorpusParams, CorpusTruth, Sentence, Source,
    SyntheticWorld, WorldParams,
};
use crate::encoders::EncoderDims;
use proptest::prelude::*;
use rand::Rng;

struct Fixture {
    ds: LongTailDataset,
    corpus: ClassCorpus,
    truth: CorpusTruth,
    enc: Encoders,
}

fn fixture(seed: u64, epochs: usize) -> Fixture {
    let world = SyntheticWorld::generate(WorldParams::new(5, 8), seed).unwrap();
    let counts = gen_pareto_counts(5, 80, 3, 6.0).unwrap();
    let ds = gen_synthetic(&world, &counts, 0.3, 4, seed).unwrap();
    let params = CorpusParams { sentences_per_class: 10, prompt_count: 3, noise_fraction: 0.3, ..Default::default() };
    let (corpus, truth) = gen_corpus(&world, &params, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = Encoders::new(EncoderDims::new(8, 8, world.vocab.size()), 0.07, &mut rng).unwrap();
    let cfg = PretrainConfig { lambda: 1.0, epochs, batch_size: 32, base_lr: 1e-2, seed, ..Default::default() };
    let enc = run_pretrain(&ds, &corpus, enc, None, &cfg).unwrap().encoders;
    Fixture { ds, corpus, truth, enc }
}

#[test]
fn probe_sizes_and_determinism() {
    let world = SyntheticWorld::generate(WorldParams::new(3, 4), 1).unwrap();
    let ds = gen_synthetic(&world, &[1280, 5, 1], 0.1, 1, 1).unwrap();
    let big = build_probe(&ds, 0, PROBE_CAP, 7).unwrap();
    assert_eq!(big.rows.len(), 50);
    let mut uniq = big.rows.clone();
    uniq.sort_unstable();
    uniq.dedup();
    assert_eq!(uniq.len(), 50);
    assert!(big.rows.iter().all(|&r| ds.train_labels[r] == 0));
    assert_eq!(build_probe(&ds, 0, PROBE_CAP, 7).unwrap(), big);
    assert_ne!(build_probe(&ds, 0, PROBE_CAP, 8).unwrap().rows, big.rows);
    let small = build_probe(&ds, 1, PROBE_CAP, 7).unwrap();
    let mut rows = small.rows.clone();
    rows.sort_unstable();
    assert_eq!(rows, ds.class_indices(1).collect::<Vec<_>>());
    assert!(build_probe(&ds, 3, PROBE_CAP, 7).is_err());
}

#[test]
fn single_probe_image_scores_zero() {
    let f = fixture(1, 0);
    let probe = build_probe(&f.ds, 2, 1, 0).unwrap();
    let pool = ProbePool::new(&[probe], &f.enc).unwrap();
    for s in f.corpus.sentences(2) {
        assert_eq!(score_sentence(&s.tokens, 2, &pool, &f.enc, 0.07).unwrap(), 0.0);
    }
}

#[test]
fn matching_embedding_scores_near_zero() {
    let d = 4;
    let pool = ProbePool {
        units: vec![
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        ],
        labels: vec![0, 1, 2],
        dim: d,
    };
    let s = pool.score_embedding(&[2.0, 0.0, 0.0, 0.0], 0, 0.07).unwrap();
    assert!(s < 1e-5, "{s}");
    let other = pool.score_embedding(&[2.0, 0.0, 0.0, 0.0], 1, 0.07).unwrap();
    assert!(other > 10.0);
}

/// Exhaustive oracle: every sentence scored alone, then a full sort.
fn exhaustive(f: &Fixture, m: usize, seed: u64) -> Vec<Vec<usize>> {
    let probes: Vec<ProbeBatch> = (0..f.ds.classes)
        .map(|c| build_probe(&f.ds, c, PROBE_CAP, seed).unwrap())
        .collect();
    let pool = ProbePool::new(&probes, &f.enc).unwrap();
    (0..f.ds.classes)
        .map(|c| {
            let mut scored: Vec<(f64, usize)> = f
                .corpus
                .sentences(c)
                .iter()
                .map(|s| (score_sentence(&s.tokens, c, &pool, &f.enc, f.enc.tau.get()).unwrap(), s.id))
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut ids: Vec<usize> = scored.into_iter().take(m).map(|x| x.1).collect();
            ids.sort_unstable();
            ids
        })
        .collect()
}

#[test]
fn anss_equals_exhaustive_scoring() {
    for seed in [2, 3] {
        let f = fixture(seed, 6);
        for m in [1, 4, 9] {
            let params = AnchorParams { m, seed, ..Default::default() };
            let set = select_anchors(&f.corpus, &f.ds, &f.enc, &params, [0; 32]).unwrap();
            let oracle = exhaustive(&f, m, seed);
            for c in 0..f.ds.classes {
                assert_eq!(set.distinct(c), oracle[c], "class {c}, M {m}");
                assert_eq!(set.classes[c].len(), m);
            }
        }
    }
}

#[test]
fn selected_scores_are_minimal_and_sorted() {
    let f = fixture(4, 6);
    let scores = score_corpus(&f.corpus, &f.ds, &f.enc, PROBE_CAP, 0).unwrap();
    let set = select_from_scores(&f.corpus, &scores, 5, SelectionMode::Anss, [0; 32]).unwrap();
    for c in 0..f.ds.classes {
        let chosen = &set.classes[c];
        assert!(chosen.windows(2).all(|w| w[0].score <= w[1].score));
        let worst = chosen.iter().map(|e| e.score).fold(f64::MIN, f64::max);
        let ids: Vec<usize> = chosen.iter().map(|e| e.sentence_id).collect();
        for (s, &score) in f.corpus.sentences(c).iter().zip(&scores[c]) {
            if !ids.contains(&s.id) {
                assert!(score >= worst);
            }
        }
    }
}

#[test]
fn distractors_score_worse_than_clean_sentences() {
    let f = fixture(5, 25);
    let scores = score_corpus(&f.corpus, &f.ds, &f.enc, PROBE_CAP, 0).unwrap();
    let (mut bad, mut nb, mut good, mut ng) = (0.0, 0, 0.0, 0);
    for c in 0..f.ds.classes {
        for (s, &v) in f.corpus.sentences(c).iter().zip(&scores[c]) {
            if s.source != Source::Encyclopedia {
                continue;
            }
            if f.truth.is_distractor(s.id) {
                bad += v;
                nb += 1;
            } else {
                good += v;
                ng += 1;
            }
        }
    }
    assert!(nb > 0 && ng > 0);
    assert!(bad / nb as f64 > good / ng as f64);
}

fn small_corpus(sizes: &[usize]) -> ClassCorpus {
    let mut id = 0;
    let classes = sizes
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| {
                    id += 1;
                    Sentence { id: id - 1, tokens: vec![0, 1], source: Source::Prompt }
                })
                .collect()
        })
        .collect();
    ClassCorpus::new(classes, 77).unwrap()
}

#[test]
fn exact_m_selects_everything_in_both_modes() {
    let corpus = small_corpus(&[4, 4]);
    let scores = vec![vec![0.4, 0.1, 0.3, 0.2], vec![1.0, 2.0, 0.5, 0.5]];
    let a = select_from_scores(&corpus, &scores, 4, SelectionMode::Anss, [0; 32]).unwrap();
    let b = select_from_scores(&corpus, &scores, 4, SelectionMode::Cutoff, [0; 32]).unwrap();
    for c in 0..2 {
        assert_eq!(a.distinct(c), b.distinct(c));
    }
    let ids: Vec<usize> = a.classes[1].iter().map(|e| e.sentence_id).collect();
    assert_eq!(ids, vec![6, 7, 4, 5]);
}

#[test]
fn short_classes_are_padded_cyclically() {
    let corpus = small_corpus(&[3, 6]);
    let scores = vec![vec![0.3, 0.1, 0.2], vec![0.0; 6]];
    let set = select_from_scores(&corpus, &scores, 5, SelectionMode::Anss, [0; 32]).unwrap();
    let ids: Vec<usize> = set.classes[0].iter().map(|e| e.sentence_id).collect();
    assert_eq!(ids, vec![1, 2, 0, 1, 2]);
    let cut = select_from_scores(&corpus, &scores, 5, SelectionMode::Cutoff, [0; 32]).unwrap();
    let ids: Vec<usize> = cut.classes[0].iter().map(|e| e.sentence_id).collect();
    assert_eq!(ids, vec![0, 1, 2, 0, 1]);
    let ids: Vec<usize> = cut.classes[1].iter().map(|e| e.sentence_id).collect();
    assert_eq!(ids, vec![3, 4, 5, 6, 7]);
    assert!(select_from_scores(&corpus, &scores, 0, SelectionMode::Anss, [0; 32]).is_err());
}

#[test]
fn order_invariance_holds_for_anss_only() {
    let f = fixture(6, 6);
    let mut shuffled = f.corpus.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for ss in &mut shuffled.classes {
        ss.reverse();
        ss.shuffle(&mut rng);
    }
    let p = AnchorParams { m: 4, ..Default::default() };
    let a = select_anchors(&f.corpus, &f.ds, &f.enc, &p, [0; 32]).unwrap();
    let b = select_anchors(&shuffled, &f.ds, &f.enc, &p, [0; 32]).unwrap();
    assert_eq!(a, b);
    let p = AnchorParams { mode: SelectionMode::Cutoff, ..p };
    let a = select_anchors(&f.corpus, &f.ds, &f.enc, &p, [0; 32]).unwrap();
    let b = select_anchors(&shuffled, &f.ds, &f.enc, &p, [0; 32]).unwrap();
    assert_ne!(a, b);
}

#[test]
fn selection_is_pure_and_leaves_encoders_untouched() {
    let f = fixture(7, 3);
    let before = f.enc.to_checkpoint().hash();
    let p = AnchorParams { m: 6, ..Default::default() };
    let a = select_anchors(&f.corpus, &f.ds, &f.enc, &p, before).unwrap();
    let b = select_anchors(&f.corpus, &f.ds, &f.enc, &p, before).unwrap();
    assert_eq!(encode_anchors(&a), encode_anchors(&b));
    assert_eq!(f.enc.to_checkpoint().hash(), before);
    assert_eq!(a.tokens(&f.corpus).unwrap().len(), 5 * 6);
}

#[test]
fn anchor_file_round_trip() {
    let f = fixture(8, 1);
    let p = AnchorParams { m: 7, mode: SelectionMode::Cutoff, ..Default::default() };
    let set = select_anchors(&f.corpus, &f.ds, &f.enc, &p, [7; 32]).unwrap();
    let text = encode_anchors(&set);
    assert!(text.starts_with("# mode=cutoff\n# m=7\n# checkpoint=0707"));
    assert_eq!(decode_anchors(&text).unwrap(), set);
    let truncated: String = text.lines().take(9).map(|l| format!("{l}\n")).collect();
    assert!(decode_anchors(&truncated).is_err());
}

proptest! {
    #[test]
    fn selection_always_yields_m_entries(sizes in prop::collection::vec(1usize..10, 1..5), m in 1usize..12, seed in 0u64..100) {
        let corpus = small_corpus(&sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let set = select_from_scores(&corpus, &scores, m, SelectionMode::Anss, [0; 32]).unwrap();
        for (c, &n) in sizes.iter().enumerate() {
            prop_assert_eq!(set.classes[c].len(), m);
            prop_assert_eq!(set.distinct(c).len(), n.min(m));
        }
    }
}
