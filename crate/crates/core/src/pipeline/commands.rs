//! File-backed stages. Each reads its inputs from the output directory,
//! checks them against the manifest and the hashes recorded by the stage
//! that consumed them, writes its artifacts and records them.

use std::fs;
use std::path::PathBuf;

use serde::Serialize;

use crate::anss::{read_anchors, write_anchors};
use crate::config::RunConfig;
use crate::cvlp::write_trace;
use crate::datasynth::{corpus_stats, read_corpus, read_dataset, write_corpus, write_dataset, ClassCorpus, LongTailDataset};
use crate::encoders::{Checkpoint, Encoders, TeacherPair};
use crate::error::{Error, Result};
use crate::evalkit::{concept_retrieval, EvalReport};
use crate::hashing::{from_hex, to_hex, Hash32};
use crate::lgr::{encode_finetune_trace, encode_predictions, read_cache, write_cache, AnchorEmbeddings, FinetunedModel};

use super::gradsuite::{run_suite, SuiteConfig, SuiteReport};
use super::manifest::Manifest;
use super::{evaluate_model, pick_anchors, run_ablation, student_init, train_head, train_teacher, world, AblationResult, GeneratedData, ABLATION_GRID};

pub const DATASET: &str = "dataset.vllt";
pub const CORPUS: &str = "corpus.tsv";
pub const STATS: &str = "stats.json";
pub const TEACHER: &str = "teacher.vlck";
pub const TEACHER_TRACE: &str = "teacher_trace.tsv";
pub const STUDENT: &str = "student.vlck";
pub const PRETRAIN_TRACE: &str = "pretrain_trace.tsv";
pub const ANCHORS: &str = "anchors.tsv";
pub const ANCHOR_CACHE: &str = "anchors.vlae";
pub const FINETUNED: &str = "finetuned.vlck";
pub const FINETUNE_TRACE: &str = "finetune_trace.tsv";
pub const REPORT: &str = "report.json";
pub const PREDICTIONS: &str = "predictions.tsv";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const ABLATION_JSON: &str = "ablation.json";

/// A config and the directory its artifacts live in.
#[derive(Debug, Clone)]
pub struct Stage {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

fn mismatch(artifact: &str, expected: &str, found: &str) -> Error {
    Error::HashMismatch {
        artifact: artifact.to_string(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

fn meta_hash(ck: &Checkpoint, key: &str, what: &str) -> Result<String> {
    ck.meta(key)
        .map(str::to_string)
        .ok_or_else(|| Error::format("checkpoint", format!("{what} has no `{key}` entry")))
}

fn hex_hash(s: &str) -> Result<Hash32> {
    from_hex(s).ok_or_else(|| Error::format("checkpoint", format!("bad hash `{s}`")))
}

/// What `gen-data` reports back.
#[derive(Debug, Clone)]
pub struct DataSummary {
    pub dataset_sha: String,
    pub corpus_sha: String,
    pub train: usize,
    pub test: usize,
    pub sentences: usize,
}

/// Loaded inputs plus their verified hashes.
struct Inputs {
    data: GeneratedData,
    dataset_sha: String,
    corpus_sha: String,
    manifest: Manifest,
}

impl Stage {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Self {
        Stage { cfg, out: out.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self) -> Result<Manifest> {
        let m = Manifest::load(&self.out)?;
        m.check_data(&self.cfg.data_fingerprint())?;
        Ok(m)
    }

    fn record(&self, m: &mut Manifest, name: &str, stage: &str, inputs: &[(&str, &str)]) -> Result<String> {
        m.record(&self.out, name, stage, &self.cfg.fingerprint(), inputs)
    }

    fn load_dataset(&self, m: &Manifest) -> Result<(LongTailDataset, String)> {
        let sha = m.verify(&self.out, DATASET)?;
        Ok((read_dataset(&self.path(DATASET))?, sha))
    }

    fn load_corpus(&self, m: &Manifest) -> Result<(ClassCorpus, String)> {
        let sha = m.verify(&self.out, CORPUS)?;
        Ok((read_corpus(&self.path(CORPUS), self.cfg.max_tokens)?, sha))
    }

    fn inputs(&self) -> Result<Inputs> {
        let manifest = self.manifest()?;
        let (mut dataset, dataset_sha) = self.load_dataset(&manifest)?;
        dataset.alpha = Some(self.cfg.alpha);
        let (corpus, corpus_sha) = self.load_corpus(&manifest)?;
        let data = GeneratedData {
            world: world(&self.cfg)?,
            dataset,
            corpus,
            // only needed when generating
            truth: Default::default(),
        };
        Ok(Inputs {
            data,
            dataset_sha,
            corpus_sha,
            manifest,
        })
    }

    /// Writes the long-tailed dataset with its balanced test split, the
    /// corpus, corpus statistics and a fresh manifest.
    pub fn gen_data(&self) -> Result<DataSummary> {
        let data = super::generate_data(&self.cfg)?;
        fs::create_dir_all(&self.out)?;
        write_dataset(&data.dataset, &self.path(DATASET))?;
        write_corpus(&data.corpus, &self.path(CORPUS))?;
        let stats = corpus_stats(&data.corpus);
        fs::write(self.path(STATS), serde_json::to_string_pretty(&stats)? + "\n")?;
        let mut m = Manifest {
            data_fingerprint: self.cfg.data_fingerprint(),
            ..Manifest::default()
        };
        let dataset_sha = self.record(&mut m, DATASET, "gen-data", &[])?;
        let corpus_sha = self.record(&mut m, CORPUS, "gen-data", &[])?;
        self.record(&mut m, STATS, "gen-data", &[(CORPUS, &corpus_sha)])?;
        m.save(&self.out)?;
        Ok(DataSummary {
            dataset_sha,
            corpus_sha,
            train: data.dataset.len(),
            test: data.dataset.test_labels.len(),
            sentences: data.corpus.num_sentences(),
        })
    }

    /// Contrastive-only training on the balanced variant of the world.
    pub fn make_teacher(&self) -> Result<String> {
        let mut inp = self.inputs()?;
        let out = train_teacher(&self.cfg, &inp.data)?;
        let mut ck = out.encoders.to_checkpoint();
        ck.set_meta("role", "teacher");
        ck.set_meta("fingerprint", self.cfg.fingerprint());
        ck.set_meta("corpus", inp.corpus_sha.clone());
        ck.write(&self.path(TEACHER))?;
        write_trace(&out.trace, &self.path(TEACHER_TRACE))?;
        let sha = self.record(&mut inp.manifest, TEACHER, "make-teacher", &[(CORPUS, &inp.corpus_sha)])?;
        self.record(&mut inp.manifest, TEACHER_TRACE, "make-teacher", &[])?;
        inp.manifest.save(&self.out)?;
        Ok(sha)
    }

    fn load_teacher(&self, m: &Manifest) -> Result<(TeacherPair, String)> {
        let sha = m.verify(&self.out, TEACHER)?;
        let (t, _) = TeacherPair::load(&self.path(TEACHER))?;
        Ok((t, sha))
    }

    /// Stage-one training of the student with the configured `lambda`.
    pub fn pretrain(&self) -> Result<String> {
        let mut inp = self.inputs()?;
        let cfg = &self.cfg;
        let need_teacher = cfg.lambda < 1.0 || cfg.init_from_teacher;
        let teacher = if need_teacher { Some(self.load_teacher(&inp.manifest)?) } else { None };
        let init = student_init(cfg, &inp.data.world, teacher.as_ref().map(|t| &t.0), cfg.seed)?;
        let distil_from = if cfg.lambda < 1.0 { teacher.as_ref().map(|t| &t.0) } else { None };
        let out = crate::cvlp::run_pretrain(
            &inp.data.dataset,
            &inp.data.corpus,
            init,
            distil_from,
            &cfg.pretrain_config(cfg.lambda, cfg.seed),
        )?;
        let teacher_sha = teacher.as_ref().map_or("-", |t| t.1.as_str());
        let mut ck = out.encoders.to_checkpoint();
        ck.set_meta("role", "student");
        ck.set_meta("fingerprint", cfg.fingerprint());
        ck.set_meta("dataset", inp.dataset_sha.clone());
        ck.set_meta("corpus", inp.corpus_sha.clone());
        ck.set_meta("teacher", teacher_sha);
        ck.set_meta("lambda", cfg.lambda.to_string());
        ck.write(&self.path(STUDENT))?;
        write_trace(&out.trace, &self.path(PRETRAIN_TRACE))?;
        let ins = [(DATASET, inp.dataset_sha.as_str()), (CORPUS, &inp.corpus_sha), (TEACHER, teacher_sha)];
        let sha = self.record(&mut inp.manifest, STUDENT, "pretrain", &ins)?;
        self.record(&mut inp.manifest, PRETRAIN_TRACE, "pretrain", &[])?;
        inp.manifest.save(&self.out)?;
        Ok(sha)
    }

    fn load_student(&self, m: &Manifest) -> Result<(Encoders, Hash32)> {
        m.verify(&self.out, STUDENT)?;
        let (ck, hash) = Checkpoint::read(&self.path(STUDENT))?;
        Ok((Encoders::from_checkpoint(&ck)?, hash))
    }

    /// Scores the corpus with the student and writes the anchor file; its
    /// header carries the student's hash.
    pub fn select_anchors(&self) -> Result<String> {
        let mut inp = self.inputs()?;
        let (enc, hash) = self.load_student(&inp.manifest)?;
        let set = pick_anchors(&self.cfg, &inp.data, &enc, self.cfg.anchor_mode, hash)?;
        write_anchors(&set, &self.path(ANCHORS))?;
        let student = to_hex(&hash);
        let sha = self.record(
            &mut inp.manifest,
            ANCHORS,
            "select-anchors",
            &[(STUDENT, &student), (CORPUS, &inp.corpus_sha)],
        )?;
        inp.manifest.save(&self.out)?;
        Ok(sha)
    }

    /// Embeds the anchors once, then trains the head over the student's
    /// visual encoder.
    pub fn finetune(&self) -> Result<String> {
        let mut inp = self.inputs()?;
        let (enc, hash) = self.load_student(&inp.manifest)?;
        let anchors_sha = inp.manifest.verify(&self.out, ANCHORS)?;
        let set = read_anchors(&self.path(ANCHORS))?;
        if set.checkpoint != hash {
            return Err(mismatch(ANCHORS, &to_hex(&hash), &to_hex(&set.checkpoint)));
        }
        let cache = AnchorEmbeddings::compute(&set, &inp.data.corpus, &enc.linguistic, hash)?;
        write_cache(&cache, &self.path(ANCHOR_CACHE))?;
        let cache_sha = self.record(&mut inp.manifest, ANCHOR_CACHE, "finetune", &[(ANCHORS, &anchors_sha)])?;
        let out = train_head(&self.cfg, &inp.data, &enc, &cache, self.cfg.head, self.cfg.seed)?;
        let mut ck = out.model.to_checkpoint();
        ck.set_meta("fingerprint", self.cfg.fingerprint());
        ck.set_meta("student", to_hex(&hash));
        ck.set_meta("anchor_cache", cache_sha.clone());
        ck.set_meta("dataset", inp.dataset_sha.clone());
        ck.write(&self.path(FINETUNED))?;
        fs::write(self.path(FINETUNE_TRACE), encode_finetune_trace(&out.trace))?;
        let student = to_hex(&hash);
        let ins = [(STUDENT, student.as_str()), (ANCHOR_CACHE, &cache_sha), (DATASET, &inp.dataset_sha)];
        let sha = self.record(&mut inp.manifest, FINETUNED, "finetune", &ins)?;
        self.record(&mut inp.manifest, FINETUNE_TRACE, "finetune", &[])?;
        inp.manifest.save(&self.out)?;
        Ok(sha)
    }

    /// Scores the balanced test split from the fine-tuned checkpoint and the
    /// anchor cache; no text-side parameters are read.
    pub fn eval(&self) -> Result<EvalReport> {
        let mut m = self.manifest()?;
        let (dataset, dataset_sha) = self.load_dataset(&m)?;
        let ft_sha = m.verify(&self.out, FINETUNED)?;
        let (ck, _) = Checkpoint::read(&self.path(FINETUNED))?;
        let cache_sha = m.verify(&self.out, ANCHOR_CACHE)?;
        let want = meta_hash(&ck, "anchor_cache", FINETUNED)?;
        if want != cache_sha {
            return Err(mismatch(ANCHOR_CACHE, &want, &cache_sha));
        }
        let want = meta_hash(&ck, "dataset", FINETUNED)?;
        if want != dataset_sha {
            return Err(mismatch(DATASET, &want, &dataset_sha));
        }
        let cache = read_cache(&self.path(ANCHOR_CACHE))?;
        let student = hex_hash(&meta_hash(&ck, "student", FINETUNED)?)?;
        if cache.checkpoint != student {
            return Err(mismatch(ANCHOR_CACHE, &to_hex(&student), &to_hex(&cache.checkpoint)));
        }
        let model = FinetunedModel::from_checkpoint(&ck)?;
        let (preds, mut report) = evaluate_model(&model, &cache, &dataset)?;
        report.fingerprint = self.cfg.fingerprint();
        report.write(&self.path(REPORT))?;
        fs::write(self.path(PREDICTIONS), encode_predictions(&preds, &dataset.test_labels))?;
        let ins = [(FINETUNED, ft_sha.as_str()), (ANCHOR_CACHE, &cache_sha), (DATASET, &dataset_sha)];
        self.record(&mut m, REPORT, "eval", &ins)?;
        self.record(&mut m, PREDICTIONS, "eval", &ins)?;
        m.save(&self.out)?;
        Ok(report)
    }

    /// All pipeline stages after `gen-data`, in order.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.gen_data()?;
        self.make_teacher()?;
        self.pretrain()?;
        self.select_anchors()?;
        self.finetune()?;
        self.eval()
    }

    /// Test images closest to a sentence under the student encoders:
    /// `(sample id, true label)`, best first.
    pub fn retrieve(&self, query: &Query, k: usize) -> Result<Vec<(usize, usize)>> {
        let m = self.manifest()?;
        let (dataset, _) = self.load_dataset(&m)?;
        let (enc, _) = self.load_student(&m)?;
        let tokens = match query {
            Query::Tokens(t) => t.clone(),
            Query::Sentence(id) => {
                let (corpus, _) = self.load_corpus(&m)?;
                corpus
                    .sentence(*id)
                    .ok_or_else(|| Error::InvalidArgument(format!("no sentence with id {id}")))?
                    .tokens
                    .clone()
            }
        };
        let ids = concept_retrieval(&tokens, &dataset.test, &enc, k)?;
        Ok(ids.into_iter().map(|i| (i, dataset.test_labels[i])).collect())
    }

    /// The ablation grid, written as a table and as JSON.
    pub fn ablate(&self, progress: impl FnMut(&str)) -> Result<AblationResult> {
        let result = run_ablation(&self.cfg, progress)?;
        fs::create_dir_all(&self.out)?;
        fs::write(self.path(ABLATION_TABLE), &result.table)?;
        fs::write(self.path(ABLATION_JSON), ablation_json(&self.cfg, &result)? + "\n")?;
        Ok(result)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Tokens(Vec<u32>),
    Sentence(usize),
}

#[derive(Serialize)]
struct AblationDoc<'a> {
    fingerprint: String,
    seeds: Vec<u64>,
    rows: Vec<AblationRowDoc<'a>>,
}

#[derive(Serialize)]
struct AblationRowDoc<'a> {
    config: &'a str,
    mean: &'a EvalReport,
    per_seed: Vec<&'a EvalReport>,
}

fn ablation_json(cfg: &RunConfig, r: &AblationResult) -> Result<String> {
    let doc = AblationDoc {
        fingerprint: cfg.fingerprint(),
        seeds: r.runs.iter().map(|run| run.seed).collect(),
        rows: ABLATION_GRID
            .iter()
            .enumerate()
            .map(|(i, spec)| AblationRowDoc {
                config: spec.label,
                mean: &r.mean[i],
                per_seed: r.runs.iter().map(|run| &run.reports[i]).collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Runs the gradient suite.
pub fn gradcheck(instances: usize, corrupt: Option<String>) -> Result<SuiteReport> {
    run_suite(&SuiteConfig {
        instances,
        corrupt,
        ..SuiteConfig::default()
    })
}

