//! Stage orchestration. The functions here work in memory; [`commands`]
//! persists their results as hashed artifacts.

pub mod commands;
pub mod gradsuite;
pub mod manifest;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anss::{select_anchors, AnchorSet, SelectionMode};
use crate::config::RunConfig;
use crate::cvlp::{run_pretrain, PretrainOutcome};
use crate::datasynth::{
    gen_corpus, gen_pareto_counts, gen_synthetic, split_shots, ClassCorpus, CorpusTruth,
    LongTailDataset, SyntheticWorld, WorldParams,
};
use crate::encoders::{EncoderDims, Encoders, TeacherPair, Temperature};
use crate::error::{Error, Result};
use crate::evalkit::{ablation_report, evaluate, EvalReport};
use crate::hashing::Hash32;
use crate::lgr::{predict_batch, run_finetune, AnchorEmbeddings, FinetuneOutcome, FinetunedModel, HeadKind, Prediction};

// Stream tags xor-ed into the master seed.
const WORLD: u64 = 0x77_6f72_6c64;
const DATA: u64 = 0x6461_7461;
const CORPUS: u64 = 0x636f_7270;
const TEACHER_DATA: u64 = 0x7464_6174;
const TEACHER_INIT: u64 = 0x7469_6e69;
const STUDENT_INIT: u64 = 0x7369_6e69;

/// Everything `gen-data` produces.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub world: SyntheticWorld,
    pub dataset: LongTailDataset,
    pub corpus: ClassCorpus,
    pub truth: CorpusTruth,
}

pub fn world(cfg: &RunConfig) -> Result<SyntheticWorld> {
    let params = WorldParams {
        identity_weight: cfg.identity_weight,
        ..WorldParams::new(cfg.classes, cfg.d_img)
    };
    SyntheticWorld::generate(params, cfg.seed ^ WORLD)
}

pub fn generate_data(cfg: &RunConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let world = world(cfg)?;
    let counts = gen_pareto_counts(cfg.classes, cfg.n_max, cfg.n_min, cfg.alpha)?;
    let mut dataset = gen_synthetic(&world, &counts, cfg.noise_sigma, cfg.test_per_class, cfg.seed ^ DATA)?;
    dataset.alpha = Some(cfg.alpha);
    let (corpus, truth) = gen_corpus(&world, &cfg.corpus_params(), cfg.seed ^ CORPUS)?;
    Ok(GeneratedData {
        world,
        dataset,
        corpus,
        truth,
    })
}

/// The class-balanced variant the teacher is trained on: same world, every
/// class at `n_max`.
pub fn balanced_dataset(cfg: &RunConfig, world: &SyntheticWorld) -> Result<LongTailDataset> {
    let counts = vec![cfg.n_max; cfg.classes];
    gen_synthetic(world, &counts, cfg.noise_sigma, cfg.test_per_class, cfg.seed ^ TEACHER_DATA)
}

pub fn encoder_dims(cfg: &RunConfig, world: &SyntheticWorld) -> EncoderDims {
    let mut dims = EncoderDims::new(cfg.d_img, cfg.embed_dim, world.vocab.size());
    dims.max_tokens = cfg.max_tokens;
    dims
}

/// Contrastive-only pre-training on the balanced variant.
pub fn train_teacher(cfg: &RunConfig, data: &GeneratedData) -> Result<PretrainOutcome> {
    let balanced = balanced_dataset(cfg, &data.world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TEACHER_INIT);
    let init = Encoders::new(encoder_dims(cfg, &data.world), cfg.tau_init, &mut rng)?;
    let mut pc = cfg.pretrain_config(1.0, cfg.seed ^ TEACHER_DATA);
    pc.epochs = cfg.teacher_epochs;
    run_pretrain(&balanced, &data.corpus, init, None, &pc)
}

/// Student starting point: a copy of the teacher with `tau` reset, or a
/// fresh draw from `seed`.
pub fn student_init(cfg: &RunConfig, world: &SyntheticWorld, teacher: Option<&TeacherPair>, seed: u64) -> Result<Encoders> {
    if cfg.init_from_teacher {
        let t = teacher.ok_or_else(|| Error::Missing("teacher checkpoint needed to initialize the student".into()))?;
        let mut enc = t.encoders().clone();
        enc.tau = Temperature::new(cfg.tau_init)?;
        return Ok(enc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ STUDENT_INIT);
    Encoders::new(encoder_dims(cfg, world), cfg.tau_init, &mut rng)
}

pub fn train_student(
    cfg: &RunConfig,
    data: &GeneratedData,
    teacher: Option<&TeacherPair>,
    lambda: f64,
    seed: u64,
) -> Result<PretrainOutcome> {
    let init = student_init(cfg, &data.world, teacher, seed)?;
    let teacher = if lambda < 1.0 { teacher } else { None };
    run_pretrain(&data.dataset, &data.corpus, init, teacher, &cfg.pretrain_config(lambda, seed))
}

pub fn pick_anchors(
    cfg: &RunConfig,
    data: &GeneratedData,
    encoders: &Encoders,
    mode: SelectionMode,
    checkpoint: Hash32,
) -> Result<AnchorSet> {
    select_anchors(&data.corpus, &data.dataset, encoders, &cfg.anchor_params(mode), checkpoint)
}

/// Fine-tunes a fresh head over the pre-trained visual encoder; the head's
/// temperature starts at the pre-trained value.
pub fn train_head(
    cfg: &RunConfig,
    data: &GeneratedData,
    encoders: &Encoders,
    cache: &AnchorEmbeddings,
    head: HeadKind,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let model = FinetunedModel::init(encoders.visual.clone(), head, cfg.classes, encoders.tau.get(), seed)?;
    run_finetune(&data.dataset, cache, model, &cfg.finetune_config(head, seed), cache.checkpoint)
}

/// Predicts the balanced test split and scores it.
pub fn evaluate_model(
    model: &FinetunedModel,
    cache: &AnchorEmbeddings,
    dataset: &LongTailDataset,
) -> Result<(Vec<Prediction>, EvalReport)> {
    let preds = predict_batch(model, cache, &dataset.test)?;
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let report = evaluate(&labels, &dataset.test_labels, &split_shots(&dataset.counts))?;
    Ok((preds, report))
}

/// Rows of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationSpec {
    pub label: &'static str,
    pub head: HeadKind,
    pub mode: SelectionMode,
    /// Whether distillation is on (`lambda` from the config) or off (`lambda = 1`).
    pub distill: bool,
}

pub const ABLATION_GRID: [AblationSpec; 5] = [
    AblationSpec { label: "LGR + AnSS + L_dis", head: HeadKind::Lgr, mode: SelectionMode::Anss, distill: true },
    AblationSpec { label: "LGR + AnSS, lambda=1", head: HeadKind::Lgr, mode: SelectionMode::Anss, distill: false },
    AblationSpec { label: "FC + L_dis", head: HeadKind::Fc, mode: SelectionMode::Anss, distill: true },
    AblationSpec { label: "KNN + AnSS + L_dis", head: HeadKind::Knn, mode: SelectionMode::Anss, distill: true },
    AblationSpec { label: "LGR + CutOff + L_dis", head: HeadKind::Lgr, mode: SelectionMode::Cutoff, distill: true },
];

/// One seed's reports, in grid order.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub seed: u64,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub runs: Vec<AblationRun>,
    /// Reports averaged over seeds, grid order.
    pub mean: Vec<EvalReport>,
    pub table: String,
}

impl AblationResult {
    pub fn mean_of(&self, label: &str) -> Option<&EvalReport> {
        ABLATION_GRID.iter().position(|s| s.label == label).map(|i| &self.mean[i])
    }
}

fn mean_reports(reports: &[&EvalReport]) -> EvalReport {
    let k = reports.len() as f64;
    let avg = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
        (v.len() == reports.len()).then(|| v.iter().sum::<f64>() / k)
    };
    let classes = reports[0].per_class.len();
    EvalReport {
        overall: reports.iter().map(|r| r.overall).sum::<f64>() / k,
        many: avg(&|r| r.many),
        medium: avg(&|r| r.medium),
        few: avg(&|r| r.few),
        per_class: (0..classes).map(|c| avg(&|r| r.per_class[c])).collect(),
        tallies: reports[0].tallies.clone(),
        fingerprint: reports[0].fingerprint.clone(),
    }
}

/// Runs every grid row for each training seed with identical budgets. The
/// data and the teacher are shared; seeds vary initialization and sampling.
pub fn run_ablation(cfg: &RunConfig, mut progress: impl FnMut(&str)) -> Result<AblationResult> {
    if cfg.ablation_seeds == 0 {
        return Err(Error::Config("ablation_seeds must be positive".into()));
    }
    let data = generate_data(cfg)?;
    let teacher = train_teacher(cfg, &data)?;
    let teacher = TeacherPair::snapshot(&teacher.encoders);
    progress("teacher trained");
    let fingerprint = cfg.fingerprint();
    let mut runs = Vec::new();
    for s in 0..cfg.ablation_seeds as u64 {
        let seed = cfg.seed.wrapping_add(s);
        let mut students: Vec<(bool, Encoders, Hash32)> = Vec::new();
        let mut reports = Vec::new();
        for spec in ABLATION_GRID {
            if !students.iter().any(|st| st.0 == spec.distill) {
                let lambda = if spec.distill { cfg.lambda } else { 1.0 };
                let enc = train_student(cfg, &data, Some(&teacher), lambda, seed)?.encoders;
                let hash = enc.to_checkpoint().hash();
                students.push((spec.distill, enc, hash));
            }
            let (_, enc, hash) = students.iter().find(|st| st.0 == spec.distill).expect("trained above");
            let anchors = pick_anchors(cfg, &data, enc, spec.mode, *hash)?;
            let cache = AnchorEmbeddings::compute(&anchors, &data.corpus, &enc.linguistic, *hash)?;
            let out = train_head(cfg, &data, enc, &cache, spec.head, seed)?;
            let (_, mut report) = evaluate_model(&out.model, &cache, &data.dataset)?;
            report.fingerprint.clone_from(&fingerprint);
            progress(&format!("seed {seed}: {} overall {:.4}", spec.label, report.overall));
            reports.push(report);
        }
        runs.push(AblationRun { seed, reports });
    }
    let mean: Vec<EvalReport> = (0..ABLATION_GRID.len())
        .map(|i| mean_reports(&runs.iter().map(|r| &r.reports[i]).collect::<Vec<_>>()))
        .collect();
    let rows: Vec<(String, EvalReport)> = ABLATION_GRID
        .iter()
        .zip(&mean)
        .map(|(s, r)| (s.label.to_string(), r.clone()))
        .collect();
    let table = ablation_report(&rows)?;
    Ok(AblationResult { runs, mean, table })
}
