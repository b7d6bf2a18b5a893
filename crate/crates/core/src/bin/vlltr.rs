use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use vlltr::config::RunConfig;
use vlltr::evalkit::ablation_report;
use vlltr::pipeline::commands::{self, Query, Stage};
use vlltr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vlltr",
    version,
    about = "Two-stage visual-linguistic long-tailed recognition on synthetic data",
    after_help = RunConfig::help()
)]
struct Cli {
    /// Config file of `key = value` lines
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory
    #[arg(long, global = true, value_name = "DIR", default_value = "vlltr-out")]
    out: PathBuf,
    /// Per-key override, repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the long-tailed dataset, its balanced test split and the corpus
    GenData,
    /// Train the frozen teacher pair on the class-balanced variant
    MakeTeacher,
    /// Stage one: class-wise contrastive pre-training with distillation
    Pretrain,
    /// Score the corpus and keep M anchor sentences per class
    SelectAnchors,
    /// Stage two: embed the anchors once and train the recognition head
    Finetune,
    /// Evaluate on the balanced test split and dump predictions
    Eval,
    /// Finite-difference check of the losses, the head and every tape op
    Gradcheck {
        /// Random instances per case
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Scale one case's analytic gradient (negative control)
        #[arg(long, value_name = "CASE")]
        corrupt: Option<String>,
    },
    /// Rank test images by cosine to a sentence
    Retrieve {
        /// Corpus sentence id
        #[arg(long, conflicts_with = "tokens")]
        sentence: Option<usize>,
        /// Space-separated token ids
        #[arg(long)]
        tokens: Option<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Run the ablation grid over several training seeds
    Ablate,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

fn run(cli: Cli) -> Result<i32> {
    if let Cmd::Gradcheck { instances, corrupt } = &cli.cmd {
        let report = commands::gradcheck(*instances, corrupt.clone())?;
        print!("{}", report.render());
        if report.passed() {
            println!("all {} cases passed", report.cases.len());
            return Ok(0);
        }
        println!("failed: {}", report.failures().join(", "));
        return Ok(3);
    }
    let stage = Stage::new(load_config(&cli)?, cli.out.clone());
    match &cli.cmd {
        Cmd::GenData => {
            let s = stage.gen_data()?;
            println!(
                "{} train / {} test images, {} sentences -> {}",
                s.train,
                s.test,
                s.sentences,
                stage.out.display()
            );
        }
        Cmd::MakeTeacher => println!("teacher {}", stage.make_teacher()?),
        Cmd::Pretrain => println!("student {}", stage.pretrain()?),
        Cmd::SelectAnchors => println!("anchors {}", stage.select_anchors()?),
        Cmd::Finetune => println!("finetuned {}", stage.finetune()?),
        Cmd::Eval => {
            let r = stage.eval()?;
            println!(
                "overall {}  many {}  medium {}  few {}",
                pct(Some(r.overall)),
                pct(r.many),
                pct(r.medium),
                pct(r.few)
            );
        }
        Cmd::Retrieve { sentence, tokens, k } => {
            let query = match (sentence, tokens) {
                (Some(id), _) => Query::Sentence(*id),
                (None, Some(t)) => Query::Tokens(
                    t.split_whitespace()
                        .map(|x| x.parse().map_err(|_| Error::InvalidArgument(format!("bad token `{x}`"))))
                        .collect::<Result<_>>()?,
                ),
                (None, None) => return Err(Error::Config("retrieve needs --sentence or --tokens".into())),
            };
            println!("rank\tsample\tlabel");
            for (rank, (id, label)) in stage.retrieve(&query, *k)?.into_iter().enumerate() {
                println!("{rank}\t{id}\t{label}");
            }
        }
        Cmd::Ablate => {
            let r = stage.ablate(|msg| eprintln!("{msg}"))?;
            print!("{}", r.table);
            for run in &r.runs {
                let rows: Vec<(String, _)> = vlltr::pipeline::ABLATION_GRID
                    .iter()
                    .zip(&run.reports)
                    .map(|(s, rep)| (s.label.to_string(), rep.clone()))
                    .collect();
                eprintln!("seed {}\n{}", run.seed, ablation_report(&rows)?);
            }
        }
        Cmd::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("VLLTR_THREADS").ok().and_then(|v| v.parse().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
