//! The per-class sentence corpus: descriptive sentences, distractors and
//! prompt templates, with the summary statistics `gen-data` writes.

use vlltr::config::RunConfig;
use vlltr::datasynth::{corpus_stats, Source};
use vlltr::pipeline::generate_data;

fn main() -> vlltr::Result<()> {
    let cfg = RunConfig::default();
    let data = generate_data(&cfg)?;
    let corpus = &data.corpus;
    let vocab = &data.world.vocab;

    let stats = corpus_stats(corpus);
    println!("{}", serde_json::to_string_pretty(&stats)?);

    let class = 3;
    let show = |tokens: &[u32]| -> String {
        tokens
            .iter()
            .map(|&t| match (vocab.class_of(t), vocab.attribute_of(t)) {
                (Some(c), _) => format!("<class{c}>"),
                (_, Some(a)) => format!("<attr{a}>"),
                _ => t.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("\nclass {class}, first descriptive sentences:");
    for s in corpus.sentences(class).iter().filter(|s| s.source == Source::Encyclopedia).take(4) {
        let tag = if data.truth.is_distractor(s.id) { " (distractor)" } else { "" };
        println!("  #{:<5} {}{tag}", s.id, show(&s.tokens));
    }
    println!("class {class}, a prompt:");
    if let Some(s) = corpus.sentences(class).iter().find(|s| s.source == Source::Prompt) {
        println!("  #{:<5} {}", s.id, show(&s.tokens));
    }
    println!("\n{} distractor sentences in total", data.truth.distractors.len());
    Ok(())
}
