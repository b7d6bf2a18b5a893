//! Anchor sentence selection: AnSS scoring against class probe images
//! versus taking the first M sentences.

use vlltr::anss::SelectionMode;
use vlltr::config::RunConfig;
use vlltr::datasynth::Source;
use vlltr::encoders::TeacherPair;
use vlltr::pipeline::{generate_data, pick_anchors, train_student, train_teacher};

fn main() -> vlltr::Result<()> {
    let cfg = RunConfig::default();
    let data = generate_data(&cfg)?;
    let teacher = TeacherPair::snapshot(&train_teacher(&cfg, &data)?.encoders);
    let enc = train_student(&cfg, &data, Some(&teacher), cfg.lambda, cfg.seed)?.encoders;
    let hash = enc.to_checkpoint().hash();

    println!("mode    distractors  prompts  descriptive");
    for mode in [SelectionMode::Anss, SelectionMode::Cutoff] {
        let set = pick_anchors(&cfg, &data, &enc, mode, hash)?;
        let (mut noise, mut prompts, mut desc) = (0, 0, 0);
        for c in 0..set.num_classes() {
            for id in set.distinct(c) {
                let s = data.corpus.sentence(id).expect("selected from the corpus");
                if data.truth.is_distractor(id) {
                    noise += 1;
                } else if s.source == Source::Prompt {
                    prompts += 1;
                } else {
                    desc += 1;
                }
            }
        }
        println!("{:<7} {noise:>11}  {prompts:>7}  {desc:>11}", mode.to_string());
    }
    Ok(())
}
