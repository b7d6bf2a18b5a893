//! Retrieves the test images closest to a sentence under the pre-trained
//! encoders, then checks how many share the sentence's class.

use vlltr::config::RunConfig;
use vlltr::encoders::TeacherPair;
use vlltr::evalkit::concept_retrieval;
use vlltr::pipeline::{generate_data, train_student, train_teacher};

fn main() -> vlltr::Result<()> {
    let cfg = RunConfig { pretrain_epochs: 10, ..RunConfig::default() };
    let data = generate_data(&cfg)?;
    let teacher = TeacherPair::snapshot(&train_teacher(&cfg, &data)?.encoders);
    let enc = train_student(&cfg, &data, Some(&teacher), cfg.lambda, cfg.seed)?.encoders;
    let k = 10;
    for class in [0, 9, 19] {
        let s = data
            .corpus
            .sentences(class)
            .iter()
            .find(|s| !data.truth.is_distractor(s.id))
            .expect("class has a clean sentence");
        let top = concept_retrieval(&s.tokens, &data.dataset.test, &enc, k)?;
        let hits = top.iter().filter(|&&i| data.dataset.test_labels[i] == class).count();
        println!("sentence #{} (class {class}, {} training images): {hits}/{k} retrieved images match", s.id, data.dataset.counts[class]);
    }
    Ok(())
}
