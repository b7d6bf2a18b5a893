//! Stage one: the teacher on balanced data, then the student on the long
//! tail with and without distillation.

use vlltr::config::RunConfig;
use vlltr::cvlp::{class_separation, PairedBatch};
use vlltr::datasynth::SqrtSampler;
use vlltr::encoders::TeacherPair;
use vlltr::pipeline::{generate_data, train_student, train_teacher};

fn main() -> vlltr::Result<()> {
    let cfg = RunConfig { pretrain_epochs: 10, ..RunConfig::default() };
    let data = generate_data(&cfg)?;
    let teacher = train_teacher(&cfg, &data)?;
    let teacher = TeacherPair::snapshot(&teacher.encoders);

    let mut sampler = SqrtSampler::new(&data.dataset.counts, 99)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(99);
    let probe = PairedBatch::draw(&data.dataset, &data.corpus, &mut sampler, &mut rng, 256)?;
    println!("teacher class separation {:.3}", class_separation(teacher.encoders(), &probe)?);

    for lambda in [0.5, 1.0] {
        let out = train_student(&cfg, &data, Some(&teacher), lambda, cfg.seed)?;
        println!("\nlambda = {lambda}");
        println!("epoch  L_ccl   L_dis   L_pre   tau");
        for r in out.trace.iter().step_by(3) {
            let dis = r.l_dis.map_or_else(|| "   -  ".into(), |v| format!("{v:.4}"));
            println!("{:>5}  {:.4}  {dis}  {:.4}  {:.4}", r.epoch, r.l_ccl, r.l_pre, r.tau);
        }
        println!("class separation {:.3}", class_separation(&out.encoders, &probe)?);
    }
    Ok(())
}
