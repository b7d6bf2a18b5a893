//! Inference from the anchor-embedding cache: after fine-tuning, the text
//! encoder is never needed again.

use vlltr::config::RunConfig;
use vlltr::encoders::{linguistic_load_count, Checkpoint, TeacherPair};
use vlltr::lgr::{predict_batch, read_cache, write_cache, AnchorEmbeddings, FinetunedModel};
use vlltr::pipeline::{generate_data, pick_anchors, train_head, train_student, train_teacher};

fn main() -> vlltr::Result<()> {
    let cfg = RunConfig { pretrain_epochs: 5, finetune_epochs: 5, ..RunConfig::default() };
    let data = generate_data(&cfg)?;
    let teacher = TeacherPair::snapshot(&train_teacher(&cfg, &data)?.encoders);
    let enc = train_student(&cfg, &data, Some(&teacher), cfg.lambda, cfg.seed)?.encoders;
    let hash = enc.to_checkpoint().hash();
    let anchors = pick_anchors(&cfg, &data, &enc, cfg.anchor_mode, hash)?;
    let cache = AnchorEmbeddings::compute(&anchors, &data.corpus, &enc.linguistic, hash)?;
    let model = train_head(&cfg, &data, &enc, &cache, cfg.head, cfg.seed)?.model;

    let dir = tempfile::tempdir()?;
    let (ck_path, cache_path) = (dir.path().join("model.vlck"), dir.path().join("anchors.vlae"));
    model.to_checkpoint().write(&ck_path)?;
    write_cache(&cache, &cache_path)?;
    println!("cache file: {} bytes", std::fs::metadata(&cache_path)?.len());

    let before = linguistic_load_count();
    let (ck, _) = Checkpoint::read(&ck_path)?;
    let loaded = FinetunedModel::from_checkpoint(&ck)?;
    let cached = read_cache(&cache_path)?;
    let probe = data.dataset.test.select_rows(&(0..100).collect::<Vec<_>>())?;
    let from_cache = predict_batch(&loaded, &cached, &probe)?;
    println!("linguistic loads during inference: {}", linguistic_load_count() - before);

    let live = AnchorEmbeddings::compute(&anchors, &data.corpus, &enc.linguistic, hash)?;
    let from_live = predict_batch(&model, &live, &probe)?;
    let same = from_cache.iter().zip(&from_live).filter(|(a, b)| a.label == b.label).count();
    println!("{same}/100 predictions identical to live text encoding");
    Ok(())
}
