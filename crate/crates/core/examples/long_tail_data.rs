//! Power-law class counts, shot bands and the square-root sampler.

use vlltr::config::RunConfig;
use vlltr::datasynth::{gen_pareto_counts, split_shots, SqrtSampler};
use vlltr::pipeline::generate_data;

fn main() -> vlltr::Result<()> {
    let cfg = RunConfig::default();
    let counts = gen_pareto_counts(cfg.classes, cfg.n_max, cfg.n_min, cfg.alpha)?;
    let bands = split_shots(&counts);
    println!("class  count  band");
    for (c, (n, b)) in counts.iter().zip(&bands.bands).enumerate() {
        println!("{c:>5}  {n:>5}  {b:?}");
    }

    let data = generate_data(&cfg)?;
    println!(
        "\n{} training images, {} balanced test images, d_img = {}",
        data.dataset.len(),
        data.dataset.test_labels.len(),
        data.dataset.d_img
    );

    let mut sampler = SqrtSampler::new(&counts, 1)?;
    let draws = 200_000;
    let mut hits = vec![0usize; counts.len()];
    for _ in 0..draws {
        hits[sampler.next_class()] += 1;
    }
    let target = sampler.weights();
    println!("\nsqrt sampling, first and last classes:");
    for c in [0, 1, counts.len() - 1] {
        println!(
            "  class {c:>2}: target {:.4}  empirical {:.4}",
            target.0[c],
            hits[c] as f64 / draws as f64
        );
    }
    Ok(())
}
