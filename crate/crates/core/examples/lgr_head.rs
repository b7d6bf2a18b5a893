//! One forward pass of the language-guided head: per-class attention over
//! anchor embeddings, the gather, and the two probability branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlltr::lgr::{lgr_forward, predict, LgrParams};
use vlltr::numcore::Tensor;

fn main() -> vlltr::Result<()> {
    let (c, m, d) = (4, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = LgrParams::new(d, c, 0.07, &mut rng)?;
    let anchors = Tensor::randn(&[c, m, d], 1.0, &mut rng);
    // an image embedding close to class 2's second anchor
    let mut ei: Vec<f64> = anchors.data()[(2 * m + 1) * d..(2 * m + 2) * d].to_vec();
    for v in &mut ei {
        *v += 0.1;
    }
    let out = lgr_forward(&ei, &anchors, &params)?;
    for k in 0..c {
        let row = &out.attn[k * m..(k + 1) * m];
        let fmt: Vec<String> = row.iter().map(|a| format!("{a:.3}")).collect();
        println!("class {k}: attention [{}]  P^I {:.3}  P^T {:.3}", fmt.join(", "), out.p_i[k], out.p_t[k]);
    }
    println!("sum P^I = {:.6}, sum P^T = {:.6}", out.p_i.iter().sum::<f64>(), out.p_t.iter().sum::<f64>());
    println!("prediction: class {}", predict(&out));
    Ok(())
}
