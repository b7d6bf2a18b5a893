//! The reverse-mode tape and the finite-difference checker, first on a
//! hand-built expression, then on the registered suite.

use vlltr::numcore::{gradcheck, GradCheckConfig, Graph, Tensor};
use vlltr::pipeline::gradsuite::{run_suite, SuiteConfig};

fn main() -> vlltr::Result<()> {
    // loss = sum(w * log_softmax(tanh(x A)))
    let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4])?;
    let a = Tensor::new(&[3, 2], vec![0.5, -0.3, 0.2, 0.9, -1.1, 0.4])?;
    let w = std::sync::Arc::new(vec![1.0, -0.5, 0.25, 2.0]);
    let report = gradcheck(
        |xs: &[Tensor]| {
            let mut g = Graph::new();
            let xv = g.param(&xs[0]);
            let av = g.param(&xs[1]);
            let h = g.matmul(xv, av)?;
            let h = g.tanh(h);
            let h = g.log_softmax_last(h);
            let loss = g.weighted_sum(h, w.clone())?;
            let grads = g.backward(loss)?;
            Ok((g.scalar(loss), vec![grads.get_or_zeros(xv, 6), grads.get_or_zeros(av, 6)]))
        },
        &[x, a],
        &GradCheckConfig::default(),
    )?;
    println!(
        "hand-built expression: max relative error {:.2e} over {} coordinates",
        report.max_rel_error, report.coords_checked
    );

    let suite = run_suite(&SuiteConfig { instances: 5, ..SuiteConfig::default() })?;
    print!("\n{}", suite.render());

    let broken = run_suite(&SuiteConfig {
        instances: 2,
        corrupt: Some("L_dis".into()),
        ..SuiteConfig::default()
    })?;
    println!("\nwith a corrupted L_dis gradient, failing cases: {:?}", broken.failures());
    Ok(())
}
