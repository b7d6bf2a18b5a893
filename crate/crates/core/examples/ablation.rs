//! The ablation grid (head type, anchor selection, distillation) on one
//! training seed. `vlltr ablate` runs the same grid over several seeds.

use vlltr::config::RunConfig;
use vlltr::pipeline::run_ablation;

fn main() -> vlltr::Result<()> {
    let cfg = RunConfig { ablation_seeds: 1, ..RunConfig::default() };
    let result = run_ablation(&cfg, |msg| eprintln!("{msg}"))?;
    print!("{}", result.table);
    Ok(())
}
