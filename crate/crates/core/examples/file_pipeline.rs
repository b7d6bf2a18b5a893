//! Every stage through the artifact directory, as the command-line tool
//! runs it, followed by a look at the manifest.

use vlltr::config::RunConfig;
use vlltr::pipeline::commands::Stage;
use vlltr::pipeline::manifest::Manifest;

fn main() -> vlltr::Result<()> {
    let dir = tempfile::tempdir()?;
    let stage = Stage::new(RunConfig::default(), dir.path());
    let report = stage.run_all()?;
    println!("overall {:.4}  many {:?}  medium {:?}  few {:?}", report.overall, report.many, report.medium, report.few);
    let manifest = Manifest::load(dir.path())?;
    for (name, entry) in &manifest.artifacts {
        println!("{name:<20} {:<15} {}", entry.stage, &entry.sha256[..16]);
    }
    Ok(())
}
