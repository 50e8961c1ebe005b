//! All five methods on one shared stream, in parallel.

use otcil::cli::{ablation_table, run_ablation};
use otcil::experiment::RunConfig;

fn main() -> otcil::Result<()> {
    let start = std::time::Instant::now();
    let reports = run_ablation(&RunConfig::reference())?;
    print!("{}", ablation_table(&reports));
    println!("took {:.1?}", start.elapsed());
    Ok(())
}
