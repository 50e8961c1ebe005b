//! Trains with a 2-D embedding and writes the cosine head's decision regions
//! to a CSV grid.

use otcil::eval::export_boundary_grid;
use otcil::experiment::{Experiment, RunConfig};

fn main() -> otcil::Result<()> {
    let cfg = RunConfig { embed_dim: 2, ..RunConfig::reference() };
    let (_, state) = Experiment::new(cfg)?.run_to_end()?;
    let path = std::env::temp_dir().join("otcil-boundary.csv");
    let grid = export_boundary_grid(&state.model, (-1.5, 1.5), 60, &path)?;

    let mut share = vec![0usize; state.model.num_classes()];
    for p in &grid {
        share[p.class] += 1;
    }
    println!("wrote {} points to {}", grid.len(), path.display());
    println!("grid cells per class {share:?}");
    Ok(())
}
