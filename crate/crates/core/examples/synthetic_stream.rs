//! Generates the synthetic benchmark and splits it into a class-incremental
//! stream.

use otcil::datasets::{build_stream, generate_synthetic, StreamConfig, SyntheticSpec};

fn main() -> otcil::Result<()> {
    let spec = SyntheticSpec::pinned();
    let data = generate_synthetic(&spec)?;
    println!("{} instances, {} features", data.instances.len(), data.dim);

    let stream = build_stream(&data, &StreamConfig::new(spec.num_tasks, spec.seed))?;
    println!("class order {:?}", stream.class_order);
    for t in &stream.tasks {
        println!(
            "task {}: local classes {:?} train {} test {}",
            t.index,
            t.local_classes(),
            t.train.len(),
            t.test.len()
        );
    }
    Ok(())
}
