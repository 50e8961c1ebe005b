//! Saves a trained model with its exemplar memory and reads it back.

use otcil::checkpoint::Checkpoint;
use otcil::experiment::{Experiment, RunConfig};

fn main() -> otcil::Result<()> {
    let cfg = RunConfig::reference();
    let (report, state) = Experiment::new(cfg)?.run_to_end()?;
    let ckpt = Checkpoint {
        completed_tasks: state.completed_tasks,
        model: state.model,
        memory: Some(state.memory),
    };
    let text = ckpt.to_text()?;
    println!("{}", text.lines().take(6).collect::<Vec<_>>().join("\n"));
    println!("... {} lines total", text.lines().count());

    let back = Checkpoint::read(text.as_bytes())?;
    println!("bit-exact round trip: {}", back == ckpt);
    println!("final seen accuracy {:.1}%", 100.0 * report.seen_accuracy.last().unwrap());
    Ok(())
}
