//! One full run of the transport-regularized method on the reference stream,
//! stepping task by task.

use otcil::experiment::{Experiment, RunConfig};
use otcil::trainer::Method;

fn main() -> otcil::Result<()> {
    let cfg = RunConfig::reference().with_method(Method::Coil);
    let mut exp = Experiment::new(cfg)?;
    while !exp.is_done() {
        let eval = exp.step()?;
        let per_task: Vec<String> = eval.per_task_accuracy.iter().map(|a| format!("{:.0}%", 100.0 * a)).collect();
        println!("stage {}: seen {:.1}% per task {per_task:?}", eval.stage, 100.0 * eval.seen_accuracy);
    }
    let report = exp.report();
    for p in &report.init_probes {
        println!(
            "stage {} init on new classes: pt {:.0}% ncm {:.0}% random {:.0}%",
            p.stage,
            100.0 * p.pt_accuracy,
            100.0 * p.ncm_accuracy,
            100.0 * p.random_accuracy
        );
    }
    println!("{}", report.summary_table());
    Ok(())
}
