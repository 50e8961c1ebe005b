//! Command-line front end: `run`, `ablate`, `boundary` and `transport-demo`.
//!
//! Configuration comes from an optional `key = value` file overlaid by
//! flags. Invalid configuration exits with status 2 before anything is
//! written; failures during a run exit with status 1.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{export_boundary_grid, RunReport};
use crate::experiment::{Experiment, RunConfig};
use crate::trainer::Method;

#[derive(Debug, Parser)]
#[command(name = "otcil", version, about = "Class-incremental learning with classifier transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate one method on a task stream.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "otcil-out")]
        out: PathBuf,
    },
    /// Run every method on the same stream and compare them.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "otcil-ablation")]
        out: PathBuf,
    },
    /// Export the cosine head's decision regions over a 2-D embedding grid.
    Boundary {
        #[command(flatten)]
        config: ConfigArgs,
        /// Use a saved model instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grid extent as `lo,hi` in each coordinate.
        #[arg(long, default_value = "-1.5,1.5", allow_hyphen_values = true)]
        bounds: String,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        #[arg(long, default_value = "boundary.csv")]
        out: PathBuf,
    },
    /// Print the prospective transport plan and mixing weights at a stage.
    TransportDemo {
        #[command(flatten)]
        config: ConfigArgs,
        /// Stage whose new classes are the transport goal (at least 2).
        #[arg(long, default_value_t = 2)]
        stage: usize,
    },
}

/// Flags mirroring the configuration keys. Values are validated by
/// [`RunConfig::apply`] so file and flag parsing share one path.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// `key = value` file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    /// `synthetic` or `csv:<path>`.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    base_classes: Option<String>,
    /// `total:K` or `per-class:m`.
    #[arg(long)]
    memory: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Comma-separated epochs at which the learning rate decays.
    #[arg(long)]
    lr_decay_epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    ot_epsilon: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    pt_epochs: Option<String>,
    #[arg(long)]
    logit_scale: Option<String>,
    /// Comma-separated hidden layer widths.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    embed_dim: Option<String>,
    /// Extra `key=value` settings, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
            cfg.apply_config_text(&text)?;
        }
        let flags = [
            ("method", &self.method),
            ("dataset", &self.dataset),
            ("tasks", &self.tasks),
            ("base-classes", &self.base_classes),
            ("memory", &self.memory),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("lr-decay-epochs", &self.lr_decay_epochs),
            ("batch-size", &self.batch_size),
            ("seed", &self.seed),
            ("ot-epsilon", &self.ot_epsilon),
            ("tau", &self.tau),
            ("pt-epochs", &self.pt_epochs),
            ("logit-scale", &self.logit_scale),
            ("hidden", &self.hidden),
            ("embed-dim", &self.embed_dim),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.apply(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("OTCIL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("OTCIL_THREADS must be a positive integer, got `{raw}`")))?;
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            if code == 2 {
                eprintln!("invalid configuration: {e}");
            } else {
                eprintln!("error: {e}");
            }
            code
        }
    }
}

pub fn main() -> i32 {
    main_with_args(std::env::args_os())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run { config, out } => run(config.resolve()?, &out),
        Command::Ablate { config, out } => ablate(config.resolve()?, &out),
        Command::Boundary {
            config,
            checkpoint,
            bounds,
            resolution,
            out,
        } => {
            let cfg = config.resolve()?;
            boundary(cfg, checkpoint.as_deref(), &parse_bounds(&bounds)?, resolution, &out)
        }
        Command::TransportDemo { config, stage } => transport_demo(config.resolve()?, stage),
    }
}

fn parse_bounds(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("bounds must be `lo,hi` with lo < hi, got `{s}`"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err(bad())
    }
}

/// Writes the report's artifacts into `dir`.
pub fn write_run_artifacts(report: &RunReport, checkpoint: Option<&Checkpoint>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    report.write_curves_csv(fs::File::create(dir.join("accuracy.csv"))?)?;
    report.write_epochs_csv(fs::File::create(dir.join("epochs.csv"))?)?;
    if let Some(ck) = checkpoint {
        ck.save(&dir.join("checkpoint.txt"))?;
    }
    Ok(())
}

fn train(cfg: RunConfig) -> Result<(RunReport, Checkpoint)> {
    let (report, state) = Experiment::new(cfg)?.run_to_end()?;
    let checkpoint = Checkpoint {
        completed_tasks: state.completed_tasks,
        model: state.model,
        memory: Some(state.memory),
    };
    Ok((report, checkpoint))
}

fn run(cfg: RunConfig, out: &Path) -> Result<()> {
    let (report, checkpoint) = train(cfg)?;
    write_run_artifacts(&report, Some(&checkpoint), out)?;
    print!("{}", report.summary_table());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("artifacts written to {}", out.display());
    Ok(())
}

/// One row per method of the comparison table.
pub fn ablation_table(reports: &[RunReport]) -> String {
    let mut out = format!("{:<10} {:>8} {:>8} {:>8}\n", "method", "avg_inc", "final", "task1");
    for r in reports {
        out.push_str(&format!(
            "{:<10} {:>7.2}% {:>7.2}% {:>7.2}%\n",
            r.method,
            100.0 * r.average_incremental_accuracy,
            100.0 * r.seen_accuracy.last().copied().unwrap_or(0.0),
            100.0 * r.accuracy_matrix.last().and_then(|row| row.first()).copied().unwrap_or(0.0),
        ));
    }
    out
}

/// Runs every method on `cfg`'s stream in parallel; reports follow
/// [`Method::ALL`].
pub fn run_ablation(cfg: &RunConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let stream = cfg.stream()?;
    Method::ALL
        .par_iter()
        .map(|&m| {
            let exp = Experiment::with_stream(cfg.with_method(m), stream.clone())?;
            Ok(exp.run_to_end()?.0)
        })
        .collect()
}

fn ablate(cfg: RunConfig, out: &Path) -> Result<()> {
    let reports = run_ablation(&cfg)?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("method,average_incremental_accuracy,final_seen_accuracy,final_task1_accuracy\n");
    for r in &reports {
        write_run_artifacts(r, None, &out.join(&r.method))?;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.method,
            r.average_incremental_accuracy,
            r.seen_accuracy.last().copied().unwrap_or(0.0),
            r.accuracy_matrix.last().and_then(|row| row.first()).copied().unwrap_or(0.0),
        ));
    }
    fs::write(out.join("ablation.csv"), csv)?;
    print!("{}", ablation_table(&reports));
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn boundary(cfg: RunConfig, checkpoint: Option<&Path>, bounds: &(f64, f64), resolution: usize, out: &Path) -> Result<()> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let model = match checkpoint {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!("checkpoint `{}` not found", path.display())));
            }
            Checkpoint::load(path)?.model
        }
        None => {
            if cfg.embed_dim != 2 {
                return Err(Error::Config(format!(
                    "boundary export needs --embed-dim 2, got {}",
                    cfg.embed_dim
                )));
            }
            train(cfg)?.1.model
        }
    };
    if model.embed_dim() != 2 {
        return Err(Error::Config(format!(
            "boundary export needs a 2-D embedding, model has {}",
            model.embed_dim()
        )));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let points = export_boundary_grid(&model, *bounds, resolution, out)?;
    println!("{} grid points over {} classes written to {}", points.len(), model.num_classes(), out.display());
    Ok(())
}

fn format_matrix(title: &str, m: &ndarray::Array2<f64>, rows: &str, cols: &str) -> String {
    let mut s = format!("{title} ({rows} x {cols})\n      ");
    for j in 0..m.ncols() {
        s.push_str(&format!(" {cols}{j:<7}"));
    }
    s.push('\n');
    for (i, row) in m.rows().into_iter().enumerate() {
        s.push_str(&format!("{rows}{i:<5}"));
        for v in row {
            s.push_str(&format!(" {v:8.5}"));
        }
        s.push('\n');
    }
    s
}

fn transport_demo(cfg: RunConfig, stage: usize) -> Result<()> {
    if !cfg.method.uses_memory() {
        return Err(Error::Config(format!(
            "transport needs exemplars, method `{}` keeps none",
            cfg.method
        )));
    }
    let mut exp = Experiment::new(cfg)?;
    if stage < 2 || stage > exp.stream.tasks.len() {
        return Err(Error::Config(format!(
            "stage must be in 2..={}, got {stage}",
            exp.stream.tasks.len()
        )));
    }
    while exp.state.completed_tasks + 1 < stage {
        exp.step()?;
    }
    let task = &exp.stream.tasks[stage - 1];
    let t = exp.trainer.pt_initialize(&exp.state, task)?;
    println!(
        "stage {stage}: {} old classes -> {} new classes (local ids {}..{})",
        t.plan.plan.nrows(),
        t.plan.plan.ncols(),
        task.class_offset,
        task.class_offset + task.num_classes()
    );
    println!(
        "sinkhorn: converged={} iterations={} max_violation={:.3e} cost={:.6}",
        t.plan.converged,
        t.plan.iterations_used,
        t.plan.max_violation,
        t.plan.transport_cost(&t.cost)
    );
    print!("{}", format_matrix("transport plan", &t.plan.plan, "o", "g"));
    print!("{}", format_matrix("mixing weights", &t.mixing, "o", "g"));
    Ok(())
}
