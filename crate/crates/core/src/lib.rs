//! Class-incremental learning with classifier co-transport.
//!
//! New classes arrive in disjoint tasks. Before training on a task, the old
//! classifier is transported onto the new classes through an entropic
//! optimal-transport plan between class centers (prospective transport);
//! while training, the evolving new classifier is transported back onto the
//! old classes and distilled toward the frozen previous model (retrospective
//! transport). Rehearsal on a herding-selected exemplar memory and knowledge
//! distillation complete the objective.
//!
//! Modules, bottom up:
//!
//! - [`ot`]: class centers, cost matrices, log-domain Sinkhorn, classifier
//!   transport.
//! - [`diffnet`]: dense embedding network, cosine head, analytic gradients,
//!   SGD.
//! - [`losses`]: CE, KD, PT, RT and the combined objective with its schedules.
//! - [`memory`]: herding exemplar selection and budgets.
//! - [`datasets`]: synthetic and CSV datasets, task streams.
//! - [`trainer`]: per-task training for every method.
//! - [`eval`]: stage evaluation, run reports, boundary export.
//! - [`experiment`]: end-to-end runs from a [`RunConfig`].
//! - [`checkpoint`]: bit-exact model and memory persistence.
//! - [`cli`]: the `otcil` command line.

pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod diffnet;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod memory;
pub mod ot;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use experiment::{run_experiment, RunConfig};
