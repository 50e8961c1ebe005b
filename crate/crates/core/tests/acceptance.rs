//! Acceptance criteria. Every test writes one `PASS`/`FAIL` line straight to
//! stderr, so the verdicts show up in the log even when libtest captures
//! output.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use otcil::diffnet::{cosine_logits, random_columns, EmbeddingConfig, Model};
use otcil::eval::RunReport;
use otcil::experiment::{Experiment, RunConfig};
use otcil::losses::{gamma_schedule, lambda_class_ratio};
use otcil::memory::ExemplarStore;
use otcil::ot::{sinkhorn, uniform_marginal, CostMatrix, CostNormalization, OtConfig};
use otcil::trainer::{Method, StageState};
use otcil::{cli, rng};
use rand::Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[acceptance {id:>2}] {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

struct Ablation {
    reports: Vec<RunReport>,
    elapsed: Duration,
}

impl Ablation {
    fn get(&self, m: Method) -> &RunReport {
        self.reports.iter().find(|r| r.method == m.name()).expect("method present")
    }
    fn avg(&self, m: Method) -> f64 {
        self.get(m).average_incremental_accuracy
    }
    fn final_task1(&self, m: Method) -> f64 {
        self.get(m).accuracy_matrix.last().expect("stages")[0]
    }
}

/// All five methods on the reference synthetic stream, run once per process.
fn ablation() -> &'static Ablation {
    static CELL: OnceLock<Ablation> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let reports = cli::run_ablation(&RunConfig::reference()).expect("reference ablation");
        Ablation {
            reports,
            elapsed: start.elapsed(),
        }
    })
}

fn random_cost(g: &mut impl Rng, rows: usize, cols: usize) -> CostMatrix {
    CostMatrix::new(Array2::from_shape_fn((rows, cols), |_| g.random_range(0.0..10.0))).unwrap()
}

#[test]
fn criterion_01_sinkhorn_feasibility() {
    let cfg = OtConfig::default();
    let mut g = rng::derive(1, &[1]);
    let (mut worst, mut slowest, mut unconverged) = (0.0f64, Duration::ZERO, 0);
    for _ in 0..100 {
        let c = random_cost(&mut g, 10, 10);
        let start = Instant::now();
        let plan = sinkhorn(&c, &uniform_marginal(10), &uniform_marginal(10), &cfg).unwrap();
        slowest = slowest.max(start.elapsed());
        if plan.converged {
            worst = worst.max(plan.max_violation);
        } else {
            unconverged += 1;
        }
    }
    verdict(
        1,
        "sinkhorn feasibility",
        worst <= 1e-6 && slowest < Duration::from_millis(50) && unconverged == 0,
        &format!("max violation {worst:.2e}, slowest solve {slowest:?}, unconverged {unconverged}/100"),
    );
}

fn permutation_optimum(c: &Array2<f64>) -> f64 {
    fn go(c: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let n = c.nrows();
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(c, row + 1, used, acc + c[[row, j]], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.nrows()], 0.0, &mut best);
    best / c.nrows() as f64
}

#[test]
fn criterion_02_sinkhorn_optimality() {
    let cfg = OtConfig {
        epsilon: 0.01,
        max_iterations: 100_000,
        cost_normalization: CostNormalization::DivideByMean,
        ..OtConfig::default()
    };
    let mut g = rng::derive(2, &[2]);
    let mut worst = 0.0f64;
    for n in 2..=4 {
        for _ in 0..50 {
            let c = random_cost(&mut g, n, n);
            let plan = sinkhorn(&c, &uniform_marginal(n), &uniform_marginal(n), &cfg).unwrap();
            let exact = permutation_optimum(&c.values);
            let rel = (plan.transport_cost(&c) - exact).abs() / exact;
            worst = worst.max(rel);
        }
    }
    verdict(
        2,
        "sinkhorn optimality vs permutation enumeration",
        worst <= 0.02,
        &format!("worst relative gap {:.3}% over 150 instances", 100.0 * worst),
    );
}

#[test]
fn criterion_03_gradient_checks() {
    let mut worst: (f64, &str, u64) = (0.0, "", 0);
    for (name, spec) in common::specs() {
        for seed in 0..common::TRIALS {
            let err = common::relative_error(&common::case(seed), &spec);
            if err > worst.0 {
                worst = (err, name, seed);
            }
        }
    }
    verdict(
        3,
        "gradient checks",
        worst.0 < common::TOL,
        &format!(
            "worst relative error {:.2e} ({} seed {}), {} trials per term",
            worst.0, worst.1, worst.2, common::TRIALS
        ),
    );
}

#[test]
fn criterion_04_schedule_exactness() {
    let lambda = lambda_class_ratio(50, 60);
    let mid = gamma_schedule(80, 160, 2.0).unwrap();
    let start = gamma_schedule(0, 160, 2.0).unwrap();
    let end = gamma_schedule(160, 160, 2.0).unwrap();
    verdict(
        4,
        "schedule exactness",
        lambda == 5.0 / 6.0 && mid == 0.25 && start == 0.0 && end == 1.0,
        &format!("lambda {lambda}, gamma(80) {mid}, gamma(0) {start}, gamma(T) {end}"),
    );
}

#[test]
fn criterion_05_cosine_invariance() {
    let mut g = rng::derive(5, &[5]);
    let mut model = Model::new(EmbeddingConfig::new(6, vec![12], 4), 8.0, &mut g).unwrap();
    model.add_classes(random_columns(&mut g, 4, 5).view()).unwrap();
    let probe = Array2::from_shape_fn((1000, 6), |_| g.random_range(-2.0..2.0));
    let base = model.predict(probe.view()).unwrap();
    let mut changed = 0;
    for col in 0..model.num_classes() {
        for c in [1e-3, 1.0, 1e3] {
            let mut scaled = model.clone();
            scaled.head.column_mut(col).mapv_inplace(|v| v * c);
            changed += scaled
                .predict(probe.view())
                .unwrap()
                .iter()
                .zip(&base)
                .filter(|(a, b)| a != b)
                .count();
        }
    }
    verdict(
        5,
        "cosine invariance",
        changed == 0,
        &format!("{changed} label changes over 5 columns x 3 scales x 1000 points"),
    );
}

#[test]
fn criterion_06_convex_hull_transport() {
    let cfg = RunConfig {
        method: Method::Coil,
        epochs: 4,
        ..RunConfig::reference()
    };
    let stream = cfg.stream().unwrap();
    let trainer = cfg.trainer().unwrap();
    let mut state = StageState::new(cfg.initial_model(stream.input_dim()).unwrap(), ExemplarStore::new(cfg.memory));
    let (mut min_w, mut max_sum_err, mut columns) = (f64::INFINITY, 0.0f64, 0);
    let mut check = |mixing: &Array2<f64>| {
        for col in mixing.columns() {
            min_w = min_w.min(col.iter().copied().fold(f64::INFINITY, f64::min));
            max_sum_err = max_sum_err.max((col.sum() - 1.0).abs());
            columns += 1;
        }
    };
    for task in &stream.tasks {
        if task.index >= 2 {
            check(&trainer.pt_initialize(&state, task).unwrap().mixing);
        }
        trainer.run_task(&mut state, task).unwrap();
        if task.index >= 2 {
            check(&trainer.rt_transport(&state, task).unwrap().mixing);
        }
        trainer.update_memory(&mut state, task).unwrap();
    }
    verdict(
        6,
        "convex-hull transport",
        min_w >= -1e-9 && max_sum_err <= 1e-9,
        &format!("{columns} PT/RT columns, min weight {min_w:.3e}, max |sum - 1| {max_sum_err:.2e}"),
    );
}

#[test]
fn criterion_07_forgetting_resistance() {
    let a = ablation();
    let fin = a.final_task1(Method::Finetune);
    let coil = a.final_task1(Method::Coil);
    let gap = a.avg(Method::Coil) - a.avg(Method::Finetune);
    let pass = fin < 0.2
        && coil >= 0.6
        && gap >= 0.2
        && a.avg(Method::Coil) >= a.avg(Method::ReplayKd)
        && a.elapsed < Duration::from_secs(120);
    verdict(
        7,
        "forgetting resistance",
        pass,
        &format!(
            "final task-1 acc finetune {:.1}% coil {:.1}%; avg inc acc coil {:.2}% finetune {:.2}% replay_kd {:.2}%; ablation took {:.1?}",
            100.0 * fin,
            100.0 * coil,
            100.0 * a.avg(Method::Coil),
            100.0 * a.avg(Method::Finetune),
            100.0 * a.avg(Method::ReplayKd),
            a.elapsed
        ),
    );
}

#[test]
fn criterion_08_ablation_ordering() {
    let a = ablation();
    let [fin, rep, pt, rt, coil] = [Method::Finetune, Method::ReplayKd, Method::PtOnly, Method::RtOnly, Method::Coil].map(|m| a.avg(m));
    let pass = coil >= pt.max(rt) && pt.max(rt) >= rep && rep >= fin && coil - rep >= 0.01;
    verdict(
        8,
        "ablation ordering",
        pass,
        &format!(
            "avg inc acc coil {:.2}%, pt_only {:.2}%, rt_only {:.2}%, replay_kd {:.2}%, finetune {:.2}%",
            100.0 * coil,
            100.0 * pt,
            100.0 * rt,
            100.0 * rep,
            100.0 * fin
        ),
    );
}

#[test]
fn criterion_09_pt_initialization() {
    let probes = &ablation().get(Method::Coil).init_probes;
    let ok = |p: &otcil::trainer::InitProbe| {
        p.pt_accuracy >= p.ncm_accuracy && p.ncm_accuracy >= p.random_accuracy && (p.random_accuracy - p.chance).abs() <= 0.05
    };
    let detail: Vec<String> = probes
        .iter()
        .map(|p| {
            format!(
                "stage {} pt {:.1}% ncm {:.1}% random {:.1}% (chance {:.1}%){}",
                p.stage,
                100.0 * p.pt_accuracy,
                100.0 * p.ncm_accuracy,
                100.0 * p.random_accuracy,
                100.0 * p.chance,
                if ok(p) { "" } else { " <-" }
            )
        })
        .collect();
    verdict(
        9,
        "PT initialization ordering",
        probes.len() == 3 && probes.iter().all(ok),
        &detail.join("; "),
    );
}

#[test]
fn criterion_10_determinism() {
    let cfg = RunConfig {
        epochs: 8,
        ..RunConfig::reference()
    };
    let run = || {
        let (report, _) = Experiment::new(cfg.clone()).unwrap().run_to_end().unwrap();
        report.without_metadata().to_json().unwrap()
    };
    let (a, b) = (run(), run());
    verdict(
        10,
        "determinism",
        a == b,
        &format!("two coil runs, reports {} ({} bytes)", if a == b { "identical" } else { "differ" }, a.len()),
    );
}

#[test]
fn cosine_logits_are_bounded_by_scale() {
    let mut g = rng::derive(11, &[]);
    let z = Array2::from_shape_fn((20, 3), |_| g.random_range(-5.0..5.0));
    let w = random_columns(&mut g, 3, 4);
    assert!(cosine_logits(z.view(), w.view(), 8.0).iter().all(|v| v.abs() <= 8.0 + 1e-12));
}
