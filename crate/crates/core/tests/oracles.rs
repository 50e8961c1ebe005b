//! Library results against independent reference computations: naive
//! loops, exhaustive enumeration and direct counting.

use ndarray::{array, Array2};
use otcil::datasets::{build_stream, generate_synthetic, inputs_matrix, labels_of, synthetic_centers, Dataset, Instance, StreamConfig, SyntheticSpec, TaskStream};
use otcil::diffnet::{cosine_logits, random_columns, Batch, EmbeddingConfig, Model, ModelSnapshot};
use otcil::eval::{boundary_grid, evaluate_stage, evaluate_with};
use otcil::experiment::RunConfig;
use otcil::losses::{ce_loss, evaluate, kd_loss, DistillContext, LossSpec};
use otcil::memory::{herding_order, ExemplarStore};
use otcil::ot::{compute_class_centers, compute_cost, sinkhorn, uniform_marginal, CostMatrix, CostNormalization, OtConfig};
use otcil::rng;
use otcil::trainer::{ncm_predict, Method, StageState};
use rand::Rng;

fn random_matrix(g: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| g.random_range(-2.0..2.0))
}

fn random_model(seed: u64, input_dim: usize, hidden: Vec<usize>, embed_dim: usize, classes: usize) -> Model {
    let mut g = rng::derive(seed, &[0]);
    let mut m = Model::new(EmbeddingConfig::new(input_dim, hidden, embed_dim), 8.0, &mut g).unwrap();
    m.add_classes(random_columns(&mut g, embed_dim, classes).view()).unwrap();
    m
}

#[test]
fn class_centers_match_per_class_loop() {
    let mut g = rng::derive(1, &[]);
    let z = random_matrix(&mut g, 40, 3);
    let labels: Vec<usize> = (0..40).map(|_| g.random_range(0..4)).collect();
    let classes = [3, 1, 0, 2];
    let centers = compute_class_centers(z.view(), &labels, &classes).unwrap();
    for (k, &c) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..40).filter(|&i| labels[i] == c).collect();
        for j in 0..3 {
            let mean = members.iter().map(|&i| z[[i, j]]).sum::<f64>() / members.len() as f64;
            assert!((centers.centers[[k, j]] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn cost_matches_pairwise_loop() {
    let mut g = rng::derive(2, &[]);
    let z = random_matrix(&mut g, 12, 4);
    let labels: Vec<usize> = (0..12).map(|i| i % 5).collect();
    let origin = compute_class_centers(z.view(), &labels, &[0, 1, 2]).unwrap();
    let goal = compute_class_centers(z.view(), &labels, &[3, 4]).unwrap();
    let cost = compute_cost(&origin, &goal).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let d: f64 = (0..4).map(|k| (origin.centers[[i, k]] - goal.centers[[j, k]]).powi(2)).sum();
            assert!((cost.values[[i, j]] - d).abs() < 1e-12);
        }
    }
}

#[test]
fn two_by_two_plan_concentrates_on_the_cheaper_assignment() {
    // identity costs 1 + 1, swap costs 4 + 4: small epsilon keeps mass on the diagonal
    let c = CostMatrix::new(array![[1.0, 4.0], [4.0, 1.0]]).unwrap();
    let cfg = OtConfig {
        epsilon: 0.01,
        max_iterations: 100_000,
        cost_normalization: CostNormalization::DivideByMean,
        ..OtConfig::default()
    };
    let plan = sinkhorn(&c, &uniform_marginal(2), &uniform_marginal(2), &cfg).unwrap();
    assert!(plan.converged);
    assert!((plan.transport_cost(&c) - 1.0).abs() < 1e-6);
    assert!(plan.plan[[0, 1]] < 1e-9);
}

#[test]
fn forward_pass_matches_naive_loops() {
    let model = random_model(3, 5, vec![7, 4], 3, 2);
    let mut g = rng::derive(3, &[1]);
    let x = random_matrix(&mut g, 6, 5);
    let z = model.embed(x.view()).unwrap();
    for r in 0..6 {
        let mut a: Vec<f64> = x.row(r).to_vec();
        for (l, layer) in model.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.weight.nrows()];
            for (o, v) in next.iter_mut().enumerate() {
                *v = layer.bias[o] + (0..a.len()).map(|i| layer.weight[[o, i]] * a[i]).sum::<f64>();
                if l + 1 < model.layers.len() {
                    *v = v.max(0.0);
                }
            }
            a = next;
        }
        for (k, v) in a.iter().enumerate() {
            assert!((z[[r, k]] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn cosine_logits_match_naive_formula() {
    let mut g = rng::derive(4, &[]);
    let z = random_matrix(&mut g, 5, 3);
    let w = random_matrix(&mut g, 3, 4);
    let logits = cosine_logits(z.view(), w.view(), 6.5);
    for i in 0..5 {
        for k in 0..4 {
            let dot: f64 = (0..3).map(|j| z[[i, j]] * w[[j, k]]).sum();
            let nz = (0..3).map(|j| z[[i, j]].powi(2)).sum::<f64>().sqrt();
            let nw = (0..3).map(|j| w[[j, k]].powi(2)).sum::<f64>().sqrt();
            assert!((logits[[i, k]] - 6.5 * dot / (nz * nw)).abs() < 1e-12);
        }
    }
}

fn naive_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn naive_soft_ce(teacher: &[f64], student: &[f64], tau: f64) -> f64 {
    let p = naive_softmax(teacher, tau);
    let q = naive_softmax(student, tau);
    -p.iter().zip(&q).map(|(p, q)| p * q.ln()).sum::<f64>()
}

#[test]
fn ce_and_kd_match_per_sample_sums() {
    let mut g = rng::derive(5, &[]);
    let student = random_matrix(&mut g, 7, 4) * 4.0;
    let teacher = random_matrix(&mut g, 7, 4) * 4.0;
    let labels: Vec<usize> = (0..7).map(|_| g.random_range(0..4)).collect();

    let ce = ce_loss(student.view(), &labels).unwrap();
    let naive_ce = (0..7)
        .map(|i| -naive_softmax(&student.row(i).to_vec(), 1.0)[labels[i]].ln())
        .sum::<f64>()
        / 7.0;
    assert!((ce - naive_ce).abs() < 1e-12);

    let kd = kd_loss(teacher.view(), student.view(), 2.0).unwrap();
    let naive_kd = (0..7)
        .map(|i| naive_soft_ce(&teacher.row(i).to_vec(), &student.row(i).to_vec(), 2.0))
        .sum::<f64>()
        / 7.0;
    assert!((kd - naive_kd).abs() < 1e-12);
}

/// Snapshot with 3 old classes, live model drifted and grown to 5 classes.
fn distill_setup() -> (Model, ModelSnapshot, Array2<f64>, Array2<f64>, Batch) {
    let old = random_model(6, 4, vec![5], 3, 3);
    let snapshot = ModelSnapshot::capture(&old);
    let mut g = rng::derive(6, &[1]);
    let mut live = old.clone();
    live.visit_params_mut(|_, p| p.iter_mut().for_each(|v| *v += g.random_range(-0.2..0.2)));
    live.add_classes(random_columns(&mut g, 3, 2).view()).unwrap();
    let transported = random_columns(&mut g, 3, 2);
    let mixing = array![[0.3, 0.5, 0.9], [0.7, 0.5, 0.1]];
    let x = random_matrix(&mut g, 6, 4);
    let labels = (0..6).map(|i| i % 5).collect();
    (live, snapshot, transported, mixing, Batch::new(x, labels).unwrap())
}

#[test]
fn kd_pt_rt_terms_match_per_sample_sums() {
    let (live, snapshot, transported, mixing, batch) = distill_setup();
    let ctx = DistillContext {
        snapshot: &snapshot,
        transported_new: Some(transported.view()),
        rt_mixing: Some(mixing.view()),
    };
    let spec = LossSpec {
        tau: 2.0,
        use_kd: true,
        use_pt: true,
        use_rt: true,
        pt_active: true,
        lambda: 0.6,
        gamma: 0.25,
    };
    let (out, _) = evaluate(&live, &batch, Some(&ctx), &spec, false).unwrap();

    let z = live.embed(batch.inputs.view()).unwrap();
    let tz = snapshot.embed(batch.inputs.view()).unwrap();
    let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| 8.0 * a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
    let old_head = snapshot.head().to_owned();
    let mut teacher_full = old_head.clone();
    teacher_full.append(ndarray::Axis(1), transported.view()).unwrap();
    let w_hat = live.head.slice(ndarray::s![.., 3..]).dot(&mixing);
    let (mut kd, mut pt, mut rt, mut ce) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..batch.len() {
        let teacher_old: Vec<f64> = (0..3).map(|k| cos(tz.row(i), old_head.column(k))).collect();
        let student_all: Vec<f64> = (0..5).map(|k| cos(z.row(i), live.head.column(k))).collect();
        let teacher_all: Vec<f64> = (0..5).map(|k| cos(tz.row(i), teacher_full.column(k))).collect();
        let student_rt: Vec<f64> = (0..3).map(|k| cos(z.row(i), w_hat.column(k))).collect();
        kd += naive_soft_ce(&teacher_old, &student_all[..3], 2.0);
        pt += naive_soft_ce(&teacher_all, &student_all, 2.0);
        rt += naive_soft_ce(&teacher_old, &student_rt, 2.0);
        ce += -naive_softmax(&student_all, 1.0)[batch.labels[i]].ln();
    }
    let n = batch.len() as f64;
    assert!((out.kd - kd / n).abs() < 1e-12);
    assert!((out.pt - pt / n).abs() < 1e-12);
    assert!((out.rt - rt / n).abs() < 1e-12);
    assert!((out.ce - ce / n).abs() < 1e-12);
    let total = 0.4 * ce / n + 0.6 * kd / n + pt / n + 0.25 * rt / n;
    assert!((out.total - total).abs() < 1e-12);
}

#[test]
fn pt_at_initialization_equals_teacher_entropy() {
    let old = random_model(7, 4, vec![5], 3, 3);
    let snapshot = ModelSnapshot::capture(&old);
    let transported = random_columns(&mut rng::derive(7, &[1]), 3, 2);
    let mut live = old.clone();
    live.add_classes(transported.view()).unwrap();
    let batch = Batch::new(random_matrix(&mut rng::derive(7, &[2]), 5, 4), vec![0, 1, 2, 3, 4]).unwrap();
    let ctx = DistillContext {
        snapshot: &snapshot,
        transported_new: Some(transported.view()),
        rt_mixing: None,
    };
    let spec = LossSpec {
        tau: 2.0,
        use_pt: true,
        pt_active: true,
        ..LossSpec::ce_only()
    };
    let (out, _) = evaluate(&live, &batch, Some(&ctx), &spec, false).unwrap();
    let teacher = live.logits(batch.inputs.view()).unwrap();
    let entropy = (0..5)
        .map(|i| {
            let p = naive_softmax(&teacher.row(i).to_vec(), 2.0);
            -p.iter().map(|v| v * v.ln()).sum::<f64>()
        })
        .sum::<f64>()
        / 5.0;
    assert!((out.pt - entropy).abs() < 1e-12);
}

#[test]
fn herding_matches_brute_force_selection() {
    let mut g = rng::derive(8, &[]);
    let z = random_matrix(&mut g, 15, 3);
    let order = herding_order(z.view(), 6).unwrap();
    let mu: Vec<f64> = (0..3).map(|j| (0..15).map(|i| z[[i, j]]).sum::<f64>() / 15.0).collect();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..6 {
        let mut best = (usize::MAX, f64::INFINITY);
        for cand in (0..15).filter(|c| !chosen.contains(c)) {
            let k = chosen.len() as f64 + 1.0;
            let d: f64 = (0..3)
                .map(|j| {
                    let s: f64 = chosen.iter().map(|&i| z[[i, j]]).sum::<f64>() + z[[cand, j]];
                    (mu[j] - s / k).powi(2)
                })
                .sum();
            if d < best.1 {
                best = (cand, d);
            }
        }
        chosen.push(best.0);
    }
    assert_eq!(order, chosen);
}

#[test]
fn ncm_matches_brute_force_nearest_center() {
    let model = random_model(9, 3, vec![4], 3, 0);
    let mut g = rng::derive(9, &[1]);
    let reps: Vec<Instance> = (0..24)
        .map(|i| Instance {
            features: (0..3).map(|_| g.random_range(-2.0..2.0)).collect(),
            label: [2, 5, 7][i % 3],
        })
        .collect();
    let queries = random_matrix(&mut g, 30, 3);
    let pred = ncm_predict(&model, &reps, &[7, 2, 5], queries.view()).unwrap();

    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let zr = model.embed(inputs_matrix(&reps).view()).unwrap();
    let centers: Vec<(usize, Vec<f64>)> = [2, 5, 7]
        .iter()
        .map(|&c| {
            let rows: Vec<usize> = (0..24).filter(|&i| reps[i].label == c).collect();
            let mean = (0..3).map(|j| rows.iter().map(|&i| zr[[i, j]]).sum::<f64>() / rows.len() as f64).collect();
            (c, unit(mean))
        })
        .collect();
    let zq = model.embed(queries.view()).unwrap();
    for (i, &p) in pred.iter().enumerate() {
        let q = unit(zq.row(i).to_vec());
        let best = centers
            .iter()
            .map(|(c, m)| (*c, m.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
            .fold((usize::MAX, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
        assert_eq!(p, best.0);
    }
}

#[test]
fn symmetric_three_class_head_splits_the_disk_evenly() {
    let mut model = random_model(10, 2, vec![], 2, 0);
    let cols = Array2::from_shape_fn((2, 3), |(r, k)| {
        let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0 + 0.1;
        if r == 0 {
            a.cos()
        } else {
            a.sin()
        }
    });
    model.add_classes(cols.view()).unwrap();
    let grid = boundary_grid(&model, (-1.0, 1.0), 512).unwrap();
    let mut counts = [0usize; 3];
    for p in grid.iter().filter(|p| p.x1 * p.x1 + p.x2 * p.x2 <= 1.0) {
        counts[p.class] += 1;
    }
    let total: usize = counts.iter().sum();
    for c in counts {
        let share = c as f64 / total as f64;
        assert!((share - 1.0 / 3.0).abs() <= 0.02 / 3.0, "sector counts {counts:?}");
    }
}

#[test]
fn grid_size_and_single_class() {
    let mut model = random_model(11, 2, vec![], 2, 0);
    model.add_classes(array![[1.0], [0.5]].view()).unwrap();
    let grid = boundary_grid(&model, (-1.0, 1.0), 2).unwrap();
    assert_eq!(grid.len(), 4);
    assert!(boundary_grid(&model, (-2.0, 2.0), 9).unwrap().iter().all(|p| p.class == 0));
    let wide = random_model(11, 2, vec![], 3, 2);
    assert!(matches!(boundary_grid(&wide, (-1.0, 1.0), 4), Err(otcil::Error::Config(_))));
}

fn small_stream(seed: u64) -> TaskStream {
    let spec = SyntheticSpec {
        num_classes: 6,
        dims: 4,
        per_class: 20,
        num_tasks: 3,
        seed,
        ..SyntheticSpec::pinned()
    };
    build_stream(&generate_synthetic(&spec).unwrap(), &StreamConfig::new(3, seed)).unwrap()
}

#[test]
fn pooled_accuracy_is_instance_weighted_mean() {
    let stream = small_stream(12);
    let model = random_model(12, 4, vec![6], 3, 6);
    let eval = evaluate_stage(&model, &stream, 3).unwrap();
    let mut correct = 0;
    let mut total = 0;
    for t in &stream.tasks {
        let pred = model.predict(inputs_matrix(&t.test).view()).unwrap();
        correct += pred.iter().zip(labels_of(&t.test)).filter(|(p, l)| **p == *l).count();
        total += t.test.len();
    }
    assert_eq!(eval.seen_accuracy, correct as f64 / total as f64);
    let weighted: f64 = eval
        .per_task_accuracy
        .iter()
        .zip(&eval.per_task_total)
        .map(|(a, &n)| a * n as f64)
        .sum::<f64>()
        / total as f64;
    assert!((weighted - eval.seen_accuracy).abs() < 1e-12);
}

#[test]
fn constant_and_perfect_predictors() {
    let stream = small_stream(13);
    let constant = evaluate_with(|x| Ok(vec![0; x.nrows()]), &stream, 3).unwrap();
    assert!((constant.seen_accuracy - 1.0 / 6.0).abs() < 1e-12);
    let labels: Vec<Vec<usize>> = stream.tasks.iter().map(|t| labels_of(&t.test)).collect();
    let perfect = evaluate_with(
        |x| {
            let m = inputs_matrix(&stream.tasks.iter().flat_map(|t| t.test.clone()).collect::<Vec<_>>());
            // look each query up among all test inputs
            Ok(x.rows()
                .into_iter()
                .map(|r| {
                    let i = m.rows().into_iter().position(|row| row == r).unwrap();
                    labels.concat()[i]
                })
                .collect())
        },
        &stream,
        2,
    )
    .unwrap();
    assert!(perfect.per_task_accuracy.iter().all(|&a| a == 1.0));
}

#[test]
fn relatedness_pulls_later_centers_toward_earlier_ones() {
    let mean_nearest = |r: f64, seed: u64| {
        let spec = SyntheticSpec {
            relatedness: r,
            seed,
            ..SyntheticSpec::pinned()
        };
        let centers = synthetic_centers(&spec).unwrap();
        let order = otcil::datasets::shuffled_class_order(&(0..8).collect::<Vec<_>>(), seed);
        let (first, later) = order.split_at(2);
        later
            .iter()
            .map(|c| {
                first
                    .iter()
                    .map(|f| centers[c].iter().zip(&centers[f]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / later.len() as f64
    };
    let (near, far): (f64, f64) = (0..20).map(|s| (mean_nearest(1.0, s), mean_nearest(0.0, s))).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    assert!(near < far, "related {near:.3} vs independent {far:.3}");
}

#[test]
fn standardization_uses_first_task_moments() {
    let spec = SyntheticSpec {
        num_classes: 4,
        dims: 3,
        per_class: 30,
        num_tasks: 2,
        seed: 14,
        ..SyntheticSpec::pinned()
    };
    let mut ds: Dataset = generate_synthetic(&spec).unwrap();
    ds.standardize = true;
    let stream = build_stream(&ds, &StreamConfig::new(2, 14)).unwrap();
    let x = inputs_matrix(&stream.tasks[0].train);
    for col in x.columns() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let sd = (col.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt();
        assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
    }
}

fn tiny_config(method: Method) -> RunConfig {
    let mut cfg = RunConfig {
        method,
        epochs: 3,
        tasks: 2,
        hidden_dims: vec![6],
        embed_dim: 3,
        ..RunConfig::reference()
    };
    cfg.synthetic.num_classes = 4;
    cfg.synthetic.dims = 5;
    cfg.synthetic.per_class = 25;
    cfg
}

#[test]
fn first_task_is_identical_across_methods() {
    let models: Vec<Model> = Method::ALL
        .iter()
        .map(|&m| {
            let cfg = tiny_config(m);
            let stream = cfg.stream().unwrap();
            let trainer = cfg.trainer().unwrap();
            let mut state = StageState::new(cfg.initial_model(stream.input_dim()).unwrap(), ExemplarStore::new(cfg.memory));
            trainer.run_task(&mut state, &stream.tasks[0]).unwrap();
            state.model
        })
        .collect();
    assert!(models.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_never_changes_the_snapshot() {
    let cfg = tiny_config(Method::Coil);
    let stream = cfg.stream().unwrap();
    let trainer = cfg.trainer().unwrap();
    let mut state = StageState::new(cfg.initial_model(stream.input_dim()).unwrap(), ExemplarStore::new(cfg.memory));
    trainer.run_task(&mut state, &stream.tasks[0]).unwrap();
    trainer.update_memory(&mut state, &stream.tasks[0]).unwrap();
    let probe = inputs_matrix(&stream.tasks[0].test);
    let before = state.model.logits(probe.view()).unwrap();
    trainer.run_task(&mut state, &stream.tasks[1]).unwrap();
    let after = state.snapshot.as_ref().unwrap().logits(probe.view()).unwrap();
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_ne!(state.model.logits(probe.view()).unwrap().slice(ndarray::s![.., ..2]), before);
}

#[test]
fn zero_epochs_only_augments_and_snapshots() {
    let cfg = tiny_config(Method::Coil);
    let stream = cfg.stream().unwrap();
    let trainer = cfg.trainer().unwrap();
    let mut state = StageState::new(cfg.initial_model(stream.input_dim()).unwrap(), ExemplarStore::new(cfg.memory));
    trainer.run_task(&mut state, &stream.tasks[0]).unwrap();
    trainer.update_memory(&mut state, &stream.tasks[0]).unwrap();
    let layers = state.model.layers.clone();
    let head = state.model.head.clone();
    let memory = state.memory.clone();
    let idle = otcil::trainer::Trainer::new(Method::Coil, otcil::trainer::TrainConfig { epochs: 0, lr_decay_epochs: vec![], ..trainer.train.clone() }, trainer.loss, trainer.ot).unwrap();
    let outcome = idle.run_task(&mut state, &stream.tasks[1]).unwrap();
    assert!(outcome.epochs.is_empty());
    assert_eq!(state.model.layers, layers);
    assert_eq!(state.model.head.slice(ndarray::s![.., ..2]), head);
    assert_eq!(state.model.num_classes(), 4);
    assert_eq!(state.memory, memory);
    assert!(state.snapshot.is_some());
}

#[test]
fn single_old_class_transports_to_copies_of_its_column() {
    let mut cfg = tiny_config(Method::Coil);
    cfg.synthetic.num_classes = 3;
    cfg.base_classes = Some(1);
    cfg.tasks = 2;
    let stream = cfg.stream().unwrap();
    let trainer = cfg.trainer().unwrap();
    let mut state = StageState::new(cfg.initial_model(stream.input_dim()).unwrap(), ExemplarStore::new(cfg.memory));
    trainer.run_task(&mut state, &stream.tasks[0]).unwrap();
    trainer.update_memory(&mut state, &stream.tasks[0]).unwrap();
    let t = trainer.pt_initialize(&state, &stream.tasks[1]).unwrap();
    for col in t.weights.columns() {
        for (a, b) in col.iter().zip(state.model.head.column(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn one_old_one_new_class_has_zero_rt() {
    let mut cfg = tiny_config(Method::Coil);
    cfg.synthetic.num_classes = 2;
    let report = otcil::run_experiment(&cfg).unwrap();
    let stage2: Vec<_> = report.epochs.iter().filter(|e| e.task == 2).collect();
    assert!(!stage2.is_empty());
    assert!(stage2.iter().all(|e| e.loss.rt.abs() < 1e-12));
}

#[test]
fn converged_kd_beats_an_untrained_model() {
    let cfg = RunConfig::reference().with_method(Method::ReplayKd);
    let mut exp = otcil::experiment::Experiment::new(cfg.clone()).unwrap();
    exp.step().unwrap();
    exp.step().unwrap();
    let snapshot = exp.state.snapshot.clone().unwrap();
    let exemplars = exp.state.memory.instances();
    let old: Vec<Instance> = exemplars.into_iter().filter(|i| i.label < 2).collect();
    let x = inputs_matrix(&old);
    let teacher = snapshot.logits(x.view()).unwrap();
    let trained = exp.state.model.logits(x.view()).unwrap();
    let mut fresh = cfg.initial_model(exp.stream.input_dim()).unwrap();
    fresh.add_classes(random_columns(&mut rng::derive(99, &[]), fresh.embed_dim(), 4).view()).unwrap();
    let untrained = fresh.logits(x.view()).unwrap();
    let kd_trained = kd_loss(teacher.view(), trained.slice(ndarray::s![.., ..2]), 2.0).unwrap();
    let kd_untrained = kd_loss(teacher.view(), untrained.slice(ndarray::s![.., ..2]), 2.0).unwrap();
    assert!(kd_trained <= kd_untrained, "trained {kd_trained} vs untrained {kd_untrained}");
}
