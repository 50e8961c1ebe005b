//! Central finite differences against the analytic gradient of the
//! cross-entropy loss, one parameter block at a time.

use ndarray::Array2;
use otcil::diffnet::{random_columns, Batch, EmbeddingConfig, Model};
use otcil::losses::{evaluate, LossSpec};
use otcil::rng;
use rand::Rng;

fn main() -> otcil::Result<()> {
    let mut g = rng::derive(3, &[]);
    let mut model = Model::new(EmbeddingConfig::new(5, vec![6], 3), 8.0, &mut g)?;
    model.add_classes(random_columns(&mut g, 3, 4).view())?;
    let x = Array2::from_shape_fn((8, 5), |_| g.random_range(-1.0..1.0));
    let batch = Batch::new(x, (0..8).map(|i| i % 4).collect())?;
    let spec = LossSpec::ce_only();

    let (_, grads) = evaluate(&model, &batch, None, &spec, true)?;
    let analytic = grads.expect("requested").blocks();

    let h = 1e-5;
    let loss = |m: &Model| evaluate(m, &batch, None, &spec, false).map(|(l, _)| l.total);
    let mut numeric: Vec<Vec<f64>> = Vec::new();
    let mut block = 0;
    let mut probe = model.clone();
    probe.visit_params_mut(|_, _| numeric.push(Vec::new()));
    for b in 0..numeric.len() {
        let len = analytic[b].1.len();
        for i in 0..len {
            let mut nudged = |delta: f64| {
                let mut m = model.clone();
                block = 0;
                m.visit_params_mut(|_, p| {
                    if block == b {
                        p[i] += delta;
                    }
                    block += 1;
                });
                loss(&m)
            };
            let (up, down) = (nudged(h)?, nudged(-h)?);
            numeric[b].push((up - down) / (2.0 * h));
        }
    }

    for ((name, a), n) in analytic.iter().zip(&numeric) {
        let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        println!("{name:<14} {:>3} params, relative error {:.2e}", a.len(), diff / scale);
    }
    Ok(())
}
