//! Exemplar selection by herding, and how a fixed total budget is shared as
//! classes arrive.

use std::collections::BTreeMap;

use ndarray::Array2;
use otcil::datasets::Instance;
use otcil::memory::{herding_order, quotas, BudgetPolicy, ExemplarStore};
use otcil::rng;
use rand::Rng;

fn main() -> otcil::Result<()> {
    let mut g = rng::derive(5, &[]);
    let z = Array2::from_shape_fn((20, 2), |(_, j)| g.random_range(-1.0..1.0) + j as f64);
    let order = herding_order(z.view(), 5)?;
    let mean = z.mean_axis(ndarray::Axis(0)).unwrap();
    println!("class mean {mean:.3}");
    for m in 1..=order.len() {
        let approx = z.select(ndarray::Axis(0), &order[..m]).mean_axis(ndarray::Axis(0)).unwrap();
        let gap = (&approx - &mean).mapv(|v| v * v).sum().sqrt();
        println!("  {m} exemplars {:?}: distance to mean {gap:.4}", &order[..m]);
    }

    let policy: BudgetPolicy = "total:20".parse()?;
    let mut store = ExemplarStore::new(policy);
    for (step, classes) in [vec![0, 1], vec![2, 3], vec![4, 5, 6]].into_iter().enumerate() {
        let mut batch = BTreeMap::new();
        for c in classes {
            let inst: Vec<Instance> = (0..15)
                .map(|_| Instance { features: vec![g.random_range(-1.0..1.0) + c as f64, g.random_range(-1.0..1.0)], label: c })
                .collect();
            batch.insert(c, inst);
        }
        store.add_classes(&batch, |x| Ok(x.to_owned()))?;
        let counts: Vec<(usize, usize)> = store
            .class_ids()
            .into_iter()
            .map(|c| (c, store.instances().iter().filter(|i| i.label == c).count()))
            .collect();
        println!("after step {}: {} exemplars {counts:?}", step + 1, store.len());
    }
    println!("quotas for 7 classes: {:?}", quotas(policy, &(0..7).collect::<Vec<_>>()));
    Ok(())
}
