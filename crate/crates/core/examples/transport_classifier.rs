//! Builds classifier columns for unseen classes by transporting the columns
//! of seen ones, then checks how well they classify before any training.

use ndarray::{Array2, Axis};
use otcil::datasets::{generate_synthetic, inputs_matrix, labels_of, build_stream, StreamConfig, SyntheticSpec};
use otcil::diffnet::{cosine_logits, random_columns, EmbeddingConfig, Model};
use otcil::ot::{transport_classifier, LabeledSet, OtConfig};
use otcil::rng;

fn main() -> otcil::Result<()> {
    let spec = SyntheticSpec { relatedness: 1.0, ..SyntheticSpec::pinned() };
    let stream = build_stream(&generate_synthetic(&spec)?, &StreamConfig::new(spec.num_tasks, spec.seed))?;
    let (old, new) = (&stream.tasks[0], &stream.tasks[1]);
    let old_classes: Vec<usize> = old.local_classes().collect();
    let new_classes: Vec<usize> = new.local_classes().collect();

    // an identity-ish embedding is enough to show the mechanics
    let mut g = rng::derive(7, &[]);
    let model = Model::new(EmbeddingConfig::new(stream.input_dim(), vec![], stream.input_dim()), 8.0, &mut g)?;

    // old columns: normalized class means of the old task
    let x_old = inputs_matrix(&old.train);
    let y_old = labels_of(&old.train);
    let z_old = model.embed(x_old.view())?;
    let mut w_old = Array2::zeros((z_old.ncols(), old.classes.len()));
    for (k, c) in old_classes.iter().enumerate() {
        let rows: Vec<usize> = (0..y_old.len()).filter(|&i| y_old[i] == *c).collect();
        w_old.column_mut(k).assign(&z_old.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap());
    }

    let x_new = inputs_matrix(&new.train);
    let y_new = labels_of(&new.train);
    let t = transport_classifier(
        LabeledSet { inputs: x_old.view(), labels: &y_old, classes: &old_classes },
        LabeledSet { inputs: x_new.view(), labels: &y_new, classes: &new_classes },
        w_old.view(),
        |x| model.embed(x),
        &OtConfig::default(),
    )?;
    println!("mixing weights (old classes x new classes)\n{:.3}", t.mixing);

    let x_test = inputs_matrix(&new.test);
    let y_test: Vec<usize> = labels_of(&new.test).iter().map(|l| l - new.class_offset).collect();
    let z_test = model.embed(x_test.view())?;
    let acc = |w: &Array2<f64>| {
        let logits = cosine_logits(z_test.view(), w.view(), 8.0);
        let hits = logits
            .rows()
            .into_iter()
            .zip(&y_test)
            .filter(|(r, y)| r.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0 == **y)
            .count();
        hits as f64 / y_test.len() as f64
    };
    let random = random_columns(&mut g, z_test.ncols(), new.classes.len());
    println!("new-task accuracy: transported {:.1}%, random {:.1}%", 100.0 * acc(&t.weights), 100.0 * acc(&random));
    Ok(())
}
