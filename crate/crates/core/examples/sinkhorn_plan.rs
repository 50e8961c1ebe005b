//! Entropic transport between two small point clouds, at a few regularization
//! strengths.

use ndarray::array;
use otcil::ot::{sinkhorn, uniform_marginal, CostMatrix, OtConfig};

fn main() -> otcil::Result<()> {
    // three sources, two targets; squared distances on a line
    let src = [0.0f64, 1.0, 4.0];
    let dst = [0.5, 3.5];
    let cost = CostMatrix::new(ndarray::Array2::from_shape_fn((3, 2), |(i, j)| (src[i] - dst[j]).powi(2)))?;
    let (mu1, mu2) = (uniform_marginal(3), uniform_marginal(2));

    for eps in [2.0, 0.45, 0.05] {
        let cfg = OtConfig { epsilon: eps, ..OtConfig::default() };
        let plan = sinkhorn(&cost, &mu1, &mu2, &cfg)?;
        println!(
            "eps {eps:<5} iterations {:>4} converged {} cost {:.4}",
            plan.iterations_used,
            plan.converged,
            plan.transport_cost(&cost)
        );
        println!("plan\n{:.4}", plan.plan);
        println!("mixing (columns sum to 1)\n{:.4}\n", plan.mixing_weights());
    }

    // skewed priors are allowed too
    let skew = array![0.6, 0.3, 0.1];
    let plan = sinkhorn(&cost, &skew, &mu2, &OtConfig::default())?;
    println!("row sums with skewed source prior: {:.4}", plan.plan.sum_axis(ndarray::Axis(1)));
    Ok(())
}
