//! Train a small scorer on the rank-alignment loss and watch it converge.

use aif::pipeline::{finite_difference_gradient, toy_train, CoprToyModel, Objective};

fn main() {
    let model = CoprToyModel::synthetic(40, 4, 8, 3);
    let init = model.init_params(4);

    let g = model.gradient(&init);
    let fd = finite_difference_gradient(&model, &init, 1e-6);
    let worst = g.iter().zip(&fd).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12)).fold(0.0, f64::max);
    println!("{} parameters, worst gradient relative error {worst:.2e}", model.dim());

    for lr in [0.0, 0.01, 0.05] {
        let r = toy_train(&model, &init, 200, lr);
        println!(
            "lr {lr:<5} loss {:.4} -> {:.4}, {:.0}% steps non-increasing, diverged: {}",
            r.losses[0],
            r.losses.last().unwrap(),
            100.0 * r.non_increasing_fraction,
            r.diverged
        );
    }
}
