#![allow(dead_code)]

use acll::net::{Matrix, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// Largest relative error between analytic and central-difference gradients.
pub fn max_relative_error(net: &Network, task: u32, inputs: &Matrix, labels: &[usize]) -> f64 {
    let (_, grad) = net.loss_and_gradient(task, inputs, labels).unwrap();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &g) in grad.iter().enumerate() {
        let w = net.weights()[i];
        probe.weights_mut()[i] = w + STEP;
        let up = probe.mean_loss(task, inputs, labels).unwrap();
        probe.weights_mut()[i] = w - STEP;
        let down = probe.mean_loss(task, inputs, labels).unwrap();
        probe.weights_mut()[i] = w;
        let numeric = (up - down) / (2.0 * STEP);
        let scale = g.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max((g - numeric).abs() / scale);
    }
    worst
}

pub fn random_instance(seed: u64) -> (Network, Matrix, Vec<usize>, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(1..4);
    let depth = rng.random_range(1..3);
    let mut dims = vec![input];
    for _ in 0..depth {
        dims.push(rng.random_range(2..7));
    }
    let classes = rng.random_range(2..5);
    dims.push(classes);
    let mut net = Network::new(&dims, seed).unwrap();
    // A second head so gradients must stay out of other tasks' slices.
    let task = if rng.random_bool(0.5) {
        net.register_head(2, rng.random_range(2..4)).unwrap();
        2
    } else {
        1
    };
    for b in net.weights_mut() {
        if *b == 0.0 {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let rows = 8;
    let data: Vec<f64> = (0..rows * input).map(|_| rng.random_range(-2.0..2.0)).collect();
    let k = net.class_count(task).unwrap();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
    (net, Matrix::from_vec(rows, input, data), labels, task)
}
