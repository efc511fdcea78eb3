//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use policyscope::autodiff::Matrix;
use policyscope::flow::{FlowConfig, FlowModel};
use policyscope::rng::stream;
use rand::Rng;

/// A default-shaped flow with every parameter perturbed away from the
/// identity, plus a batch of inputs and rewards.
pub struct Fixture {
    pub model: FlowModel,
    pub z: Matrix,
    pub rewards: Vec<f64>,
}

pub fn fixture(dim: usize, batch: usize) -> Fixture {
    let mut rng = stream(42, &[]);
    let mut model = FlowModel::new(dim, FlowConfig::default(), &mut rng).expect("valid config");
    let params: Vec<Matrix> = model
        .parameters()
        .iter()
        .map(|p| Array2::from_shape_fn(p.raw_dim(), |_| rng.random_range(-0.1..0.1)))
        .collect();
    model.set_parameters(&params).expect("same shapes");
    let z = Array2::from_shape_simple_fn((batch, dim), || rng.random_range(-2.0..2.0));
    let rewards = (0..batch).map(|_| rng.random_range(0.0..1.0)).collect();
    Fixture { model, z, rewards }
}
