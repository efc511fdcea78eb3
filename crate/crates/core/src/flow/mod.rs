//! Conditional masked autoregressive flow over the unconstrained parameter
//! space, conditioned on a scalar reward.

mod made;
mod maf;

pub(crate) use made::{degrees, masks};
pub use made::{MadeLayer, MadeOutput};
pub use maf::{FlowConfig, FlowModel, RewardNorm};

/// Replace every parameter with random values so the flow is far from the
/// identity.
#[cfg(test)]
pub(crate) fn randomize(model: &mut FlowModel, seed: u64, scale: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<crate::autodiff::Matrix> = model
        .parameters()
        .iter()
        .map(|p| ndarray::Array2::from_shape_fn(p.raw_dim(), |_| rng.random_range(-scale..scale)))
        .collect();
    model.set_parameters(&params).unwrap();
    model.reward_norm = RewardNorm {
        mean: 0.3,
        std: 2.0,
    };
}
