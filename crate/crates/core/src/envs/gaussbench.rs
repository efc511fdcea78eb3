//! Quadratic bowl on the unit box with its maximum at the center.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{EnvSpec, Environment, RewardKind};
use crate::error::Result;
use crate::priors::PriorSpec;
use crate::rng::SimRng;

pub const GAUSS_NOISE_STD: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct GaussianBench {
    spec: EnvSpec,
    target: Vec<f64>,
}

impl GaussianBench {
    pub fn new(dim: usize) -> Self {
        let prior = PriorSpec::new((0..dim).map(|i| (format!("x{i}"), 0.0, 1.0)))
            .expect("unit box is valid");
        let target = prior.midpoint().0;
        Self {
            spec: EnvSpec {
                env_id: format!("gaussbench-d{dim}"),
                policy_ids: vec!["default".into()],
                prior,
                reward_kind: RewardKind::Dense,
                oracle_available: true,
                // rms deviation from the target of at most 0.1 per dimension
                success_threshold: -0.01 * dim as f64,
            },
            target,
        }
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }
}

impl Environment for GaussianBench {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn rollout(&self, policy: &str, x: &[f64], rng: &mut SimRng) -> Result<f64> {
        let clean = self.oracle(policy, x)?;
        let noise: f64 = rng.sample(StandardNormal);
        Ok(clean + GAUSS_NOISE_STD * noise)
    }

    fn oracle(&self, policy: &str, x: &[f64]) -> Result<f64> {
        self.spec.check_policy(policy)?;
        self.spec.check_input(x)?;
        Ok(-x
            .iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>())
    }
}
