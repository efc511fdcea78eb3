//! Pouring surrogate: a grasp-ratio gate times two mirror-image bumps in the
//! relative container position. The final angle `dangle` has no effect.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{EnvSpec, Environment, RewardKind};
use crate::error::{Error, Result};
use crate::priors::PriorSpec;
use crate::rng::SimRng;

pub const POUR_NOISE_STD: f64 = 0.01;

/// Dense pouring reward for the transferred fraction of liquid.
pub fn kitchen_reward(x_transfer: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x_transfer) {
        return Err(Error::invalid(format!(
            "transferred fraction {x_transfer} outside [0, 1]"
        )));
    }
    Ok((2.0 * (x_transfer * 10.0 - 9.5)).exp() - 1.0)
}

fn bump(a: f64, b: f64) -> f64 {
    (-(a * a + b * b) / 2.0).exp()
}

/// Fraction of liquid transferred for `(grasp, rel_x, rel_y, dangle)`.
pub fn poursim_transfer(x: &[f64]) -> f64 {
    let (grasp, rel_x, rel_y) = (x[0], x[1], x[2]);
    let g = (-(grasp - 0.5).powi(2) / (2.0 * 0.2 * 0.2)).exp();
    let b = bump((rel_x - 4.0) / 1.5, (rel_y - 3.0) / 2.0)
        + bump((rel_x + 4.0) / 1.5, (rel_y - 3.0) / 2.0);
    (g * b).clamp(0.0, 1.0)
}

#[derive(Clone, Debug)]
pub struct PourSim {
    spec: EnvSpec,
}

impl PourSim {
    pub fn new() -> Self {
        let prior = PriorSpec::new([
            ("grasp", 0.0, 1.0),
            ("rel_x", -10.0, 10.0),
            ("rel_y", 1.0, 10.0),
            ("dangle", 0.5 * std::f64::consts::PI, std::f64::consts::PI),
        ])
        .expect("static ranges are valid");
        Self {
            spec: EnvSpec {
                env_id: "poursim".into(),
                policy_ids: vec!["pour".into()],
                prior,
                reward_kind: RewardKind::Dense,
                oracle_available: true,
                success_threshold: 0.0,
            },
        }
    }
}

impl Default for PourSim {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PourSim {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn rollout(&self, policy: &str, x: &[f64], rng: &mut SimRng) -> Result<f64> {
        let clean = self.oracle(policy, x)?;
        let noise: f64 = rng.sample(StandardNormal);
        Ok(clean + POUR_NOISE_STD * noise)
    }

    fn oracle(&self, policy: &str, x: &[f64]) -> Result<f64> {
        self.spec.check_policy(policy)?;
        self.spec.check_input(x)?;
        kitchen_reward(poursim_transfer(x))
    }
}
