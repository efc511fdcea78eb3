//! Puck-into-box surrogate with scripted `push` and `pickplace` policies.
//!
//! Dimensions: initial table position `x, y` (normalized to `[0, 1]`), then
//! puck mass, width `w`, height `h` and three friction coefficients.

use rand::Rng;

use super::{EnvSpec, Environment, RewardKind};
use crate::error::Result;
use crate::priors::PriorSpec;
use crate::rng::SimRng;

/// Probability that a rollout's outcome is flipped.
pub const PUCK_FLIP_PROB: f64 = 0.05;

const X: usize = 0;
const Y: usize = 1;
const MASS: usize = 2;
const W: usize = 3;
const H: usize = 4;
const FR0: usize = 5;

pub(crate) fn puck_prior() -> PriorSpec {
    PriorSpec::new([
        ("x", 0.0, 1.0),
        ("y", 0.0, 1.0),
        ("mass", 1.0, 20.0),
        ("w", 0.02, 0.045),
        ("h", 0.02, 0.03),
        ("fr0", 0.1, 1.0),
        ("fr1", 0.1, 1.0),
        ("fr2", 0.1, 1.0),
    ])
    .expect("static ranges are valid")
}

fn puck_spec(env_id: &str) -> EnvSpec {
    EnvSpec {
        env_id: env_id.to_string(),
        policy_ids: vec!["pickplace".into(), "push".into()],
        prior: puck_prior(),
        reward_kind: RewardKind::Binary,
        oracle_available: true,
        success_threshold: 0.5,
    }
}

/// Noise-free success rule of each scripted policy.
fn succeeds(policy: &str, x: &[f64]) -> bool {
    match policy {
        // light, narrow pucks that start left of the hole
        "pickplace" => x[MASS] <= 8.0 && x[W] <= 0.040 && x[X] <= 0.7,
        // short pucks clear the obstacle; needs grip and a central start
        "push" => x[H] <= 0.026 && x[FR0] >= 0.3 && (0.2..=0.8).contains(&x[Y]),
        _ => unreachable!("policy checked by caller"),
    }
}

#[derive(Clone, Debug)]
pub struct PuckWorld {
    spec: EnvSpec,
}

impl PuckWorld {
    pub fn new() -> Self {
        Self {
            spec: puck_spec("puckworld"),
        }
    }
}

impl Default for PuckWorld {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PuckWorld {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn rollout(&self, policy: &str, x: &[f64], rng: &mut SimRng) -> Result<f64> {
        let clean = self.oracle(policy, x)?;
        // one draw per rollout keeps paired comparisons aligned across policies
        let flip = rng.random::<f64>() < PUCK_FLIP_PROB;
        Ok(if flip { 1.0 - clean } else { clean })
    }

    fn oracle(&self, policy: &str, x: &[f64]) -> Result<f64> {
        self.spec.check_policy(policy)?;
        self.spec.check_input(x)?;
        Ok(if succeeds(policy, x) { 1.0 } else { 0.0 })
    }
}

/// PuckWorld geometry and oracle, but rollouts return a fair coin that
/// ignores the input.
#[derive(Clone, Debug)]
pub struct NullPuckWorld {
    spec: EnvSpec,
}

impl NullPuckWorld {
    pub fn new() -> Self {
        Self {
            spec: puck_spec("null-puckworld"),
        }
    }
}

impl Default for NullPuckWorld {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for NullPuckWorld {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn rollout(&self, policy: &str, x: &[f64], rng: &mut SimRng) -> Result<f64> {
        self.spec.check_policy(policy)?;
        self.spec.check_input(x)?;
        Ok(if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
    }

    fn oracle(&self, policy: &str, x: &[f64]) -> Result<f64> {
        self.spec.check_policy(policy)?;
        self.spec.check_input(x)?;
        Ok(if succeeds(policy, x) { 1.0 } else { 0.0 })
    }
}
