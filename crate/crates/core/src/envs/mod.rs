//! Analytic simulators with a common rollout contract.
//!
//! Each environment collapses a trajectory to its terminal reward. The
//! registry is addressed by string ids: `puckworld`, `poursim`,
//! `gaussbench-d<k>` and `null-puckworld` (PuckWorld geometry with rewards
//! that ignore the input, used to check against spurious concentration).

mod gaussbench;
mod poursim;
mod puckworld;

use serde::{Deserialize, Serialize};

pub use gaussbench::GaussianBench;
pub use poursim::{kitchen_reward, poursim_transfer, PourSim};
pub use puckworld::{NullPuckWorld, PuckWorld, PUCK_FLIP_PROB};

use crate::error::{Error, Result};
use crate::priors::PriorSpec;
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Binary,
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub env_id: String,
    pub policy_ids: Vec<String>,
    pub prior: PriorSpec,
    pub reward_kind: RewardKind,
    pub oracle_available: bool,
    /// Noise-free rewards at or above this count as a success when
    /// scoring posteriors.
    pub success_threshold: f64,
}

impl EnvSpec {
    pub fn check_policy(&self, policy: &str) -> Result<()> {
        if self.policy_ids.iter().any(|p| p == policy) {
            Ok(())
        } else {
            Err(Error::UnknownPolicy {
                env: self.env_id.clone(),
                policy: policy.to_string(),
            })
        }
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.prior.dim() {
            return Err(Error::invalid(format!(
                "{} expects {} dimensions, got {}",
                self.env_id,
                self.prior.dim(),
                x.len()
            )));
        }
        for (i, &v) in x.iter().enumerate() {
            if !(v >= self.prior.lo[i] && v <= self.prior.hi[i]) {
                return Err(Error::OutOfRange {
                    dim: i,
                    name: self.prior.names[i].clone(),
                    value: v,
                    lo: self.prior.lo[i],
                    hi: self.prior.hi[i],
                });
            }
        }
        Ok(())
    }
}

/// A stateless simulator: `(policy, s0/θ) -> terminal reward`.
pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// One stochastic rollout. May return [`Error::Rejected`] for inputs the
    /// simulator cannot instantiate.
    fn rollout(&self, policy: &str, x: &[f64], rng: &mut SimRng) -> Result<f64>;

    /// The same rule with every noise source disabled.
    fn oracle(&self, policy: &str, x: &[f64]) -> Result<f64>;

    fn id(&self) -> &str {
        &self.spec().env_id
    }

    /// `oracle(...) >= success_threshold`.
    fn oracle_success(&self, policy: &str, x: &[f64]) -> Result<bool> {
        Ok(self.oracle(policy, x)? >= self.spec().success_threshold)
    }
}

/// Look up an environment by id.
pub fn make_env(id: &str) -> Result<Box<dyn Environment>> {
    match id {
        "puckworld" => Ok(Box::new(PuckWorld::new())),
        "null-puckworld" => Ok(Box::new(NullPuckWorld::new())),
        "poursim" => Ok(Box::new(PourSim::new())),
        _ => {
            if let Some(k) = id.strip_prefix("gaussbench-d") {
                let d: usize = k.parse().map_err(|_| Error::UnknownEnv(id.to_string()))?;
                if d == 0 {
                    return Err(Error::UnknownEnv(id.to_string()));
                }
                return Ok(Box::new(GaussianBench::new(d)));
            }
            Err(Error::UnknownEnv(id.to_string()))
        }
    }
}
