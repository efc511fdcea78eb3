use rand::Rng;
use serde::{Deserialize, Serialize};

use super::discover::PosteriorCertificate;
use crate::autodiff::Matrix;
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::priors::PriorSpec;
use crate::rng::{stream, tag, SimRng};

/// Anything that can be sampled and scored over a prior's unbounded space.
pub trait Posterior {
    fn spec(&self) -> &PriorSpec;
    fn sample_unbounded(&self, n: usize, rng: &mut SimRng) -> Result<Matrix>;
    fn log_prob_unbounded(&self, z: &Matrix) -> Result<Vec<f64>>;
}

impl Posterior for PosteriorCertificate {
    fn spec(&self) -> &PriorSpec {
        &self.spec
    }

    fn sample_unbounded(&self, n: usize, rng: &mut SimRng) -> Result<Matrix> {
        PosteriorCertificate::sample_unbounded(self, n, rng)
    }

    fn log_prob_unbounded(&self, z: &Matrix) -> Result<Vec<f64>> {
        PosteriorCertificate::log_prob_unbounded(self, z)
    }
}

/// The uniform prior itself, viewed as a posterior.
#[derive(Clone, Debug)]
pub struct PriorPosterior(pub PriorSpec);

impl Posterior for PriorPosterior {
    fn spec(&self) -> &PriorSpec {
        &self.0
    }

    fn sample_unbounded(&self, n: usize, rng: &mut SimRng) -> Result<Matrix> {
        let d = self.0.dim();
        // logistic draws are the exact pushforward of the uniform
        Ok(Matrix::from_shape_simple_fn((n, d), || {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            (u / (1.0 - u)).ln()
        }))
    }

    fn log_prob_unbounded(&self, z: &Matrix) -> Result<Vec<f64>> {
        Ok(z.rows()
            .into_iter()
            .map(|r| self.0.log_prior_unbounded(&r.to_vec()))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMetrics {
    pub oracle_success_fraction: f64,
    pub mean_true_reward: f64,
    pub self_entropy_estimate: f64,
}

/// Score `n` posterior samples with the environment's noise-free oracle.
pub fn evaluate_posterior(
    posterior: &dyn Posterior,
    env: &dyn Environment,
    policy: &str,
    n: usize,
    seed: u64,
) -> Result<PosteriorMetrics> {
    if n == 0 {
        return Err(Error::invalid("evaluate_posterior needs n >= 1"));
    }
    if !env.spec().oracle_available {
        return Err(Error::NoOracle(env.id().to_string()));
    }
    if !posterior.spec().same_ranges(&env.spec().prior) {
        return Err(Error::invalid(
            "posterior ranges differ from the environment's",
        ));
    }
    let z = posterior.sample_unbounded(n, &mut stream(seed, &[tag::EVAL]))?;
    let log_q = posterior.log_prob_unbounded(&z)?;
    let xs = posterior.spec().to_bounded_rows(&z);
    let threshold = env.spec().success_threshold;
    let mut successes = 0usize;
    let mut reward_sum = 0.0;
    for x in &xs {
        let r = env.oracle(policy, x)?;
        reward_sum += r;
        if r >= threshold {
            successes += 1;
        }
    }
    let nf = n as f64;
    Ok(PosteriorMetrics {
        oracle_success_fraction: successes as f64 / nf,
        mean_true_reward: reward_sum / nf,
        self_entropy_estimate: -log_q.iter().sum::<f64>() / nf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_env;

    #[test]
    fn prior_on_push_matches_region_volume() {
        let env = make_env("puckworld").unwrap();
        let prior = PriorPosterior(env.spec().prior.clone());
        let m = evaluate_posterior(&prior, env.as_ref(), "push", 5000, 1).unwrap();
        let volume = 0.6 * (0.7 / 0.9) * 0.6;
        assert!((m.oracle_success_fraction - volume).abs() <= 0.05);
        assert_eq!(m.mean_true_reward, m.oracle_success_fraction);
    }

    #[test]
    fn prior_entropy_estimate_is_logistic_entropy() {
        // a standard logistic variable has entropy 2 nats
        let env = make_env("gaussbench-d2").unwrap();
        let prior = PriorPosterior(env.spec().prior.clone());
        let m = evaluate_posterior(&prior, env.as_ref(), "default", 20_000, 2).unwrap();
        assert!((m.self_entropy_estimate - 4.0).abs() < 0.05);
    }

    #[test]
    fn zero_samples_rejected() {
        let env = make_env("puckworld").unwrap();
        let prior = PriorPosterior(env.spec().prior.clone());
        assert!(evaluate_posterior(&prior, env.as_ref(), "push", 0, 1).is_err());
    }
}
