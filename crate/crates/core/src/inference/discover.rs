use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::RoundDataset;
use super::train::train_round;
use crate::autodiff::Matrix;
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::priors::{ParamVector, PriorSpec};
use crate::rng::{stream, tag, SimRng};

const MAX_REJECTIONS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RStarRule {
    /// Largest reward seen so far.
    Max,
    /// Nearest-rank 95th percentile of the accumulated rewards.
    Quantile95,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Atomic contrastive loss with prior-ratio scores.
    Apt,
    /// Maximum likelihood on proposal samples, no proposal correction.
    Mle,
}

/// Run settings. Deserializes from a flat key/value document; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverConfig {
    pub n_rounds: usize,
    pub rollouts_per_round: usize,
    pub atoms: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub r_star: RStarRule,
    pub loss: LossKind,
    /// Fraction of each proposal drawn from the prior instead of the flow.
    pub prior_mix: f64,
    pub n_layers: usize,
    pub hidden: Vec<usize>,
    pub log_scale_bound: f64,
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        let flow = FlowConfig::default();
        Self {
            n_rounds: 10,
            rollouts_per_round: 500,
            atoms: 10,
            batch_size: 256,
            learning_rate: 5e-4,
            max_epochs: 500,
            patience: 20,
            validation_fraction: 0.1,
            seed: 0,
            r_star: RStarRule::Max,
            loss: LossKind::Apt,
            prior_mix: 0.0,
            n_layers: flow.n_layers,
            hidden: flow.hidden,
            log_scale_bound: flow.log_scale_bound,
        }
    }
}

impl DiscoverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_rounds < 1 {
            return bad("n_rounds must be at least 1".into());
        }
        if self.atoms < 2 {
            return bad(format!("atoms must be at least 2, got {}", self.atoms));
        }
        if self.rollouts_per_round < self.atoms {
            return bad(format!(
                "rollouts_per_round ({}) must be at least atoms ({})",
                self.rollouts_per_round, self.atoms
            ));
        }
        if self.batch_size < self.atoms {
            return bad(format!(
                "batch_size ({}) must be at least atoms ({})",
                self.batch_size, self.atoms
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return bad("validation_fraction must lie in (0, 0.5)".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.max_epochs < 1 || self.patience < 1 {
            return bad("max_epochs and patience must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.prior_mix) {
            return bad("prior_mix must lie in [0, 1]".into());
        }
        self.flow_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            n_layers: self.n_layers,
            hidden: self.hidden.clone(),
            log_scale_bound: self.log_scale_bound,
        }
    }
}

/// Per-round diagnostics kept inside the certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    #[serde(with = "crate::store::lossy_f64")]
    pub train_loss: f64,
    #[serde(with = "crate::store::lossy_f64")]
    pub val_loss: f64,
    pub r_star: f64,
    pub epochs: usize,
    pub dataset_size: usize,
}

/// Line-oriented diagnostics record emitted after each round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    #[serde(with = "crate::store::lossy_f64")]
    pub train_loss: f64,
    #[serde(with = "crate::store::lossy_f64")]
    pub val_loss: f64,
    pub r_star: f64,
    pub wall_time_s: f64,
}

/// A fitted posterior together with everything needed to sample or score it.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorCertificate {
    pub env_id: String,
    pub policy_id: String,
    pub spec: PriorSpec,
    pub flow: FlowModel,
    pub r_star: f64,
    pub config: DiscoverConfig,
    pub history: Vec<RoundSummary>,
    /// False when a round aborted and this is the last completed round.
    pub complete: bool,
}

impl PosteriorCertificate {
    pub fn sample_unbounded<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Matrix> {
        self.flow.sample(self.r_star, n, rng)
    }

    pub fn sample_bounded<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<ParamVector>> {
        Ok(self.spec.to_bounded_rows(&self.sample_unbounded(n, rng)?))
    }

    /// `log q(z | r*)` per row.
    pub fn log_prob_unbounded(&self, z: &Matrix) -> Result<Vec<f64>> {
        self.flow.log_prob_batch(z, &vec![self.r_star; z.nrows()])
    }
}

/// Source of simulator inputs for a round.
pub trait Proposal: Sync {
    fn draw(&self, n: usize, rng: &mut SimRng) -> Result<Vec<ParamVector>>;
}

impl Proposal for PriorSpec {
    fn draw(&self, n: usize, rng: &mut SimRng) -> Result<Vec<ParamVector>> {
        Ok(self.sample_uniform(n, rng))
    }
}

/// The flow conditioned on a target reward, mapped back to the box.
pub struct FlowProposal<'a> {
    pub flow: &'a FlowModel,
    pub spec: &'a PriorSpec,
    pub cond: f64,
    pub prior_mix: f64,
}

impl Proposal for FlowProposal<'_> {
    fn draw(&self, n: usize, rng: &mut SimRng) -> Result<Vec<ParamVector>> {
        let from_prior = (0..n)
            .filter(|_| rng.random::<f64>() < self.prior_mix)
            .count();
        let mut out = self.spec.sample_uniform(from_prior, rng);
        if n > from_prior {
            let z = self.flow.sample(self.cond, n - from_prior, rng)?;
            out.extend(self.spec.to_bounded_rows(&z));
        }
        Ok(out)
    }
}

/// Draw `rho` inputs from `proposal` and roll the policy out once on each.
///
/// Rollout `i` of round `round` uses its own stream, so the result does not
/// depend on thread count. A rejected input is redrawn from the proposal up
/// to 100 times.
pub fn collect_round(
    env: &dyn Environment,
    policy: &str,
    proposal: &dyn Proposal,
    rho: usize,
    seed: u64,
    round: usize,
) -> Result<Vec<(ParamVector, f64)>> {
    env.spec().check_policy(policy)?;
    let round = round as u64;
    let inputs = proposal.draw(rho, &mut stream(seed, &[tag::PROPOSAL, round]))?;
    if inputs.len() != rho {
        return Err(Error::invalid(
            "proposal returned the wrong number of inputs",
        ));
    }
    inputs
        .into_par_iter()
        .enumerate()
        .map(|(i, mut x)| {
            let i = i as u64;
            for attempt in 0..=MAX_REJECTIONS as u64 {
                if attempt > 0 {
                    let mut r = stream(seed, &[tag::RESAMPLE, round, i, attempt]);
                    x = proposal.draw(1, &mut r)?.pop().expect("one draw");
                }
                let mut rng = stream(seed, &[tag::ROLLOUT, round, i, attempt]);
                match env.rollout(policy, &x, &mut rng) {
                    Ok(r) => return Ok((x, r)),
                    Err(Error::Rejected(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Rejected(format!(
                "rollout {i} rejected {MAX_REJECTIONS} times"
            )))
        })
        .collect()
}

pub fn select_r_star(dataset: &RoundDataset, rule: RStarRule) -> Result<f64> {
    let mut rewards = dataset.rewards();
    if rewards.is_empty() {
        return Err(Error::invalid("empty dataset has no r*"));
    }
    match rule {
        RStarRule::Max => Ok(rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        RStarRule::Quantile95 => {
            rewards.sort_by(f64::total_cmp);
            let rank = (0.95 * rewards.len() as f64).ceil() as usize;
            Ok(rewards[rank.clamp(1, rewards.len()) - 1])
        }
    }
}

/// Sequentially refine the posterior of `policy` on `env`.
///
/// `observer` receives one record per completed round. If a round aborts
/// after at least one round completed, the certificate of the last completed
/// round is returned with `complete = false`.
pub fn run_discover(
    env: &dyn Environment,
    policy: &str,
    config: &DiscoverConfig,
    observer: &mut dyn FnMut(&RoundRecord),
) -> Result<PosteriorCertificate> {
    config.validate()?;
    let spec = env.spec().prior.clone();
    env.spec().check_policy(policy)?;
    let seed = config.seed;
    let mut model = FlowModel::new(
        spec.dim(),
        config.flow_config(),
        &mut stream(seed, &[tag::INIT]),
    )?;
    let mut dataset = RoundDataset::new();
    let mut history: Vec<RoundSummary> = Vec::new();
    let mut r_star: Option<f64> = None;

    for round in 1..=config.n_rounds {
        let started = Instant::now();
        let outcome = (|| -> Result<(FlowModel, RoundSummary)> {
            let pairs = match r_star {
                None => collect_round(env, policy, &spec, config.rollouts_per_round, seed, round)?,
                Some(target) => {
                    let proposal = FlowProposal {
                        flow: &model,
                        spec: &spec,
                        cond: target,
                        prior_mix: config.prior_mix,
                    };
                    collect_round(
                        env,
                        policy,
                        &proposal,
                        config.rollouts_per_round,
                        seed,
                        round,
                    )?
                }
            };
            dataset.append(round, pairs, &spec)?;
            let mut candidate = model.clone();
            let mut rng = stream(seed, &[tag::TRAIN, round as u64]);
            let fit = train_round(&mut candidate, &dataset, config, &spec, round, &mut rng)?;
            let target = select_r_star(&dataset, config.r_star)?;
            Ok((
                candidate,
                RoundSummary {
                    round,
                    train_loss: fit.train_loss,
                    val_loss: fit.val_loss,
                    r_star: target,
                    epochs: fit.epochs,
                    dataset_size: dataset.len(),
                },
            ))
        })();
        match outcome {
            Ok((trained, summary)) => {
                model = trained;
                r_star = Some(summary.r_star);
                observer(&RoundRecord {
                    round,
                    train_loss: summary.train_loss,
                    val_loss: summary.val_loss,
                    r_star: summary.r_star,
                    wall_time_s: started.elapsed().as_secs_f64(),
                });
                history.push(summary);
            }
            Err(e) if history.is_empty() => return Err(e),
            Err(_) => {
                return Ok(PosteriorCertificate {
                    env_id: env.id().to_string(),
                    policy_id: policy.to_string(),
                    spec,
                    flow: model,
                    r_star: r_star.expect("a completed round sets r*"),
                    config: config.clone(),
                    history,
                    complete: false,
                })
            }
        }
    }

    Ok(PosteriorCertificate {
        env_id: env.id().to_string(),
        policy_id: policy.to_string(),
        spec,
        flow: model,
        r_star: r_star.expect("n_rounds >= 1"),
        config: config.clone(),
        history,
        complete: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_env, EnvSpec, RewardKind};

    fn dataset_with(rewards: &[f64]) -> RoundDataset {
        let spec = PriorSpec::new([("a", 0.0, 1.0)]).unwrap();
        let mut d = RoundDataset::new();
        d.append(
            1,
            rewards.iter().map(|&r| (vec![0.5].into(), r)).collect(),
            &spec,
        )
        .unwrap();
        d
    }

    #[test]
    fn r_star_is_the_maximum() {
        assert_eq!(
            select_r_star(&dataset_with(&[0.0, 0.0, 1.0]), RStarRule::Max).unwrap(),
            1.0
        );
        assert_eq!(
            select_r_star(&dataset_with(&[0.0, 0.0, 0.0]), RStarRule::Max).unwrap(),
            0.0
        );
        let e = std::f64::consts::E;
        let r = [
            crate::envs::kitchen_reward(0.9).unwrap(),
            crate::envs::kitchen_reward(1.0).unwrap(),
        ];
        let got = select_r_star(&dataset_with(&r), RStarRule::Max).unwrap();
        assert!((got - (e - 1.0)).abs() < 1e-12);
        assert!(select_r_star(&RoundDataset::new(), RStarRule::Max).is_err());
    }

    #[test]
    fn r_star_quantile() {
        let rewards: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(
            select_r_star(&dataset_with(&rewards), RStarRule::Quantile95).unwrap(),
            95.0
        );
    }

    #[test]
    fn config_validation() {
        assert!(DiscoverConfig::default().validate().is_ok());
        let bad = [
            DiscoverConfig {
                n_rounds: 0,
                ..Default::default()
            },
            DiscoverConfig {
                atoms: 1,
                ..Default::default()
            },
            DiscoverConfig {
                rollouts_per_round: 5,
                ..Default::default()
            },
            DiscoverConfig {
                validation_fraction: 0.5,
                ..Default::default()
            },
            DiscoverConfig {
                validation_fraction: 0.0,
                ..Default::default()
            },
            DiscoverConfig {
                prior_mix: 1.5,
                ..Default::default()
            },
            DiscoverConfig {
                hidden: vec![],
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn first_round_matches_uniform_moments() {
        let env = make_env("puckworld").unwrap();
        let spec = env.spec().prior.clone();
        let pairs = collect_round(env.as_ref(), "push", &spec, 500, 17, 1).unwrap();
        assert_eq!(pairs.len(), 500);
        for i in 0..spec.dim() {
            let mean = pairs.iter().map(|(x, _)| x[i]).sum::<f64>() / 500.0;
            // uniform variance w²/12
            let se = spec.width(i) / 12f64.sqrt() / 500f64.sqrt();
            let mid = 0.5 * (spec.lo[i] + spec.hi[i]);
            assert!((mean - mid).abs() < 3.0 * se, "dim {i}: {mean} vs {mid}");
        }
    }

    #[test]
    fn seeded_rounds_repeat() {
        let env = make_env("gaussbench-d2").unwrap();
        let spec = env.spec().prior.clone();
        let a = collect_round(env.as_ref(), "default", &spec, 50, 3, 2).unwrap();
        let b = collect_round(env.as_ref(), "default", &spec, 50, 3, 2).unwrap();
        assert_eq!(a, b);
        let g = crate::envs::GaussianBench::new(2);
        assert_eq!(g.oracle("default", &[0.5, 0.5]).unwrap(), 0.0);
    }

    /// Rejects any input whose first coordinate is above one half.
    struct Picky {
        spec: EnvSpec,
        always: bool,
    }

    impl Environment for Picky {
        fn spec(&self) -> &EnvSpec {
            &self.spec
        }
        fn rollout(&self, _: &str, x: &[f64], _: &mut SimRng) -> Result<f64> {
            if self.always || x[0] > 0.5 {
                Err(Error::Rejected("geometry".into()))
            } else {
                Ok(x[0])
            }
        }
        fn oracle(&self, _: &str, x: &[f64]) -> Result<f64> {
            Ok(x[0])
        }
    }

    fn picky(always: bool) -> Picky {
        Picky {
            spec: EnvSpec {
                env_id: "picky".into(),
                policy_ids: vec!["p".into()],
                prior: PriorSpec::new([("a", 0.0, 1.0)]).unwrap(),
                reward_kind: RewardKind::Dense,
                oracle_available: true,
                success_threshold: 0.0,
            },
            always,
        }
    }

    #[test]
    fn rejected_inputs_are_redrawn() {
        let env = picky(false);
        let pairs = collect_round(&env, "p", &env.spec.prior.clone(), 200, 1, 1).unwrap();
        assert_eq!(pairs.len(), 200);
        assert!(pairs.iter().all(|(x, r)| x[0] <= 0.5 && *r == x[0]));
    }

    #[test]
    fn persistent_rejection_is_an_error() {
        let env = picky(true);
        let err = collect_round(&env, "p", &env.spec.prior.clone(), 3, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Rejected(_)));
    }

    #[test]
    fn unknown_policy_rejected_up_front() {
        let env = make_env("poursim").unwrap();
        let spec = env.spec().prior.clone();
        assert!(collect_round(env.as_ref(), "push", &spec, 5, 0, 1).is_err());
    }
}
