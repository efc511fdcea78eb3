//! Choosing among policies by scoring their certificates against a belief
//! over the object's initial state and parameters.
//!
//! The score of a certificate is the Monte-Carlo estimate of
//! `E_{x ~ belief}[log q(x | r*)]` with `q` expressed as a density over the
//! bounded box, so certificates over the same ranges are comparable.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::inference::PosteriorCertificate;
use crate::priors::{ParamVector, PriorSpec};
use crate::rng::{stream, tag};

/// Monte-Carlo samples per score.
pub const DEFAULT_SCORE_SAMPLES: usize = 256;

/// Minimum acceptance rate of the truncated-normal sampler.
const MIN_ACCEPTANCE: f64 = 1e-3;

/// Axis-aligned Gaussian belief in normalized `[0, 1]` coordinates,
/// truncated to the unit box and rescaled to the prior ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct Belief {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub spec: PriorSpec,
}

impl Belief {
    pub fn new(spec: PriorSpec, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != spec.dim() || variance.len() != spec.dim() {
            return Err(Error::invalid(format!(
                "belief needs {} means and variances, got {} and {}",
                spec.dim(),
                mean.len(),
                variance.len()
            )));
        }
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!(
                "belief variance must be positive, got {v}"
            )));
        }
        if let Some(m) = mean.iter().find(|m| !m.is_finite()) {
            return Err(Error::invalid(format!(
                "belief mean must be finite, got {m}"
            )));
        }
        Ok(Self {
            mean,
            variance,
            spec,
        })
    }

    /// Same mean and variance in every dimension.
    pub fn isotropic(spec: PriorSpec, mean: f64, variance: f64) -> Result<Self> {
        let d = spec.dim();
        Self::new(spec, vec![mean; d], vec![variance; d])
    }
}

/// `n` draws from `belief`, each dimension rejection-sampled into `[0, 1]`
/// before rescaling to the prior box.
pub fn sample_belief<R: Rng + ?Sized>(
    belief: &Belief,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ParamVector>> {
    if n == 0 {
        return Err(Error::invalid("need at least one belief sample"));
    }
    let normals: Vec<Normal<f64>> = belief
        .mean
        .iter()
        .zip(&belief.variance)
        .map(|(&m, &v)| Normal::new(m, v.sqrt()).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(n);
    let mut u = vec![0.0; normals.len()];
    for _ in 0..n {
        for (i, normal) in normals.iter().enumerate() {
            let mut tries = 0usize;
            u[i] = loop {
                tries += 1;
                let v = normal.sample(rng);
                if (0.0..=1.0).contains(&v) {
                    break v;
                }
                if tries as f64 * MIN_ACCEPTANCE > 1.0 {
                    return Err(Error::DegenerateBelief(format!(
                        "dimension {i} accepts fewer than 1 in {:.0} draws",
                        1.0 / MIN_ACCEPTANCE
                    )));
                }
            };
        }
        out.push(belief.spec.denormalize(&u));
    }
    Ok(out)
}

/// Mean of `log q(x | r*)` over `samples`, as a density over the bounded box.
pub fn cross_entropy_score(cert: &PosteriorCertificate, samples: &[ParamVector]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot score an empty sample set"));
    }
    let z = cert.spec.to_unbounded_rows(samples)?;
    let lq = cert.log_prob_unbounded(&z)?;
    let mut total = 0.0;
    for (x, l) in samples.iter().zip(lq) {
        total += l + cert.spec.log_abs_det_to_unbounded(x)?;
    }
    Ok(total / samples.len() as f64)
}

fn check_ranges(certs: &[PosteriorCertificate], spec: &PriorSpec) -> Result<()> {
    if certs.is_empty() {
        return Err(Error::invalid("need at least one certificate"));
    }
    for c in certs {
        if !c.spec.same_ranges(spec) {
            return Err(Error::invalid(format!(
                "certificate for {} covers different ranges than the belief",
                c.policy_id
            )));
        }
    }
    Ok(())
}

/// Index of the best score; ties go to the smallest id.
fn argmax(scores: &[f64], ids: &[&str]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        let better = scores[i] > scores[best] || (scores[i] == scores[best] && ids[i] < ids[best]);
        if better {
            best = i;
        }
    }
    best
}

/// Policy id of the certificate with the highest score on one shared set of
/// `n_samples` belief draws.
pub fn select_task<R: Rng + ?Sized>(
    certs: &[PosteriorCertificate],
    belief: &Belief,
    n_samples: usize,
    rng: &mut R,
) -> Result<String> {
    check_ranges(certs, &belief.spec)?;
    let samples = sample_belief(belief, n_samples, rng)?;
    let scores = certs
        .iter()
        .map(|c| cross_entropy_score(c, &samples))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<&str> = certs.iter().map(|c| c.policy_id.as_str()).collect();
    Ok(ids[argmax(&scores, &ids)].to_string())
}

/// How the per-trial beliefs are generated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum BeliefDraw {
    /// Every trial uses the belief `N(center, spread)` itself.
    Fixed,
    /// Each trial's belief mean is a draw from the truncated
    /// `N(center, spread)`; the belief around it has `variance`.
    Sampled { variance: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub n_beliefs: usize,
    pub center: f64,
    pub spread: f64,
    pub beliefs: BeliefDraw,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n_beliefs: 1000,
            center: 0.5,
            spread: 0.7,
            beliefs: BeliefDraw::Sampled { variance: 0.01 },
            n_samples: DEFAULT_SCORE_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_reward: f64,
    pub std_err: f64,
    pub n: usize,
}

/// One trial: the belief's ground truth and, per method, the task chosen
/// and the reward it earned.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub belief_mean: Vec<f64>,
    pub ground_truth: ParamVector,
    pub choices: Vec<String>,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// `learned`, `random`, then `always-<id>` per certificate in id order.
    pub methods: Vec<String>,
    pub summaries: Vec<MethodSummary>,
    pub trials: Vec<Trial>,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl SelectionResult {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    fn column(&self, method: &str) -> Option<Vec<f64>> {
        let k = self.methods.iter().position(|m| m == method)?;
        Some(self.trials.iter().map(|t| t.rewards[k]).collect())
    }

    /// Mean and standard error of the per-trial reward difference `a - b`.
    pub fn paired_difference(&self, a: &str, b: &str) -> Option<(f64, f64)> {
        let (xa, xb) = (self.column(a)?, self.column(b)?);
        let d: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x - y).collect();
        Some(mean_and_se(&d))
    }

    /// Standard error of `mean(a) - mean(b)` had the two columns been
    /// independent samples.
    pub fn unpaired_std_err(&self, a: &str, b: &str) -> Option<f64> {
        let (sa, sb) = (self.summary(a)?, self.summary(b)?);
        Some((sa.std_err.powi(2) + sb.std_err.powi(2)).sqrt())
    }

    /// Columns `method,mean_reward,std_err,n`, one row per method.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.summaries {
            w.serialize(s).map_err(std::io::Error::from)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-trial choices: `trial,<method>...`.
    pub fn write_choices_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["trial".to_string()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header).map_err(std::io::Error::from)?;
        for (i, t) in self.trials.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(t.choices.iter().cloned());
            w.write_record(&row).map_err(std::io::Error::from)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Compare learned selection against random and fixed choices.
///
/// Every method sees the same belief, ground truth and rollout stream in a
/// given trial, so differences between methods are paired.
pub fn run_selection_experiment(
    certs: &[PosteriorCertificate],
    env: &dyn Environment,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    if config.n_beliefs == 0 {
        return Err(Error::invalid("need at least one belief"));
    }
    let spec = env.spec().prior.clone();
    check_ranges(certs, &spec)?;
    let mut certs: Vec<&PosteriorCertificate> = certs.iter().collect();
    certs.sort_by(|a, b| a.policy_id.cmp(&b.policy_id));
    if certs.windows(2).any(|w| w[0].policy_id == w[1].policy_id) {
        return Err(Error::invalid("two certificates share a policy id"));
    }
    for c in &certs {
        env.spec().check_policy(&c.policy_id)?;
    }
    let owned: Vec<PosteriorCertificate> = certs.iter().map(|c| (*c).clone()).collect();
    let ids: Vec<String> = owned.iter().map(|c| c.policy_id.clone()).collect();
    let mut methods = vec!["learned".to_string(), "random".to_string()];
    methods.extend(ids.iter().map(|id| format!("always-{id}")));
    let outer = Belief::isotropic(spec.clone(), config.center, config.spread)?;
    let seed = config.seed;

    let trials = (0..config.n_beliefs)
        .into_par_iter()
        .map(|b| -> Result<Trial> {
            let b = b as u64;
            let mut belief_rng = stream(seed, &[tag::BELIEF, b]);
            let belief = match config.beliefs {
                BeliefDraw::Fixed => outer.clone(),
                BeliefDraw::Sampled { variance } => {
                    let center = sample_belief(&outer, 1, &mut belief_rng)?
                        .pop()
                        .expect("one draw");
                    Belief::new(
                        spec.clone(),
                        spec.normalize(&center),
                        vec![variance; spec.dim()],
                    )?
                }
            };
            let truth = sample_belief(&belief, 1, &mut belief_rng)?
                .pop()
                .expect("one draw");

            let mut choice_rng = stream(seed, &[tag::CHOICE, b]);
            let learned = select_task(&owned, &belief, config.n_samples, &mut choice_rng)?;
            let random = ids[choice_rng.random_range(0..ids.len())].clone();
            let mut choices = vec![learned, random];
            choices.extend(ids.iter().cloned());

            let rewards = choices
                .iter()
                .map(|policy| env.rollout(policy, &truth, &mut stream(seed, &[tag::EXEC, b])))
                .collect::<Result<Vec<_>>>()?;
            Ok(Trial {
                belief_mean: belief.mean,
                ground_truth: truth,
                choices,
                rewards,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summaries = methods
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let xs: Vec<f64> = trials.iter().map(|t| t.rewards[k]).collect();
            let (mean_reward, std_err) = mean_and_se(&xs);
            MethodSummary {
                method: m.clone(),
                mean_reward,
                std_err,
                n: xs.len(),
            }
        })
        .collect();
    Ok(SelectionResult {
        methods,
        summaries,
        trials,
    })
}
