use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::RoundDataset;
use super::discover::{DiscoverConfig, LossKind};
use super::loss::{draw_atoms, loss_and_grad};
use crate::autodiff::{adam_step, AdamHyper, AdamState, Matrix};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, RewardNorm};
use crate::priors::PriorSpec;
use crate::rng::{stream, SimRng};

const MAX_LR_HALVINGS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean minibatch loss over the last completed epoch.
    pub train_loss: f64,
    /// Best validation loss; the returned parameters achieve it.
    pub val_loss: f64,
    pub epochs: usize,
    pub lr_halvings: usize,
}

struct Split {
    z: Matrix,
    rewards: Vec<f64>,
    log_prior: Vec<f64>,
}

impl Split {
    fn gather(all: &Split, idx: &[usize]) -> Split {
        Split {
            z: all.z.select(Axis(0), idx),
            rewards: idx.iter().map(|&i| all.rewards[i]).collect(),
            log_prior: idx.iter().map(|&i| all.log_prior[i]).collect(),
        }
    }

    fn len(&self) -> usize {
        self.rewards.len()
    }
}

/// Partition `0..n` into minibatches of `size`, folding a trailing batch
/// smaller than `min` into its predecessor.
fn minibatches(order: &[usize], size: usize, min: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min) {
        let tail = out.pop().expect("len > 1");
        out.last_mut().expect("len > 0").extend(tail);
    }
    out
}

fn evaluate(
    kind: LossKind,
    model: &FlowModel,
    params: &[Matrix],
    data: &Split,
    atoms: &Option<Vec<Vec<usize>>>,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Matrix>>)> {
    loss_and_grad(
        kind,
        model,
        params,
        &data.z,
        &data.rewards,
        &data.log_prior,
        atoms.as_deref(),
        with_grad,
    )
}

/// Fit `model` to the accumulated dataset with Adam and early stopping.
///
/// The reward standardization is recomputed from the whole dataset first.
/// On success `model` holds the parameters with the best validation loss
/// (possibly its incoming parameters). A non-finite loss or gradient halves
/// the learning rate and restarts the epoch; after three halvings the round
/// is aborted and `model` is left as it came in.
pub fn train_round(
    model: &mut FlowModel,
    dataset: &RoundDataset,
    config: &DiscoverConfig,
    spec: &PriorSpec,
    round: usize,
    rng: &mut SimRng,
) -> Result<TrainOutcome> {
    let n = dataset.len();
    let kind = config.loss;
    let min_batch = match kind {
        LossKind::Apt => config.atoms,
        LossKind::Mle => 1,
    };
    let n_val = ((n as f64 * config.validation_fraction).round() as usize).max(min_batch);
    if n < n_val + min_batch {
        return Err(Error::invalid(format!(
            "dataset of {n} is too small for validation and {min_batch}-element batches"
        )));
    }

    let mut work = model.clone();
    work.reward_norm = RewardNorm::from_rewards(&dataset.rewards());

    let all = Split {
        z: dataset.z_matrix(),
        rewards: dataset.rewards(),
        log_prior: dataset
            .entries()
            .iter()
            .map(|e| spec.log_prior_unbounded(&e.z))
            .collect(),
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val = Split::gather(&all, val_idx);
    let train = Split::gather(&all, train_idx);

    // fixed validation atoms keep epoch-to-epoch comparisons exact
    let mut val_rng = stream(rng.random(), &[]);
    let val_atoms = match kind {
        LossKind::Apt => Some(draw_atoms(val.len(), config.atoms, &mut val_rng)?),
        LossKind::Mle => None,
    };

    let mut params = work.parameters();
    let mut lr = config.learning_rate;
    let mut adam = AdamState::new(&params, AdamHyper::with_lr(lr));
    let (initial_val, _) = evaluate(kind, &work, &params, &val, &val_atoms, false)?;
    let mut best = (
        if initial_val.is_finite() {
            initial_val
        } else {
            f64::INFINITY
        },
        params.clone(),
    );
    let mut since_best = 0;
    let mut halvings = 0;
    let mut train_loss = f64::NAN;
    let mut epochs = 0;

    let mut train_order: Vec<usize> = (0..train.len()).collect();
    while epochs < config.max_epochs {
        let snapshot = (params.clone(), adam.clone());
        train_order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut failure: Option<String> = None;
        for batch_idx in minibatches(&train_order, config.batch_size, min_batch) {
            let batch = Split::gather(&train, &batch_idx);
            let atoms = match kind {
                LossKind::Apt => Some(draw_atoms(batch.len(), config.atoms, rng)?),
                LossKind::Mle => None,
            };
            let (loss, grads) = evaluate(kind, &work, &params, &batch, &atoms, true)?;
            if !loss.is_finite() {
                failure = Some(format!("non-finite loss {loss}"));
                break;
            }
            match adam_step(
                &mut params,
                &grads.expect("finite loss has gradients"),
                &mut adam,
            ) {
                Ok(()) => {}
                Err(e @ Error::NonFiniteGradient { .. }) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        if let Some(reason) = failure {
            halvings += 1;
            if halvings > MAX_LR_HALVINGS {
                return Err(Error::TrainingAborted {
                    round,
                    reason: format!("{reason} after {MAX_LR_HALVINGS} learning-rate halvings"),
                });
            }
            lr *= 0.5;
            params = snapshot.0;
            adam = snapshot.1;
            adam.hyper.learning_rate = lr;
            continue;
        }
        epochs += 1;
        train_loss = total / count as f64;

        let (val_loss, _) = evaluate(kind, &work, &params, &val, &val_atoms, false)?;
        if val_loss.is_finite() && val_loss < best.0 {
            best = (val_loss, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    work.set_parameters(&best.1)?;
    *model = work;
    Ok(TrainOutcome {
        train_loss,
        val_loss: best.0,
        epochs,
        lr_halvings: halvings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn short_tail_batches_are_merged() {
        let order: Vec<usize> = (0..23).collect();
        let b = minibatches(&order, 10, 5);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 13);
        let b = minibatches(&order, 10, 2);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 10, 3]);
        assert_eq!(minibatches(&order[..4], 10, 5), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn split_gathers_rows() {
        let all = Split {
            z: Array2::from_shape_fn((4, 2), |(r, c)| (r * 10 + c) as f64),
            rewards: vec![0.0, 1.0, 2.0, 3.0],
            log_prior: vec![-1.0, -2.0, -3.0, -4.0],
        };
        let s = Split::gather(&all, &[2, 0]);
        assert_eq!(s.z[[0, 1]], 21.0);
        assert_eq!(s.rewards, vec![2.0, 0.0]);
        assert_eq!(s.log_prior, vec![-3.0, -1.0]);
    }
}
