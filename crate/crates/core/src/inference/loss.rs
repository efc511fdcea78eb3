//! Training objectives for the conditional flow.
//!
//! The atomic loss scores every batch element `j` against an atom set made of
//! its own `z_j` and `K - 1` other inputs from the batch, all conditioned on
//! `r_j`. The score `log q(z | r_j) - log p(z)` divides out the prior, so the
//! softmax over atoms targets the prior-based posterior whatever proposal
//! produced the batch.

use ndarray::Array2;
use rand::seq::index;

use super::discover::LossKind;
use crate::autodiff::{Matrix, SumAxis, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::priors::PriorSpec;
use crate::rng::SimRng;

/// For each of `batch` elements, `atoms - 1` distinct other indices drawn
/// uniformly without replacement.
pub fn draw_atoms(batch: usize, atoms: usize, rng: &mut SimRng) -> Result<Vec<Vec<usize>>> {
    if atoms < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 atoms, got {atoms}"
        )));
    }
    if atoms > batch {
        return Err(Error::invalid(format!(
            "{atoms} atoms exceed batch size {batch}"
        )));
    }
    Ok((0..batch)
        .map(|j| {
            index::sample(rng, batch - 1, atoms - 1)
                .into_iter()
                .map(|i| if i >= j { i + 1 } else { i })
                .collect()
        })
        .collect())
}

/// `mean_j [ logsumexp_k s_jk - s_j0 ]` over equally shaped score columns,
/// column 0 holding the true atom.
fn softmax_loss(tape: &mut Tape, scores: &[Var]) -> Result<Var> {
    let lse = tape.logsumexp(scores)?;
    let per = tape.sub(lse, scores[0])?;
    tape.mean(per)
}

/// Atomic loss for a `B x K` score table whose first column holds the true
/// atom.
pub fn atomic_loss_from_scores(scores: &Matrix) -> Result<f64> {
    if scores.ncols() < 2 {
        return Err(Error::invalid("need at least 2 atoms"));
    }
    let mut tape = Tape::new();
    let cols: Vec<Var> = scores
        .columns()
        .into_iter()
        .map(|c| tape.constant(c.to_owned().insert_axis(ndarray::Axis(1))))
        .collect();
    softmax_loss(&mut tape, &cols)?;
    tape.forward(&[])
}

/// Record the atomic loss on `tape`.
///
/// All `K` atom slots go through the flow as one stacked `B·K`-row batch,
/// slot-major, so the true atoms occupy the first `B` rows.
pub fn build_atomic_loss(
    tape: &mut Tape,
    model: &FlowModel,
    params: &[Var],
    z: &Matrix,
    rewards: &[f64],
    log_prior: &[f64],
    atoms: &[Vec<usize>],
) -> Result<Var> {
    let b = z.nrows();
    if atoms.len() != b || rewards.len() != b || log_prior.len() != b {
        return Err(Error::invalid(
            "batch, rewards, priors and atom sets differ in length",
        ));
    }
    let k = atoms[0].len() + 1;
    if atoms.iter().any(|a| a.len() + 1 != k) {
        return Err(Error::invalid("atom sets differ in size"));
    }
    let pick = |row: usize| {
        let (slot, j) = (row / b, row % b);
        if slot == 0 {
            j
        } else {
            atoms[j][slot - 1]
        }
    };
    let zk = Array2::from_shape_fn((b * k, z.ncols()), |(r, c)| z[[pick(r), c]]);
    let prior = Array2::from_shape_fn((b * k, 1), |(r, _)| log_prior[pick(r)]);
    let conds: Vec<f64> = (0..b * k).map(|r| rewards[r % b]).collect();
    let lp = model.build_log_prob(tape, params, zk, &conds)?;
    let prior = tape.constant(prior);
    let scores = tape.sub(lp, prior)?;
    let lse = tape.logsumexp_blocks(&[scores], k)?;
    let lse_total = tape.sum(lse, SumAxis::All);
    let first = Array2::from_shape_fn((b * k, 1), |(r, _)| if r < b { 1.0 } else { 0.0 });
    let first = tape.constant(first);
    let true_scores = tape.mul(scores, first)?;
    let true_total = tape.sum(true_scores, SumAxis::All);
    let diff = tape.sub(lse_total, true_total)?;
    tape.scale(diff, 1.0 / b as f64)
}

/// Plain maximum likelihood on the proposal samples: `-mean log q(z_j | r_j)`.
pub fn build_mle_loss(
    tape: &mut Tape,
    model: &FlowModel,
    params: &[Var],
    z: &Matrix,
    rewards: &[f64],
) -> Result<Var> {
    let lp = model.build_log_prob(tape, params, z.clone(), rewards)?;
    let m = tape.mean(lp)?;
    tape.scale(m, -1.0)
}

/// Value of the atomic loss for a batch, drawing atom sets from `rng`.
pub fn atomic_apt_loss(
    model: &FlowModel,
    z: &Matrix,
    rewards: &[f64],
    atoms: usize,
    spec: &PriorSpec,
    rng: &mut SimRng,
) -> Result<f64> {
    let sets = draw_atoms(z.nrows(), atoms, rng)?;
    let log_prior: Vec<f64> = z
        .rows()
        .into_iter()
        .map(|r| spec.log_prior_unbounded(r.as_slice().expect("standard layout")))
        .collect();
    let mut tape = Tape::new();
    let vars = model.declare_parameters(&mut tape);
    build_atomic_loss(&mut tape, model, &vars, z, rewards, &log_prior, &sets)?;
    tape.forward(&model.parameters())
}

/// Loss and gradient w.r.t. `params` (laid out as `model.parameters()`).
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    kind: LossKind,
    model: &FlowModel,
    params: &[Matrix],
    z: &Matrix,
    rewards: &[f64],
    log_prior: &[f64],
    atoms: Option<&[Vec<usize>]>,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Matrix>>)> {
    let mut tape = Tape::new();
    let vars = model.declare_parameters(&mut tape);
    match kind {
        LossKind::Apt => {
            let sets = atoms.ok_or_else(|| Error::invalid("atomic loss needs atom sets"))?;
            build_atomic_loss(&mut tape, model, &vars, z, rewards, log_prior, sets)?;
        }
        LossKind::Mle => {
            build_mle_loss(&mut tape, model, &vars, z, rewards)?;
        }
    }
    let loss = tape.forward(params)?;
    let grads = if with_grad && loss.is_finite() {
        Some(tape.backward()?)
    } else {
        None
    };
    Ok((loss, grads))
}
