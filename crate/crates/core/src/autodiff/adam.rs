use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[Matrix], hyper: AdamHyper) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.raw_dim())).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// A non-finite gradient aborts before any parameter or moment is touched.
pub fn adam_step(params: &mut [Matrix], grads: &[Matrix], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.raw_dim() != g.raw_dim() || p.raw_dim() != state.first_moment[k].raw_dim() {
            return Err(Error::Shape {
                node: k,
                op: "adam",
                detail: format!("param {:?} grad {:?}", p.dim(), g.dim()),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { param: k });
        }
    }

    state.step_count += 1;
    let AdamHyper {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.hyper;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        Zip::from(p)
            .and(&grads[k])
            .and(&mut state.first_moment[k])
            .and(&mut state.second_moment[k])
            .for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            });
    }
    Ok(())
}
