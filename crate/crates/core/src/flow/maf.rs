use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::made::MadeLayer;
use crate::autodiff::{Matrix, SumAxis, Tape, Var};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub n_layers: usize,
    pub hidden: Vec<usize>,
    pub log_scale_bound: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_layers: 5,
            hidden: vec![50, 50],
            log_scale_bound: 7.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::invalid("flow needs at least one layer"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid(
                "hidden sizes must be non-empty and positive",
            ));
        }
        if !(self.log_scale_bound > 0.0 && self.log_scale_bound.is_finite()) {
            return Err(Error::invalid("log_scale_bound must be positive"));
        }
        Ok(())
    }
}

/// Standardization applied to the raw reward before it enters the conditioner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for RewardNorm {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl RewardNorm {
    /// Sample mean and population standard deviation; a constant reward
    /// set gets unit scale.
    pub fn from_rewards(rewards: &[f64]) -> Self {
        if rewards.is_empty() {
            return Self::default();
        }
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn standardize(&self, r: f64) -> f64 {
        (r - self.mean) / self.std
    }
}

/// Stack of [`MadeLayer`]s with an order reversal between consecutive
/// layers. Density direction maps data `z` to base noise `u ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub dim: usize,
    pub config: FlowConfig,
    pub layers: Vec<MadeLayer>,
    /// `permutations[l]` is applied after layer `l`: column `k` of the next
    /// layer's input is column `permutations[l][k]` of this layer's output.
    pub permutations: Vec<Vec<usize>>,
    pub reward_norm: RewardNorm,
}

fn permute_cols(x: &Matrix, perm: &[usize]) -> Matrix {
    x.select(Axis(1), perm)
}

fn unpermute_cols(x: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Array2::zeros(x.raw_dim());
    for (k, &p) in perm.iter().enumerate() {
        out.column_mut(p).assign(&x.column(k));
    }
    out
}

fn permutation_matrix(perm: &[usize]) -> Matrix {
    let mut p = Array2::zeros((perm.len(), perm.len()));
    for (k, &src) in perm.iter().enumerate() {
        p[[src, k]] = 1.0;
    }
    p
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(dim: usize, config: FlowConfig, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be at least 1"));
        }
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|_| MadeLayer::new(dim, &config.hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        let reversal: Vec<usize> = (0..dim).rev().collect();
        let permutations = vec![reversal; config.n_layers - 1];
        Ok(Self {
            dim,
            config,
            layers,
            permutations,
            reward_norm: RewardNorm::default(),
        })
    }

    pub fn log_scale_bound(&self) -> f64 {
        self.config.log_scale_bound
    }

    /// Copy of every trainable array, layer by layer.
    pub fn parameters(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .flat_map(|l| l.parameters().into_iter().cloned())
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[Matrix]) -> Result<()> {
        let expected: usize = self.layers.iter().map(|l| l.num_parameter_arrays()).sum();
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameter arrays, got {}",
                params.len()
            )));
        }
        let mut it = params.iter();
        for layer in &mut self.layers {
            for slot in layer.parameters_mut() {
                let p = it.next().expect("length checked");
                if p.raw_dim() != slot.raw_dim() {
                    return Err(Error::invalid(format!(
                        "parameter shape {:?} vs {:?}",
                        p.dim(),
                        slot.dim()
                    )));
                }
                slot.assign(p);
            }
        }
        Ok(())
    }

    /// Declare one tape slot per trainable array, in `parameters` order.
    pub fn declare_parameters(&self, tape: &mut Tape) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| l.parameters())
            .map(|p| tape.param(p.nrows(), p.ncols()))
            .collect::<Vec<_>>()
    }

    fn cond_column(&self, conds: &[f64]) -> Matrix {
        Array2::from_shape_fn((conds.len(), 1), |(r, _)| {
            self.reward_norm.standardize(conds[r])
        })
    }

    fn check_inputs(&self, z: &Matrix, conds: &[f64]) -> Result<()> {
        if z.ncols() != self.dim {
            return Err(Error::invalid(format!(
                "expected {} columns, got {}",
                self.dim,
                z.ncols()
            )));
        }
        if z.nrows() != conds.len() {
            return Err(Error::invalid(format!(
                "{} rows but {} conditions",
                z.nrows(),
                conds.len()
            )));
        }
        if let Some(v) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("flow input {v}")));
        }
        if let Some(c) = conds.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("condition {c}")));
        }
        Ok(())
    }

    /// Record `log q(z | cond)` per row (an `n x 1` node) on `tape`.
    pub fn build_log_prob(
        &self,
        tape: &mut Tape,
        params: &[Var],
        z: Matrix,
        conds: &[f64],
    ) -> Result<Var> {
        self.check_inputs(&z, conds)?;
        let n = z.nrows();
        let c = tape.constant(self.cond_column(conds));
        let mut x = tape.constant(z);
        let mut total_logdet: Option<Var> = None;
        let mut offset = 0;
        let bound = self.log_scale_bound();
        for (l, layer) in self.layers.iter().enumerate() {
            let k = layer.num_parameter_arrays();
            let (y, logdet) = layer.build(tape, &params[offset..offset + k], x, c, bound)?;
            offset += k;
            total_logdet = Some(match total_logdet {
                Some(t) => tape.add(t, logdet)?,
                None => logdet,
            });
            x = match self.permutations.get(l) {
                Some(perm) => {
                    let p = tape.constant(permutation_matrix(perm));
                    tape.matmul(y, p)?
                }
                None => y,
            };
        }
        let sq = tape.mul(x, x)?;
        let sq = tape.sum(sq, SumAxis::Rows);
        let base = tape.scale(sq, -0.5)?;
        let norm = tape.constant(Array2::from_elem((n, 1), -0.5 * self.dim as f64 * LN_2PI));
        let base = tape.add(base, norm)?;
        tape.add(base, total_logdet.expect("at least one layer"))
    }

    /// Base-space image `u` of each row of `z` and the accumulated
    /// `log |det ∂u/∂z|` per row.
    pub fn base_image(&self, z: &Matrix, conds: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        self.check_inputs(z, conds)?;
        let c = self.cond_column(conds);
        let bound = self.log_scale_bound();
        let mut x = z.clone();
        let mut total = vec![0.0; z.nrows()];
        for (l, layer) in self.layers.iter().enumerate() {
            let (y, logdet) = layer.forward(&x, &c, bound);
            for (t, d) in total.iter_mut().zip(logdet) {
                *t += d;
            }
            x = match self.permutations.get(l) {
                Some(perm) => permute_cols(&y, perm),
                None => y,
            };
        }
        Ok((x, total))
    }

    pub fn log_prob_batch(&self, z: &Matrix, conds: &[f64]) -> Result<Vec<f64>> {
        let (u, logdet) = self.base_image(z, conds)?;
        let half = 0.5 * self.dim as f64 * LN_2PI;
        Ok(u.rows()
            .into_iter()
            .zip(logdet)
            .map(|(row, ld)| -0.5 * row.dot(&row) - half + ld)
            .collect())
    }

    pub fn log_prob(&self, z: &[f64], cond: f64) -> Result<f64> {
        let m = Array2::from_shape_vec((1, z.len()), z.to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.log_prob_batch(&m, &[cond])?[0])
    }

    /// Map base draws `u` (`n x dim`) to data space under `cond`.
    pub fn sample_from_base(&self, cond: f64, u: &Matrix) -> Result<Matrix> {
        if u.ncols() != self.dim {
            return Err(Error::invalid("base draws have the wrong width"));
        }
        if !cond.is_finite() {
            return Err(Error::NonFinite(format!("condition {cond}")));
        }
        let c = self.cond_column(&vec![cond; u.nrows()]);
        let bound = self.log_scale_bound();
        let mut x = u.clone();
        for l in (0..self.layers.len()).rev() {
            let y = match self.permutations.get(l) {
                Some(perm) => unpermute_cols(&x, perm),
                None => x,
            };
            x = self.layers[l].inverse(&y, &c, bound);
        }
        Ok(x)
    }

    pub fn sample<R: Rng + ?Sized>(&self, cond: f64, n: usize, rng: &mut R) -> Result<Matrix> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let u = Array2::from_shape_simple_fn((n, self.dim), || rng.sample(StandardNormal));
        self.sample_from_base(cond, &u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::randomize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(dim: usize, seed: u64) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FlowConfig {
            n_layers: 3,
            hidden: vec![12, 12],
            log_scale_bound: 7.0,
        };
        FlowModel::new(dim, cfg, &mut rng).unwrap()
    }

    #[test]
    fn identity_init_is_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m2 = FlowModel::new(2, FlowConfig::default(), &mut rng).unwrap();
        assert!((m2.log_prob(&[0.0, 0.0], 3.0).unwrap() + LN_2PI).abs() < 1e-12);
        assert!((m2.log_prob(&[0.0, 0.0], -40.0).unwrap() + 1.837877).abs() < 1e-6);
        let m1 = FlowModel::new(1, FlowConfig::default(), &mut rng).unwrap();
        assert!((m1.log_prob(&[0.0], 0.0).unwrap() + 0.918939).abs() < 1e-6);
    }

    #[test]
    fn zero_dim_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(FlowModel::new(0, FlowConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        assert_eq!(small(3, 5), small(3, 5));
        assert_ne!(small(3, 5), small(3, 6));
    }

    #[test]
    fn tape_and_direct_log_prob_agree() {
        let mut m = small(3, 1);
        randomize(&mut m, 2, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Array2::from_shape_simple_fn((6, 3), || rng.sample::<f64, _>(StandardNormal) * 2.0);
        let conds: Vec<f64> = (0..6).map(|i| i as f64 * 0.7 - 1.0).collect();
        let direct = m.log_prob_batch(&z, &conds).unwrap();
        let mut tape = Tape::new();
        let vars = m.declare_parameters(&mut tape);
        let lp = m.build_log_prob(&mut tape, &vars, z, &conds).unwrap();
        let _ = tape.sum(lp, SumAxis::All);
        tape.forward(&m.parameters()).unwrap();
        let via_tape = tape.value(lp).unwrap();
        for (a, b) in direct.iter().zip(via_tape.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_samples_are_base_draws() {
        let m = small(2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Array2::from_shape_simple_fn((50, 2), || rng.sample(StandardNormal));
        assert_eq!(m.sample_from_base(1.5, &u).unwrap(), u);
    }

    #[test]
    fn sample_then_forward_recovers_base() {
        for seed in 0..5 {
            let mut m = small(4, seed);
            randomize(&mut m, seed + 100, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Array2::from_shape_simple_fn((64, 4), || rng.sample(StandardNormal));
            let z = m.sample_from_base(0.8, &u).unwrap();
            let (back, _) = m.base_image(&z, &vec![0.8; 64]).unwrap();
            let err = (&back - &u).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err <= 1e-9, "seed {seed}: {err}");
        }
    }

    #[test]
    fn log_scale_is_bounded() {
        let mut m = small(3, 4);
        randomize(&mut m, 4, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z =
            Array2::from_shape_simple_fn((40, 3), || rng.sample::<f64, _>(StandardNormal) * 10.0);
        let c = Array2::from_elem((40, 1), 3.0);
        let bound = m.log_scale_bound();
        for layer in &m.layers {
            let out = layer.conditioner(&z, &c, bound);
            assert!(out.log_scale.iter().all(|a| a.abs() <= bound));
        }
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let m = small(2, 0);
        assert!(m.log_prob(&[f64::NAN, 0.0], 0.0).is_err());
        assert!(m.log_prob(&[0.0, 0.0], f64::INFINITY).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.sample(0.0, 0, &mut rng).is_err());
    }

    #[test]
    fn jacobian_log_det_matches_numeric() {
        for d in 1..=3 {
            let mut m = small(d, d as u64);
            randomize(&mut m, 40 + d as u64, 0.5);
            let z0: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.2).collect();
            let cond = 0.9;
            let row = |z: &[f64]| Array2::from_shape_vec((1, d), z.to_vec()).unwrap();
            let (_, logdet) = m.base_image(&row(&z0), &[cond]).unwrap();
            let h = 1e-6;
            let mut jac = Array2::<f64>::zeros((d, d));
            for j in 0..d {
                let mut p = z0.clone();
                p[j] += h;
                let mut q = z0.clone();
                q[j] -= h;
                let (up, _) = m.base_image(&row(&p), &[cond]).unwrap();
                let (uq, _) = m.base_image(&row(&q), &[cond]).unwrap();
                for i in 0..d {
                    jac[[i, j]] = (up[[0, i]] - uq[[0, i]]) / (2.0 * h);
                }
            }
            let numeric = det(&jac).abs().ln();
            assert!(
                (numeric - logdet[0]).abs() <= 1e-5,
                "d={d}: {numeric} vs {}",
                logdet[0]
            );
        }
    }

    fn det(a: &Matrix) -> f64 {
        match a.nrows() {
            1 => a[[0, 0]],
            2 => a[[0, 0]] * a[[1, 1]] - a[[0, 1]] * a[[1, 0]],
            3 => {
                a[[0, 0]] * (a[[1, 1]] * a[[2, 2]] - a[[1, 2]] * a[[2, 1]])
                    - a[[0, 1]] * (a[[1, 0]] * a[[2, 2]] - a[[1, 2]] * a[[2, 0]])
                    + a[[0, 2]] * (a[[1, 0]] * a[[2, 1]] - a[[1, 1]] * a[[2, 0]])
            }
            _ => unimplemented!(),
        }
    }

    #[test]
    fn every_layer_is_autoregressive() {
        for seed in 0..20 {
            let mut m = small(4, seed);
            randomize(&mut m, seed + 1000, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_simple_fn((3, 4), || rng.sample(StandardNormal));
            let c = Array2::from_elem((3, 1), 0.4);
            for layer in &m.layers {
                let base = layer.conditioner(&x, &c, 7.0);
                for j in 0..4 {
                    let mut xp = x.clone();
                    xp.column_mut(j).mapv_inplace(|v| v + 1.7);
                    let pert = layer.conditioner(&xp, &c, 7.0);
                    for i in 0..=j {
                        for r in 0..3 {
                            assert_eq!(base.shift[[r, i]], pert.shift[[r, i]]);
                            assert_eq!(base.log_scale[[r, i]], pert.log_scale[[r, i]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_sample_mean_near_zero() {
        let m = small(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let s = m.sample(0.0, 100_000, &mut rng).unwrap();
        for mean in s.mean_axis(Axis(0)).unwrap() {
            assert!(mean.abs() < 0.02);
        }
    }
}
