//! Uniform box priors and the logit reparameterization that maps them onto
//! an unconstrained space.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Fraction of each range that boundary values are pulled inward by.
pub const EPSILON_CLIP: f64 = 1e-6;

/// A point `(s0, θ)` in original simulator units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl std::ops::Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub names: Vec<String>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub epsilon_clip: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::autodiff::tape::sigmoid(x)
}

impl PriorSpec {
    pub fn new<S: Into<String>>(dims: impl IntoIterator<Item = (S, f64, f64)>) -> Result<Self> {
        let (mut names, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new());
        for (n, l, h) in dims {
            names.push(n.into());
            lo.push(l);
            hi.push(h);
        }
        let spec = Self {
            names,
            lo,
            hi,
            epsilon_clip: EPSILON_CLIP,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() {
            return Err(Error::invalid("prior needs at least one dimension"));
        }
        if self.lo.len() != self.names.len() || self.hi.len() != self.names.len() {
            return Err(Error::invalid("prior names/lo/hi lengths differ"));
        }
        for i in 0..self.dim() {
            if !(self.lo[i].is_finite() && self.hi[i].is_finite() && self.lo[i] < self.hi[i]) {
                return Err(Error::invalid(format!(
                    "dimension {} ({}) needs finite lo < hi, got [{}, {}]",
                    i, self.names[i], self.lo[i], self.hi[i]
                )));
            }
        }
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip < 0.5) {
            return Err(Error::invalid("epsilon_clip must lie in (0, 0.5)"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn midpoint(&self) -> ParamVector {
        ParamVector(
            (0..self.dim())
                .map(|i| 0.5 * (self.lo[i] + self.hi[i]))
                .collect(),
        )
    }

    /// True when both specs describe the same box (names and bounds).
    pub fn same_ranges(&self, other: &PriorSpec) -> bool {
        self.names == other.names && self.lo == other.lo && self.hi == other.hi
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::invalid(format!(
                "expected {} dimensions, got {n}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Position inside the range as a fraction, clipped to
    /// `[epsilon_clip, 1 - epsilon_clip]`.
    fn clipped_fraction(&self, i: usize, v: f64) -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{} = {v}", self.names[i])));
        }
        let u = (v - self.lo[i]) / self.width(i);
        let eps = self.epsilon_clip;
        if u < -eps || u > 1.0 + eps {
            return Err(Error::OutOfRange {
                dim: i,
                name: self.names[i].clone(),
                value: v,
                lo: self.lo[i],
                hi: self.hi[i],
            });
        }
        Ok(u.clamp(eps, 1.0 - eps))
    }

    pub fn to_unbounded(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let u = self.clipped_fraction(i, v)?;
                Ok((u / (1.0 - u)).ln())
            })
            .collect()
    }

    pub fn to_bounded(&self, z: &[f64]) -> ParamVector {
        debug_assert_eq!(z.len(), self.dim());
        ParamVector(
            z.iter()
                .enumerate()
                .map(|(i, &zi)| (self.lo[i] + self.width(i) * sigmoid(zi)).min(self.hi[i]))
                .collect(),
        )
    }

    /// Density of the uniform prior pushed through `to_unbounded`.
    pub fn log_prior_unbounded(&self, z: &[f64]) -> f64 {
        z.iter().map(|&zi| -softplus(-zi) - softplus(zi)).sum()
    }

    /// `log |det ∂z/∂x|` of `to_unbounded` at `x`.
    pub fn log_abs_det_to_unbounded(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let mut total = 0.0;
        for (i, &v) in x.iter().enumerate() {
            let u = self.clipped_fraction(i, v)?;
            total -= self.width(i).ln() + u.ln() + (1.0 - u).ln();
        }
        Ok(total)
    }

    /// Affine map from `[0, 1]^d` onto the box.
    pub fn denormalize(&self, u: &[f64]) -> ParamVector {
        ParamVector(
            u.iter()
                .enumerate()
                .map(|(i, &ui)| self.lo[i] + self.width(i) * ui)
                .collect(),
        )
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.lo[i]) / self.width(i))
            .collect()
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<ParamVector> {
        (0..n)
            .map(|_| {
                ParamVector(
                    (0..self.dim())
                        .map(|i| self.lo[i] + self.width(i) * rng.random::<f64>())
                        .collect(),
                )
            })
            .collect()
    }

    /// Row-wise `to_unbounded`.
    pub fn to_unbounded_rows(&self, xs: &[ParamVector]) -> Result<Matrix> {
        let mut out = Array2::zeros((xs.len(), self.dim()));
        for (r, x) in xs.iter().enumerate() {
            for (c, z) in self.to_unbounded(x)?.into_iter().enumerate() {
                out[[r, c]] = z;
            }
        }
        Ok(out)
    }

    pub fn to_bounded_rows(&self, zs: &Matrix) -> Vec<ParamVector> {
        zs.rows()
            .into_iter()
            .map(|row| self.to_bounded(&row.to_vec()))
            .collect()
    }
}
