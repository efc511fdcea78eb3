use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::Result;
use crate::priors::{ParamVector, PriorSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub param: ParamVector,
    pub z: Vec<f64>,
    pub reward: f64,
    pub round: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

/// Append-only accumulation of `(s0/θ, reward)` pairs across rounds.
#[derive(Clone, Debug, Default)]
pub struct RoundDataset {
    entries: Vec<Entry>,
}

impl RoundDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Add one round of rollouts. Nothing is appended if any input fails to
    /// map into the unbounded space.
    pub fn append(
        &mut self,
        round: usize,
        pairs: Vec<(ParamVector, f64)>,
        spec: &PriorSpec,
    ) -> Result<()> {
        let mut staged = Vec::with_capacity(pairs.len());
        for (param, reward) in pairs {
            let z = spec.to_unbounded(&param)?;
            staged.push(Entry {
                param,
                z,
                reward,
                round,
            });
        }
        self.entries.extend(staged);
        Ok(())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.reward).collect()
    }

    pub fn z_matrix(&self) -> Matrix {
        let d = self.entries.first().map_or(0, |e| e.z.len());
        Matrix::from_shape_fn((self.entries.len(), d), |(r, c)| self.entries[r].z[c])
    }

    pub fn stats(&self) -> Option<RewardStats> {
        if self.entries.is_empty() {
            return None;
        }
        let rewards = self.rewards();
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(RewardStats { mean, std, max })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_is_monotone_and_maps_to_unbounded() {
        let spec = PriorSpec::new([("a", 0.0, 2.0), ("b", -1.0, 1.0)]).unwrap();
        let mut d = RoundDataset::new();
        d.append(
            1,
            vec![(vec![1.0, 0.0].into(), 0.5), (vec![0.5, 0.5].into(), 1.0)],
            &spec,
        )
        .unwrap();
        assert_eq!(d.len(), 2);
        d.append(2, vec![(vec![1.5, -0.5].into(), 0.0)], &spec)
            .unwrap();
        assert_eq!(d.len(), 3);
        for e in d.entries() {
            assert_eq!(e.z, spec.to_unbounded(&e.param).unwrap());
        }
        assert_eq!(d.entries()[2].round, 2);
        let s = d.stats().unwrap();
        assert_eq!(s.max, 1.0);
        assert!((s.mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn failed_append_leaves_dataset_untouched() {
        let spec = PriorSpec::new([("a", 0.0, 1.0)]).unwrap();
        let mut d = RoundDataset::new();
        let bad = vec![(vec![0.5].into(), 1.0), (vec![3.0].into(), 1.0)];
        assert!(d.append(1, bad, &spec).is_err());
        assert!(d.is_empty());
        assert!(d.stats().is_none());
    }
}
