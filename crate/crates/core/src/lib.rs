//! Reward-conditioned posteriors over simulator conditions.
//!
//! Given a fixed policy and a parameterized simulator, [`inference`] fits a
//! conditional masked autoregressive [`flow`] over initial conditions and
//! environment parameters under which the policy achieves high reward. The
//! fitted posterior, packaged as a [`PosteriorCertificate`], can then score
//! a belief over an object to pick which policy to deploy ([`selection`]).

pub mod autodiff;
pub mod error;
pub mod flow;
pub mod priors;
pub mod rng;

pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowModel, RewardNorm};
pub use priors::{ParamVector, PriorSpec};
pub mod envs;
pub mod inference;
pub mod selection;
pub mod store;

pub use inference::{DiscoverConfig, PosteriorCertificate};
