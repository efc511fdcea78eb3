//! Sequential refinement of a reward-conditioned posterior.
//!
//! Each round draws simulator inputs from the current proposal, rolls the
//! policy out, appends to the accumulated dataset, refits the flow with the
//! atomic contrastive loss and conditions the next proposal on the best
//! observed reward.

mod dataset;
mod discover;
mod evaluate;
mod loss;
mod train;

pub use dataset::{Entry, RewardStats, RoundDataset};
pub use discover::{
    collect_round, run_discover, select_r_star, DiscoverConfig, FlowProposal, LossKind,
    PosteriorCertificate, Proposal, RStarRule, RoundRecord, RoundSummary,
};
pub use evaluate::{evaluate_posterior, Posterior, PosteriorMetrics, PriorPosterior};
pub use loss::{
    atomic_apt_loss, atomic_loss_from_scores, build_atomic_loss, build_mle_loss, draw_atoms,
    loss_and_grad,
};
pub use train::{train_round, TrainOutcome};
