//! Voting-to-stay: a frozen epoch of per-batch, per-feature-map votes
//! selects one head per group at every attention site.

pub mod epoch;
pub mod votes;

pub use crate::harness::finetune_after_prune;
pub use epoch::{
    classifier_probs_value, run_voting_epoch, site_pattern_scores, LayerReport, PruneReport, VotingOptions,
};
pub use votes::{batch_votes, score_sum_vote, vote, SiteLedger, VoteVector};
