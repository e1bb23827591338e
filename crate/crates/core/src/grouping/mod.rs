//! Hidden-unit discovery (K-means over pooled head feature maps), cross-batch
//! group stabilization and the group-constrained loss in its continuous and
//! categorical forms.

pub mod config;
pub mod dump;
pub mod kmeans;
pub mod loss;
pub mod matching;
pub mod pool;
pub mod state;

pub use config::{GroupConfig, LossVariant, VoteMode};
pub use kmeans::{discover_hidden_units, lloyd_step, partition_cost, Clustering, KMeansOptions};
pub use loss::{
    categorical_scores, classifier_probs, combined_phi, diversity_value, gct_loss_categorical, gct_loss_continuous,
    homogeneity_value, pattern_score, pattern_scores, phi, ContinuousSite, GctTerms,
};
pub use matching::match_groups;
pub use pool::{combine_points, combine_vars, pool_feature_maps, pool_tensor, pool_var};
pub use state::{convergence_check, HiddenUnits, SiteUnits};
