//! Sound lower bounds on a scalar ReLU network over a box, and complete
//! verification by branch and bound over ReLU splits.
//!
//! All bound routines operate on a scalar-output network (see
//! [`Network::margin_network`](crate::nn::Network::margin_network)) whose
//! output is the quantity to keep positive.

mod bab;
mod bounds;
mod crown;
mod pipeline;

pub use bab::{branch_and_bound, BabBudget, BabConfig};
pub use bounds::{interval_bounds, output_interval, LayerBounds, Neuron, SplitState};
pub use crown::{
    alpha_crown, beta_crown_domain, closed_form_inner_min, crown_backward, default_alpha,
    AlphaCrownResult, AscentConfig, BackwardResult, Domain, LinearForm, Relaxation,
};
pub use pipeline::{
    max_safe_perturbation, verify_pipeline, SafeScale, Stage, StageTimes, Status, VerifyConfig,
    VerifyOutcome,
};
