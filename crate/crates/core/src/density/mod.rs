//! Mixture density estimation and treatment balancing weights.

pub mod gmm;
mod linalg;
pub mod logistic;
pub mod weights;

pub use gmm::{fit_gmm, fit_gmm_bic, fit_gmm_with, GmmFit, GmmModel, GmmOptions};
pub use weights::{
    iptw_weights, iptw_weights_for_frame, stabilized_weights, stabilized_weights_for_frame,
    IptwOptions, StabilizedOptions, Threshold, WeightKind, WeightVector,
};
