//! Bayesian nested layers.
//!
//! Weights carry multiplicative Gaussian noise `w = theta * (1 + sqrt(alpha) eps)`
//! and are sampled through the local reparameterisation: each output unit is
//! drawn from `N(gamma, delta)` with `gamma = h . theta` and
//! `delta = h^2 . (alpha theta^2)`. Masked layers multiply their output units by
//! an ordered mask broadcast over contiguous groups ([`GroupMap`]).

mod conv;
mod dense;
mod group;
mod kl;
mod norm;

pub use conv::{channel_sums, forward_conv_train, ConvCache, ConvGeometry, VariationalConv};
pub use dense::{
    forward_dense_train, DenseCache, DenseGrads, EvalMode, ForwardBatch, GaussianBias, LayerKl, VariationalDense,
    LOG_ALPHA_MAX, LOG_ALPHA_MIN,
};
pub use group::{GroupMap, OrderingUnit};
pub use kl::{
    grouped_phi2, l0_reduction, neg_kl_weight_approx, neg_kl_weight_approx_derivative, neg_kl_weight_mc,
    phi2_bruteforce, phi2_full, weight_kl, BRUTE_FORCE_LIMIT,
};
pub use norm::{BatchNorm, NormAccumulator, NormCache};
