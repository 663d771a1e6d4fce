//! Distributions over ordered masks.
//!
//! An ordered mask over `K` dimensions is a vector of ones followed by zeros
//! (hard) or its nonincreasing relaxation (soft). The prior is a
//! [`BernoulliChain`]; the variational posterior is the Downhill distribution
//! parameterised by [`DownhillParams`].

mod chain;
mod downhill;
mod mask;
mod tail;
mod width;

pub use chain::BernoulliChain;
pub use downhill::{
    downhill_hard_sample, downhill_log_density, downhill_log_density_increments, downhill_sample, keep_probabilities,
    keep_probabilities_from_beta, kl_mask, kl_mask_posterior_prior, sample_gumbel, DownhillDraw, DownhillParams,
    LOGIT_CLAMP,
};
pub use mask::{MaskKind, OrderedMask};
pub use tail::{fixed_rate_tail_sample, TailDistribution};
pub use width::{make_width_plan, LayerWidth, WidthPlan};
