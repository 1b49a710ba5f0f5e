//! Expected-utility treatment selection.

mod finetune;
mod strategies;
mod utility;

#[cfg(test)]
mod tests;

pub use finetune::{finetune_policy, poisson_score, score_function_gradient, FinetuneConfig, FinetuneReport};
pub use strategies::{
    decide, decide_direct, decide_indirect, decide_joint, decide_joint_with, policy_expected_utility,
    score_candidates, Approach, DecisionConfig, DecisionResult, SearchConfig,
};
pub use utility::{
    exact_gaussian_eu, mc_expected_utility, utility_scalar, utility_trajectory, McEstimate, UtilityConfig,
    UtilityShape,
};

use crate::error::{Error, Result};
use crate::seqgen::{outcome_dists, Mode, ModelParams};
use crate::trajectory::{Context, Channels};

/// Closed-form expected utility of treatment `x` under a parametric model
/// and a Gaussian-bump utility.
pub fn exact_expected_utility(
    params: &ModelParams,
    ctx: &Context,
    x: &Channels<f64>,
    utility: &UtilityConfig,
) -> Result<f64> {
    if params.config.mode != Mode::Parametric {
        return Err(Error::UnsupportedMode {
            op: "exact_expected_utility",
            mode: params.config.mode.as_str(),
        });
    }
    let d = outcome_dists(params, ctx, std::slice::from_ref(x))?.remove(0);
    let s = &params.scaler;
    let mu = d.mean.map(|v| s.unscale_outcome(v));
    let sigma = d.sd.map(|v| v * s.outcome_sd);
    exact_gaussian_eu(&mu, &sigma, utility)
}
