//! Direct, indirect and joint treatment selection.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::utility::{mc_expected_utility, utility_trajectory, McEstimate, UtilityConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::seqgen::{most_probable_treatment, sample_outcomes_common, sample_treatments, Mode, ModelParams};
use crate::trajectory::{Channels, Context, D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    Direct,
    Indirect,
    Joint,
}

impl Approach {
    pub fn as_str(self) -> &'static str {
        match self {
            Approach::Direct => "direct",
            Approach::Indirect => "indirect",
            Approach::Joint => "joint",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Approach::Direct),
            "indirect" => Ok(Approach::Indirect),
            "joint" => Ok(Approach::Joint),
            other => Err(Error::InvalidArgument(format!("unknown approach `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionResult {
    /// `D × K` whole units.
    pub chosen_treatment: Channels<f64>,
    pub estimated_eu: f64,
    pub estimated_se: f64,
    pub per_candidate_eu: Vec<f64>,
    pub candidate_index: usize,
    /// Set when the indirect search ran out of evaluations.
    #[serde(default)]
    pub budget_exhausted: bool,
}

/// Budget of the indirect lattice search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Outcome draws per candidate evaluation (shared across candidates).
    pub samples: usize,
    /// Random starting points in addition to the all-zero treatment.
    pub restarts: usize,
    /// Candidate evaluations allowed over the whole search.
    pub max_evaluations: usize,
    /// Per-cell dose cap for random starts.
    pub max_units: u32,
    /// Probability that a cell of a random start is non-zero.
    pub start_density: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            restarts: 1,
            max_evaluations: 10_000,
            max_units: 20,
            start_density: 0.1,
        }
    }
}

fn require_trained(params: &ModelParams) {
    if !params.trained {
        log::warn!("deciding with an untrained model");
    }
}

/// Most probable treatment, scored afterwards with `s` outcome draws.
pub fn decide_direct(
    params: &ModelParams,
    ctx: &Context,
    utility: &UtilityConfig,
    s: usize,
    rng: &mut Rng,
) -> Result<DecisionResult> {
    require_trained(params);
    let x = most_probable_treatment(params, ctx)?;
    let ys = sample_outcomes_common(params, ctx, std::slice::from_ref(&x), s, rng)?.remove(0);
    let eu = mc_expected_utility(&ys, utility)?;
    Ok(DecisionResult {
        chosen_treatment: x,
        estimated_eu: eu.estimate,
        estimated_se: eu.se,
        per_candidate_eu: vec![eu.estimate],
        candidate_index: 0,
        budget_exhausted: false,
    })
}

/// Index of the first maximum.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Expected utilities of candidates, all scored against the same outcome noise.
pub fn score_candidates(
    params: &ModelParams,
    ctx: &Context,
    xs: &[Channels<f64>],
    s: usize,
    utility: &dyn Fn(&Channels<f64>) -> f64,
    rng: &mut Rng,
) -> Result<Vec<McEstimate>> {
    let ys = sample_outcomes_common(params, ctx, xs, s, rng)?;
    ys.iter()
        .map(|draws| McEstimate::from_values(&draws.iter().map(utility).collect::<Vec<_>>()))
        .collect()
}

/// Joint approach with an arbitrary trajectory utility.
pub fn decide_joint_with(
    params: &ModelParams,
    ctx: &Context,
    utility: &dyn Fn(&Channels<f64>) -> f64,
    u: usize,
    s: usize,
    rng: &mut Rng,
) -> Result<DecisionResult> {
    if u == 0 || s == 0 {
        return Err(Error::InvalidArgument("joint approach needs U ≥ 1 and S ≥ 1".into()));
    }
    require_trained(params);
    let mut xs = sample_treatments(params, ctx, u, rng)?;
    let scores = score_candidates(params, ctx, &xs, s, utility, rng)?;
    let eus: Vec<f64> = scores.iter().map(|e| e.estimate).collect();
    let best = argmax(&eus);
    Ok(DecisionResult {
        chosen_treatment: xs.swap_remove(best),
        estimated_eu: eus[best],
        estimated_se: scores[best].se,
        per_candidate_eu: eus,
        candidate_index: best,
        budget_exhausted: false,
    })
}

/// Samples `u` treatments from the model and keeps the one with the highest
/// Monte-Carlo expected utility (`s` outcome draws each, common noise).
pub fn decide_joint(
    params: &ModelParams,
    ctx: &Context,
    utility: &UtilityConfig,
    u: usize,
    s: usize,
    rng: &mut Rng,
) -> Result<DecisionResult> {
    decide_joint_with(params, ctx, &|y| utility_trajectory(y, utility), u, s, rng)
}

fn random_start(k: usize, cfg: &SearchConfig, rng: &mut Rng) -> Channels<f64> {
    let mut x = Channels::zeros(D, k);
    for v in x.as_mut_slice() {
        if rng.gen::<f64>() < cfg.start_density {
            *v = rng.gen_range(1..=cfg.max_units.max(1)) as f64;
        }
    }
    x
}

/// Unconstrained steepest ascent on the integer dose lattice.
///
/// Each sweep scores every ±1 move of a single cell (doses stay ≥ 0) and
/// takes the best strict improvement. Every evaluation reuses one noise
/// stream, so the estimated utility is a fixed function of the treatment.
/// The search starts from the all-zero treatment, then from `restarts`
/// random sparse treatments, and stops once `max_evaluations` candidates
/// have been scored.
pub fn decide_indirect(
    params: &ModelParams,
    ctx: &Context,
    utility: &UtilityConfig,
    search: &SearchConfig,
    rng: &mut Rng,
) -> Result<DecisionResult> {
    if search.samples == 0 {
        return Err(Error::InvalidArgument("search needs at least one outcome sample".into()));
    }
    require_trained(params);
    let k = ctx.horizon();
    let noise = crate::rng::stream(crate::rng::child_seed(rng), "indirect-noise", 0);
    let score = |xs: &[Channels<f64>]| -> Result<Vec<McEstimate>> {
        let mut r = noise.clone();
        let ys = sample_outcomes_common(params, ctx, xs, search.samples, &mut r)?;
        ys.iter().map(|d| mc_expected_utility(d, utility)).collect()
    };

    let mut used = 0usize;
    let mut exhausted = false;
    let mut finals: Vec<(Channels<f64>, McEstimate)> = Vec::new();
    for start in 0..=search.restarts {
        if used >= search.max_evaluations {
            exhausted = true;
            break;
        }
        let mut x = if start == 0 { Channels::zeros(D, k) } else { random_start(k, search, rng) };
        let mut cur = score(std::slice::from_ref(&x))?.remove(0);
        used += 1;
        loop {
            let mut moves = Vec::with_capacity(2 * D * k);
            for i in 0..D * k {
                for delta in [1.0, -1.0] {
                    let v = x.as_slice()[i] + delta;
                    if v >= 0.0 {
                        let mut n = x.clone();
                        n.as_mut_slice()[i] = v;
                        moves.push(n);
                    }
                }
            }
            let room = search.max_evaluations.saturating_sub(used);
            if room < moves.len() {
                exhausted = true;
                moves.truncate(room);
            }
            if moves.is_empty() {
                break;
            }
            let scores = score(&moves)?;
            used += moves.len();
            let best = argmax(&scores.iter().map(|e| e.estimate).collect::<Vec<_>>());
            if scores[best].estimate <= cur.estimate {
                break;
            }
            x = moves.swap_remove(best);
            cur = scores[best];
            if exhausted {
                break;
            }
        }
        finals.push((x, cur));
    }
    if exhausted {
        log::warn!("indirect search stopped after {used} evaluations");
    }
    let eus: Vec<f64> = finals.iter().map(|(_, e)| e.estimate).collect();
    let best = argmax(&eus);
    let (x, e) = finals.swap_remove(best);
    Ok(DecisionResult {
        chosen_treatment: x,
        estimated_eu: e.estimate,
        estimated_se: e.se,
        per_candidate_eu: eus,
        candidate_index: best,
        budget_exhausted: exhausted,
    })
}

/// Approach and budgets for [`decide`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionConfig {
    pub approach: Approach,
    /// Sampled candidates `U` (joint approach).
    pub num_treatments: usize,
    /// Outcome draws `S` per candidate (direct and joint approaches).
    pub num_outcomes: usize,
    pub search: SearchConfig,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        Self {
            approach: Approach::Joint,
            num_treatments: 100,
            num_outcomes: 200,
            search: SearchConfig::default(),
        }
    }
}

pub fn decide(
    params: &ModelParams,
    ctx: &Context,
    utility: &UtilityConfig,
    cfg: &DecisionConfig,
    rng: &mut Rng,
) -> Result<DecisionResult> {
    match cfg.approach {
        Approach::Direct => decide_direct(params, ctx, utility, cfg.num_outcomes, rng),
        Approach::Indirect => decide_indirect(params, ctx, utility, &cfg.search, rng),
        Approach::Joint => decide_joint(params, ctx, utility, cfg.num_treatments, cfg.num_outcomes, rng),
    }
}

/// Estimated utility of the model's own treatment policy, `E_{x ~ p(x|c)} E[u(y) | x, c]`,
/// averaged over contexts. Context `i` draws from substream `i` of `seed`.
pub fn policy_expected_utility(
    params: &ModelParams,
    contexts: &[Context],
    utility: &UtilityConfig,
    u: usize,
    s: usize,
    seed: u64,
) -> Result<McEstimate> {
    if params.config.mode == Mode::Autoregressive {
        log::debug!("policy utility of an autoregressive model uses rollouts");
    }
    let mut per_context = Vec::with_capacity(contexts.len());
    for (i, ctx) in contexts.iter().enumerate() {
        let mut rng = crate::rng::stream(seed, "policy-eu", i as u64);
        let xs = sample_treatments(params, ctx, u, &mut rng)?;
        let scores = score_candidates(params, ctx, &xs, s, &|y| utility_trajectory(y, utility), &mut rng)?;
        per_context.push(scores.iter().map(|e| e.estimate).sum::<f64>() / scores.len() as f64);
    }
    McEstimate::from_values(&per_context)
}
