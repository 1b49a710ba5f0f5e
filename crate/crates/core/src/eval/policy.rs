//! Simulator-oracle evaluation of treatment policies.

use serde::{Deserialize, Serialize};

use super::protocol::midnight_windows;
use crate::cohort::{environment_rollout, MealFill, Phenotype, SimConfig};
use crate::decision::{utility_trajectory, McEstimate, UtilityConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::trajectory::{Channels, Context, Grid};

/// Glucose below this is counted as hypoglycaemia (mmol/L).
pub const HYPO_THRESHOLD: f64 = 3.9;

/// A held-out context with the logged treatment and, for simulated
/// patients, the hidden phenotype.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    pub context: Context,
    pub logged_treatment: Channels<f64>,
    pub phenotype: Option<Phenotype>,
}

/// Midnight contexts of `grids`, paired with phenotypes by patient id.
pub fn eval_contexts(grids: &[Grid], phenotypes: &[(String, Phenotype)], k: usize) -> Result<Vec<EvalContext>> {
    let mut out = Vec::new();
    for g in grids {
        let phenotype = phenotypes.iter().find(|(id, _)| *id == g.id).map(|(_, p)| *p);
        for w in midnight_windows(g, k)? {
            out.push(EvalContext {
                context: w.context,
                logged_treatment: w.future_treatments,
                phenotype,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub mean_utility: f64,
    pub utility_se: f64,
    /// Fraction of simulated hours inside the utility band.
    pub time_in_range: f64,
    /// Fraction of simulated hours below [`HYPO_THRESHOLD`].
    pub hypo_rate: f64,
    /// Mean realised utility per context.
    pub per_context: Vec<f64>,
    pub treatments: Vec<Channels<f64>>,
}

/// Scores a treatment rule against the ground-truth dynamics: each context's
/// chosen treatment is rolled out `samples` times. Context `i` decides with
/// substream `("decide", i)` and simulates with `("environment", i)`, so two
/// rules evaluated with one seed face the same environment noise.
pub fn policy_evaluation(
    method: &mut dyn FnMut(&EvalContext, &mut Rng) -> Result<Channels<f64>>,
    contexts: &[EvalContext],
    sim: &SimConfig,
    utility: &UtilityConfig,
    samples: usize,
    seed: u64,
) -> Result<PolicyOutcome> {
    if contexts.is_empty() || samples == 0 {
        return Err(Error::InvalidArgument("policy evaluation needs contexts and samples".into()));
    }
    let mut per_context = Vec::with_capacity(contexts.len());
    let mut treatments = Vec::with_capacity(contexts.len());
    let (mut in_range, mut hypo, mut hours) = (0usize, 0usize, 0usize);
    for (i, ec) in contexts.iter().enumerate() {
        let phenotype = ec
            .phenotype
            .as_ref()
            .ok_or_else(|| Error::MissingPhenotype(ec.context.patient_id.clone()))?;
        let x = method(ec, &mut rng::stream(seed, "decide", i as u64))?;
        let mut env = rng::stream(seed, "environment", i as u64);
        let runs = environment_rollout(
            phenotype,
            &sim.dynamics,
            &ec.context,
            &x,
            &ec.context.future_covariates,
            MealFill::Unreported(sim),
            &mut env,
            samples,
        )?;
        let mut total = 0.0;
        for y in &runs {
            total += utility_trajectory(y, utility);
            for &v in y.row(0) {
                hours += 1;
                if (utility.band_low..=utility.band_high).contains(&v) {
                    in_range += 1;
                }
                if v < HYPO_THRESHOLD {
                    hypo += 1;
                }
            }
        }
        per_context.push(total / runs.len() as f64);
        treatments.push(x);
    }
    let est = McEstimate::from_values(&per_context)?;
    Ok(PolicyOutcome {
        mean_utility: est.estimate,
        utility_se: est.se,
        time_in_range: in_range as f64 / hours as f64,
        hypo_rate: hypo as f64 / hours as f64,
        per_context,
        treatments,
    })
}

/// Treatments seen in training, for the out-of-support score.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentSupport {
    pub treatments: Vec<Channels<f64>>,
}

impl TreatmentSupport {
    /// Future treatments of every midnight window of `grids`.
    pub fn from_grids(grids: &[Grid], k: usize) -> Result<Self> {
        let mut treatments = Vec::new();
        for g in grids {
            treatments.extend(midnight_windows(g, k)?.into_iter().map(|w| w.future_treatments));
        }
        if treatments.is_empty() {
            return Err(Error::InsufficientData("no reference treatments".into()));
        }
        Ok(Self { treatments })
    }

    /// Smallest L1 distance from `x` to a reference treatment.
    pub fn score(&self, x: &Channels<f64>) -> Result<f64> {
        out_of_support_score(x, &self.treatments)
    }
}

pub fn out_of_support_score(x: &Channels<f64>, reference: &[Channels<f64>]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for r in reference {
        if r.rows() != x.rows() || r.cols() != x.cols() {
            return Err(Error::shape("out_of_support_score", "treatment shapes differ"));
        }
        let d: f64 = r.as_slice().iter().zip(x.as_slice()).map(|(a, b)| (a - b).abs()).sum();
        best = best.min(d);
    }
    if best.is_infinite() {
        return Err(Error::InsufficientData("empty reference set".into()));
    }
    Ok(best)
}
