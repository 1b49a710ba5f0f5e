//! Patient-level splits, midnight-aligned test windows, forecast scoring and ablations.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::baselines::{baseline_patient_mean, PopulationTimeBaseline};
use super::metrics::{ErrorAccumulator, MetricsReport};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::seqgen::{outcome_dists, sample_outcomes, train, Channel, Mode, ModelConfig, ModelParams, TrainReport};
use crate::trajectory::{split_window, Channels, Context, Grid, Window, P};

/// Outcome draws averaged for an autoregressive point forecast.
const AR_FORECAST_DRAWS: usize = 32;

/// Share of a split's training patients held back for model selection.
const INNER_VALIDATION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub split_id: usize,
    /// Indices into the cohort.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `n_splits` seeded 50/50 partitions of `n` patients.
pub fn patient_splits(n: usize, n_splits: usize, seed: u64) -> Vec<PatientSplit> {
    (0..n_splits)
        .map(|id| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng::stream(seed, "patient-split", id as u64));
            let test = idx.split_off(n / 2);
            let mut train = idx;
            train.sort_unstable();
            let mut test = test;
            test.sort_unstable();
            PatientSplit {
                split_id: id,
                train,
                test,
            }
        })
        .collect()
}

/// Windows whose first future hour is midnight and whose history holds a
/// measured glucose value.
pub fn midnight_windows(grid: &Grid, k: usize) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for s in 1..grid.len() {
        if s + k > grid.len() {
            break;
        }
        if grid.hours_of_day[s] != 0 {
            continue;
        }
        let w = split_window(grid, s, k)?;
        if w.context.measured_past_mean(0).is_some() {
            out.push(w);
        }
    }
    Ok(out)
}

/// Predictive mean (mmol/L) under future treatment `x`.
pub fn point_forecast(params: &ModelParams, ctx: &Context, x: &Channels<f64>, rng: &mut Rng) -> Result<Channels<f64>> {
    if params.config.mode == Mode::Autoregressive {
        let draws = sample_outcomes(params, ctx, x, AR_FORECAST_DRAWS, rng)?;
        let mut mean = Channels::zeros(P, ctx.horizon());
        for d in &draws {
            for (m, v) in mean.as_mut_slice().iter_mut().zip(d.as_slice()) {
                *m += v / draws.len() as f64;
            }
        }
        return Ok(mean);
    }
    let d = outcome_dists(params, ctx, std::slice::from_ref(x))?.remove(0);
    Ok(d.mean.map(|v| params.scaler.unscale_outcome(v)))
}

/// Test-set errors of the model and both baselines on the same cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastComparison {
    pub model: MetricsReport,
    pub patient_mean: MetricsReport,
    pub population_time: MetricsReport,
    pub n_windows: usize,
}

pub fn evaluate_forecasts(
    params: &ModelParams,
    train_grids: &[Grid],
    test_grids: &[Grid],
    split_id: usize,
    seed: u64,
) -> Result<ForecastComparison> {
    let k = params.config.window;
    let population = PopulationTimeBaseline::fit(train_grids)?;
    let mut acc = [ErrorAccumulator::new(k), ErrorAccumulator::new(k), ErrorAccumulator::new(k)];
    let mut n_windows = 0;
    for (gi, g) in test_grids.iter().enumerate() {
        for (wi, w) in midnight_windows(g, k)?.iter().enumerate() {
            let mut r = rng::substream(seed, &[("forecast", gi as u64), ("window", wi as u64)]);
            let preds = [
                point_forecast(params, &w.context, &w.future_treatments, &mut r)?,
                baseline_patient_mean(&w.context)?,
                population.predict(&w.context),
            ];
            for (a, p) in acc.iter_mut().zip(&preds) {
                a.add(p, &w.future_outcomes, &w.future_mask)?;
            }
            n_windows += 1;
        }
    }
    if n_windows == 0 {
        return Err(Error::InsufficientData("no midnight test windows".into()));
    }
    let [m, pm, pt] = acc;
    Ok(ForecastComparison {
        model: m.report(split_id)?,
        patient_mean: pm.report(split_id)?,
        population_time: pt.report(split_id)?,
        n_windows,
    })
}

/// Result of training and scoring on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRun {
    pub split_id: usize,
    pub comparison: ForecastComparison,
    pub train_report: TrainReport,
}

/// Trains on the split's training patients (the last tenth of them held
/// back for model selection) and scores forecasts on its test patients.
pub fn run_split(grids: &[Grid], split: &PatientSplit, config: &ModelConfig, seed: u64) -> Result<(ModelParams, SplitRun)> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| grids[i].clone()).collect::<Vec<_>>();
    let train_all = pick(&split.train);
    let n_val = ((train_all.len() as f64 * INNER_VALIDATION).round() as usize).max(1);
    if train_all.len() <= n_val {
        return Err(Error::InsufficientData("split too small".into()));
    }
    let (fit, val) = train_all.split_at(train_all.len() - n_val);
    let test = pick(&split.test);
    let run_seed = rng::substream(seed, &[("split", split.split_id as u64)]);
    let run_seed = rng::child_seed(&mut run_seed.clone());
    let (params, train_report) = train(fit, val, config, run_seed)?;
    let comparison = evaluate_forecasts(&params, &train_all, &test, split.split_id, run_seed)?;
    Ok((
        params,
        SplitRun {
            split_id: split.split_id,
            comparison,
            train_report,
        },
    ))
}

/// Trains and scores a model that conditions only on `channels`.
pub fn ablation_run(
    channels: &[Channel],
    grids: &[Grid],
    split: &PatientSplit,
    config: &ModelConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let cfg = ModelConfig {
        channels: channels.to_vec(),
        ..config.clone()
    };
    cfg.validate()?;
    Ok(run_split(grids, split, &cfg, seed)?.1.comparison.model)
}

/// Baseline-minus-model error at one hours-ahead index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapBin {
    pub hours_ahead: usize,
    pub model_mae: f64,
    pub best_baseline_mae: f64,
    /// `best_baseline_mae − model_mae`
    pub gap: f64,
    pub n_points: usize,
}

/// Gap between the better baseline and the model at every hours-ahead index
/// with at least `min_points` scored cells.
pub fn error_gap(cmp: &ForecastComparison, min_points: usize) -> Vec<GapBin> {
    cmp.model
        .horizon_profile
        .iter()
        .zip(&cmp.patient_mean.horizon_profile)
        .zip(&cmp.population_time.horizon_profile)
        .filter(|((m, _), _)| m.n_points >= min_points)
        .map(|((m, a), b)| {
            let best = a.mae.min(b.mae);
            GapBin {
                hours_ahead: m.hours_ahead,
                model_mae: m.mae,
                best_baseline_mae: best,
                gap: best - m.mae,
                n_points: m.n_points,
            }
        })
        .collect()
}

/// Hours-ahead index of the largest gap.
pub fn peak_gap(gaps: &[GapBin]) -> Option<usize> {
    gaps.iter().max_by(|a, b| a.gap.total_cmp(&b.gap)).map(|g| g.hours_ahead)
}
