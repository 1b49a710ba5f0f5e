use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{Mode, ModelConfig};
use super::features::Timeline;
use super::objective::{objective_gradients, objective_value, LossBatch, Objective};
use super::params::{ModelParams, ParamGroup};
use crate::diffnum::{adam_step, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::preprocess::{fit_scaler, ScalerParams};
use crate::rng;
use crate::trajectory::{Grid, D};

/// Windows evaluated together in one graph when scoring a data set.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mini-batch loss at every step.
    pub step_loss: Vec<f64>,
    /// `(step, validation loss)` at every evaluation.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_validation: Option<f64>,
}

/// Split points used for training windows: every start with a full history.
pub(crate) fn train_splits(len: usize, cfg: &ModelConfig) -> Vec<usize> {
    let k = cfg.window;
    if len <= k {
        return Vec::new();
    }
    let hi = len - k;
    let lo = cfg.max_history.min(hi).max(1);
    (lo..=hi).collect()
}

/// Deterministic evaluation windows: split points from the first admissible
/// one in steps of `stride`.
pub fn eval_splits(len: usize, cfg: &ModelConfig, stride: usize) -> Vec<usize> {
    train_splits(len, cfg).into_iter().step_by(stride.max(1)).collect()
}

pub(crate) fn objective_for(cfg: &ModelConfig, noise_seed: u64) -> Objective {
    match cfg.mode {
        Mode::Parametric => Objective::L1,
        Mode::Latent => Objective::elbo(noise_seed),
        Mode::Autoregressive => Objective::L3,
    }
}

/// Mean objective over the grids: windows at `stride` for parametric and
/// latent models, whole grids for autoregressive ones.
pub fn dataset_loss(params: &ModelParams, grids: &[Grid], stride: usize, noise_seed: u64) -> Result<f64> {
    let cfg = &params.config;
    let lines = grids
        .iter()
        .map(|g| Timeline::from_grid(&params.scaler, g))
        .collect::<Result<Vec<_>>>()?;
    let objective = objective_for(cfg, noise_seed);
    let (mut total, mut n) = (0.0, 0usize);
    if cfg.mode == Mode::Autoregressive {
        for chunk in lines.chunks(cfg.batch.max(1)) {
            let items: Vec<&Timeline> = chunk.iter().collect();
            let b = LossBatch::from_sequences(params, &items)?;
            total += objective_value(params, &b, objective)? * b.len() as f64;
            n += b.len();
        }
    } else {
        let items: Vec<(&Timeline, usize)> = lines
            .iter()
            .flat_map(|tl| eval_splits(tl.len, cfg, stride).into_iter().map(move |s| (tl, s)))
            .collect();
        for chunk in items.chunks(EVAL_CHUNK) {
            let b = LossBatch::from_timelines(params, chunk, cfg.window)?;
            total += objective_value(params, &b, objective)? * b.len() as f64;
            n += b.len();
        }
    }
    if n == 0 {
        return Err(Error::InsufficientData("no evaluation windows".into()));
    }
    Ok(total / n as f64)
}

/// Sets the treatment head bias to the log of the mean dose per hour.
fn init_treatment_bias(params: &mut ModelParams, grids: &[Grid]) -> Result<()> {
    let mut sums = [0.0; D];
    let mut n = 0usize;
    for g in grids {
        for (d, s) in sums.iter_mut().enumerate() {
            *s += g.treatments.row(d).iter().sum::<f64>();
        }
        n += g.len();
    }
    let b = params.get_mut("trt.head.b")?;
    for (d, s) in sums.iter().enumerate() {
        b.data_mut()[d] = (s / n.max(1) as f64).max(1e-3).ln();
    }
    Ok(())
}

/// Adam on the chosen parameter groups for one batch; returns the loss.
pub(crate) fn optimizer_step(
    params: &mut ModelParams,
    batch: &LossBatch,
    objective: Objective,
    groups: &[ParamGroup],
    names: &[String],
    state: &mut AdamState,
    step: usize,
) -> Result<f64> {
    let (loss, grads) = match objective_gradients(params, batch, objective, groups) {
        Ok(v) => v,
        Err(Error::NonFinite(what)) => {
            log::error!("non-finite {what} at step {step}");
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        Err(e) => return Err(e),
    };
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    let grad_refs: Vec<&Tensor> = names.iter().map(|n| &grads[n]).collect();
    let mut param_refs: Vec<&mut Tensor> = params
        .tensors
        .iter_mut()
        .filter(|(n, _)| names.contains(n))
        .map(|(_, t)| t)
        .collect();
    adam_step(&mut param_refs, &grad_refs, state, &params.config.adam())?;
    Ok(loss)
}

/// Trains a model from scratch. The scaler is fitted on `train`; the
/// returned parameters are those with the lowest validation loss (or the
/// final ones when `val` is empty).
pub fn train(train: &[Grid], val: &[Grid], config: &ModelConfig, seed: u64) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    let scaler = fit_scaler(train)?;
    train_with_scaler(train, val, config, scaler, seed)
}

pub fn train_with_scaler(
    train: &[Grid],
    val: &[Grid],
    config: &ModelConfig,
    scaler: ScalerParams,
    seed: u64,
) -> Result<(ModelParams, TrainReport)> {
    if train.len() < config.batch {
        return Err(Error::InsufficientData(format!(
            "{} training patients for batch size {}",
            train.len(),
            config.batch
        )));
    }
    let mut params = ModelParams::init(config, &scaler, &mut rng::stream(seed, "init", 0))?;
    init_treatment_bias(&mut params, train)?;
    let lines = train
        .iter()
        .map(|g| Timeline::from_grid(&scaler, g))
        .collect::<Result<Vec<_>>>()?;
    let usable: Vec<usize> = (0..lines.len())
        .filter(|&i| config.mode == Mode::Autoregressive || !train_splits(lines[i].len, config).is_empty())
        .collect();
    if usable.len() < config.batch {
        return Err(Error::InsufficientData("too few grids longer than the window".into()));
    }

    let groups = ParamGroup::ALL;
    let names = params.names_in(&groups);
    let mut state = AdamState::new(&names.iter().map(|n| &params.tensors[n]).collect::<Vec<_>>());
    let mut order_rng = rng::stream(seed, "batches", 0);
    let mut noise_rng = rng::stream(seed, "noise", 0);
    let val_seed = rng::substream(seed, &[("validation", 0)]).gen::<u64>();
    let val_stride = config.window / 2;

    let mut report = TrainReport::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=config.steps {
        if order.len() < config.batch {
            let mut fresh = usable.clone();
            fresh.shuffle(&mut order_rng);
            order = fresh;
        }
        let picked: Vec<usize> = order.drain(..config.batch).collect();
        let batch = if config.mode == Mode::Autoregressive {
            let items: Vec<&Timeline> = picked.iter().map(|&i| &lines[i]).collect();
            LossBatch::from_sequences(&params, &items)?
        } else {
            let items: Vec<(&Timeline, usize)> = picked
                .iter()
                .map(|&i| {
                    let splits = train_splits(lines[i].len, config);
                    (&lines[i], splits[order_rng.gen_range(0..splits.len())])
                })
                .collect();
            LossBatch::from_timelines(&params, &items, config.window)?
        };
        let objective = objective_for(config, noise_rng.gen());
        let loss = optimizer_step(&mut params, &batch, objective, &groups, &names, &mut state, step)?;
        report.step_loss.push(loss);

        if !val.is_empty() && (step % config.eval_every == 0 || step == config.steps) {
            let v = dataset_loss(&params, val, val_stride, val_seed)?;
            log::info!("step {step}: batch loss {loss:.4}, validation {v:.4}");
            report.validation.push((step, v));
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, params.clone()));
                report.best_step = step;
                report.best_validation = Some(v);
            }
        }
    }
    let mut out = match best {
        Some((_, p)) => p,
        None => {
            report.best_step = config.steps;
            params
        }
    };
    out.trained = true;
    Ok((out, report))
}
