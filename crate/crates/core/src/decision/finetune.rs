//! Utility-driven fine-tuning of the treatment decoder.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::utility::{utility_trajectory, UtilityConfig};
use crate::diffnum::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::seqgen::{
    loss_graph, objective_for, poisson_draw, train_splits, Batch, LatentPath, LossBatch, Mode, ModelParams, Net,
    ParamGroup, Prepared, Timeline, Vars,
};
use crate::trajectory::{Channels, Grid, D, P};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Weight of the expected utility; `1 − alpha` weighs the log-likelihood.
    pub alpha: f64,
    pub steps: usize,
    /// Training contexts per step.
    pub contexts: usize,
    /// Treatments sampled per context.
    pub candidates: usize,
    /// Outcome draws per sampled treatment.
    pub outcome_samples: usize,
    /// Decay of the moving-average utility baseline.
    pub baseline_decay: f64,
    /// Adam step size; the model's own when absent.
    pub lr: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            steps: 500,
            contexts: 8,
            candidates: 8,
            outcome_samples: 32,
            baseline_decay: 0.9,
            lr: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument("alpha must lie in [0, 1]".into()));
        }
        if self.contexts == 0 || self.candidates == 0 || self.outcome_samples == 0 {
            return Err(Error::InvalidArgument("fine-tuning budgets must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::InvalidArgument("baseline_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Mean utility of the sampled treatments at each step.
    pub mean_utility: Vec<f64>,
    /// Mixed objective (to be maximised) at each step.
    pub objective: Vec<f64>,
}

/// `∂/∂η log Poisson(x | e^η)`.
pub fn poisson_score(x: f64, lam: f64) -> f64 {
    x - lam
}

/// Score-function estimate of `∂/∂η_i E[f(x)]` for independent cells
/// `x_i ~ Poisson(e^{η_i})`, with a constant baseline subtracted from `f`.
pub fn score_function_gradient(
    rates: &[f64],
    f: &dyn Fn(&[f64]) -> f64,
    baseline: f64,
    n: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    let mut grad = vec![0.0; rates.len()];
    let mut x = vec![0.0; rates.len()];
    for _ in 0..n {
        for (xi, &lam) in x.iter_mut().zip(rates) {
            *xi = poisson_draw(lam, rng);
        }
        let adv = f(&x) - baseline;
        for ((g, &xi), &lam) in grad.iter_mut().zip(&x).zip(rates) {
            *g += adv * poisson_score(xi, lam);
        }
    }
    grad.iter_mut().for_each(|g| *g /= n as f64);
    grad
}

/// Treatments sampled for one context and their estimated utilities.
struct Rollouts {
    eta: crate::diffnum::Var,
    /// `[m, k, D]` units.
    x: Vec<f64>,
    lam: Vec<f64>,
    utility: Vec<f64>,
}

/// Ascends `alpha · E_{x ~ p_θ(x|c)}[EU(x, c)] + (1 − alpha) · log-likelihood`
/// over the treatment decoder `θ` only; encoder and outcome decoder stay
/// frozen. Contexts are random training windows. The utility gradient uses
/// the score-function estimator with a moving-average baseline; latent
/// models draw `z` by reparametrisation.
pub fn finetune_policy(
    params: &ModelParams,
    train: &[Grid],
    utility: &UtilityConfig,
    cfg: &FinetuneConfig,
    rng: &mut Rng,
) -> Result<(ModelParams, FinetuneReport)> {
    cfg.validate()?;
    utility.validate()?;
    if params.config.mode == Mode::Autoregressive {
        return Err(Error::UnsupportedMode {
            op: "finetune_policy",
            mode: params.config.mode.as_str(),
        });
    }
    if !params.trained {
        log::warn!("fine-tuning an untrained model");
    }
    let mcfg = params.config.clone();
    let (k, m) = (mcfg.window, cfg.candidates);
    let lines = train
        .iter()
        .map(|g| Timeline::from_grid(&params.scaler, g))
        .collect::<Result<Vec<_>>>()?;
    let usable: Vec<(usize, Vec<usize>)> = lines
        .iter()
        .enumerate()
        .map(|(i, tl)| (i, train_splits(tl.len, &mcfg)))
        .filter(|(_, s)| !s.is_empty())
        .collect();
    if usable.is_empty() {
        return Err(Error::InsufficientData("no training windows for fine-tuning".into()));
    }

    let mut out = params.clone();
    let names = out.names_in(&[ParamGroup::Treatment]);
    let mut state = AdamState::new(&names.iter().map(|n| &out.tensors[n]).collect::<Vec<_>>());
    let adam = AdamConfig {
        lr: cfg.lr.unwrap_or(mcfg.lr),
        ..mcfg.adam()
    };
    let mut baseline: Option<f64> = None;
    let mut report = FinetuneReport::default();

    for step in 1..=cfg.steps {
        let items: Vec<(&Timeline, usize)> = (0..cfg.contexts)
            .map(|_| {
                let (i, splits) = &usable[rng.gen_range(0..usable.len())];
                (&lines[*i], splits[rng.gen_range(0..splits.len())])
            })
            .collect();

        let mut g = Graph::new();
        let vars = Vars::leaves(&mut g, &out, &[ParamGroup::Treatment]);
        let net = Net { cfg: &mcfg, vars: &vars };
        let mut rolled = Vec::with_capacity(items.len());
        if cfg.alpha > 0.0 {
            for &(tl, split) in &items {
                rolled.push(roll(&mut g, &net, &out, tl, split, k, m, utility, cfg.outcome_samples, rng)?);
            }
        }

        let mut total = None;
        let mut objective = 0.0;
        if cfg.alpha > 0.0 {
            let all: Vec<f64> = rolled.iter().flat_map(|r| r.utility.iter().copied()).collect();
            let batch_mean = all.iter().sum::<f64>() / all.len() as f64;
            let b = baseline.unwrap_or(batch_mean);
            baseline = Some(cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * batch_mean);
            report.mean_utility.push(batch_mean);
            objective += cfg.alpha * batch_mean;

            let norm = -cfg.alpha / (rolled.len() * m) as f64;
            for r in &rolled {
                let coef: Vec<f64> = (0..m * k * D)
                    .map(|i| norm * (r.utility[i / (k * D)] - b) * poisson_score(r.x[i], r.lam[i]))
                    .collect();
                let c = g.constant(Tensor::new(vec![m, k, D], coef)?);
                let prod = g.mul(r.eta, c)?;
                let s = g.sum(prod)?;
                total = Some(match total {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
        }
        if cfg.alpha < 1.0 {
            let lb = LossBatch::from_timelines(&out, &items, k)?;
            let l = loss_graph(&mut g, &vars, &out, &lb, objective_for(&mcfg, rng.gen()))?;
            objective -= (1.0 - cfg.alpha) * g.value(l).item();
            let l = g.scale(l, 1.0 - cfg.alpha)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        report.objective.push(objective);
        let Some(total) = total else { continue };
        if !objective.is_finite() {
            return Err(Error::Divergence { step, loss: objective });
        }
        let mut grads = g.backward(total).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { step, loss: objective },
            other => other,
        })?;
        let grad_list = names
            .iter()
            .map(|n| {
                let v = vars.get(n)?;
                Ok(grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            })
            .collect::<Result<Vec<_>>>()?;
        let grad_refs: Vec<&Tensor> = grad_list.iter().collect();
        let mut param_refs: Vec<&mut Tensor> = out
            .tensors
            .iter_mut()
            .filter(|(n, _)| names.contains(n))
            .map(|(_, t)| t)
            .collect();
        adam_step(&mut param_refs, &grad_refs, &mut state, &adam)?;
        if step % 50 == 0 {
            log::info!("fine-tune step {step}: objective {objective:.4}");
        }
    }
    Ok((out, report))
}

#[allow(clippy::too_many_arguments)]
fn roll(
    g: &mut Graph,
    net: &Net<'_>,
    params: &ModelParams,
    tl: &Timeline,
    split: usize,
    k: usize,
    m: usize,
    utility: &UtilityConfig,
    s: usize,
    rng: &mut Rng,
) -> Result<Rollouts> {
    let cfg = &params.config;
    let past = split.min(cfg.max_history);
    let single = Batch::windows(cfg, &[(tl, split)], past, k)?;
    let tiled = single.tile(m);
    let eps;
    let path = if cfg.mode == Mode::Latent {
        eps = Tensor::randn(&[m, past, cfg.latent_dim], 1.0, rng);
        LatentPath::Reparam(&eps)
    } else {
        LatentPath::Mean
    };
    let mem = net.encode(g, &tiled, path)?;
    let eta = net.decode(g, &tiled, mem.memory, false, true)?.eta.expect("treatment head");
    let lam: Vec<f64> = g.value(eta).data().iter().map(|e| e.exp()).collect();
    let x: Vec<f64> = lam.iter().map(|&l| poisson_draw(l, rng)).collect();
    let xs = (0..m)
        .map(|c| {
            let mut ch = Channels::zeros(D, k);
            for t in 0..k {
                for d in 0..D {
                    ch.set(d, t, x[(c * k + t) * D + d]);
                }
            }
            ch
        })
        .collect::<Vec<_>>();

    let memory = g.value(mem.memory).clone();
    let prep = Prepared {
        params,
        batch: single.clone(),
    };
    let bx = single.with_treatments(cfg, &params.scaler, &xs)?;
    let dists = prep.outcome_dists(&bx, &memory)?;
    let noise: Vec<Vec<f64>> = (0..s)
        .map(|_| (0..P * k).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let utility = dists
        .iter()
        .map(|d| {
            let total: f64 = noise
                .iter()
                .map(|e| {
                    let mut y = Channels::zeros(P, k);
                    for (i, v) in y.as_mut_slice().iter_mut().enumerate() {
                        *v = params.scaler.unscale_outcome(d.mean.as_slice()[i] + d.sd.as_slice()[i] * e[i]);
                    }
                    utility_trajectory(&y, utility)
                })
                .sum();
            total / s as f64
        })
        .collect();
    Ok(Rollouts { eta, x, lam, utility })
}
