//! Encoding contexts, decoding distributions and drawing trajectories.

use rand_distr::{Distribution, Poisson, StandardNormal};

use super::config::Mode;
use super::features::{Batch, Timeline};
use super::net::{tile_batch, LatentPath, Net, Vars};
use super::objective::{GaussianPosterior, OutcomeDist, TreatmentDist};
use super::params::ModelParams;
use crate::diffnum::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trajectory::{Channels, Context, D, P, V};

/// Result of encoding a history.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    /// Parametric and autoregressive modes: `[past, L]`.
    Deterministic(Tensor),
    Posterior(GaussianPosterior),
}

impl Encoding {
    /// The deterministic latent, or the posterior mean.
    pub fn mean(&self) -> &Tensor {
        match self {
            Encoding::Deterministic(z) => z,
            Encoding::Posterior(p) => &p.mean,
        }
    }
}

fn warn_untrained(params: &ModelParams) {
    if !params.trained {
        log::warn!("sampling from an untrained model");
    }
}

/// Draws from Poisson(λ); rates that underflow to 0 give 0.
pub(crate) fn poisson_draw(lam: f64, rng: &mut Rng) -> f64 {
    if lam > 1e-300 {
        Poisson::new(lam).map(|p| p.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    }
}

/// Poisson mode, ties at integer λ broken downward (λ = 3 gives 2).
pub fn poisson_mode(lam: f64) -> f64 {
    (lam.ceil() - 1.0).max(0.0)
}

/// A context prepared for parametric or latent decoding.
pub(crate) struct Prepared<'a> {
    pub params: &'a ModelParams,
    /// Single-window batch with zero future treatments.
    pub batch: Batch,
}

impl<'a> Prepared<'a> {
    pub fn new(params: &'a ModelParams, ctx: &Context) -> Result<Self> {
        let k = ctx.horizon();
        let (tl, split) = Timeline::from_context(&params.scaler, ctx, &Channels::zeros(D, k))?;
        let past = split.min(params.config.max_history);
        let batch = Batch::windows(&params.config, &[(&tl, split)], past, k)?;
        Ok(Self { params, batch })
    }

    /// Decoder memory and (when the encoder ran) posterior mean and sd, all
    /// as values.
    pub fn memory(&self, batch: &Batch, path: LatentPath<'_>) -> Result<(Tensor, Option<Tensor>, Option<Tensor>)> {
        let mut g = Graph::new();
        let vars = Vars::leaves(&mut g, self.params, &[]);
        let net = Net {
            cfg: &self.params.config,
            vars: &vars,
        };
        let m = net.encode(&mut g, batch, path)?;
        Ok((
            g.value(m.memory).clone(),
            m.mu.map(|v| g.value(v).clone()),
            m.sd.map(|v| g.value(v).clone()),
        ))
    }

    /// Memory for `b` copies of the context at the deterministic latent / posterior mean.
    pub fn mean_memory(&self, b: usize) -> Result<Tensor> {
        let (m, _, _) = self.memory(&self.batch, LatentPath::Mean)?;
        Ok(tile_batch(&m, b))
    }

    /// Memory for `n` fresh posterior draws (latent mode) or `n` copies of the
    /// deterministic memory.
    pub fn sampled_memory(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        if self.params.config.mode != Mode::Latent || self.batch.past == 0 {
            return self.mean_memory(n);
        }
        let (_, mu, sd) = self.memory(&self.batch, LatentPath::Mean)?;
        let (mu, sd) = (mu.expect("history present"), sd.expect("latent mode"));
        let mut z = Vec::with_capacity(n * mu.numel());
        for _ in 0..n {
            for (&m, &s) in mu.data().iter().zip(sd.data()) {
                let e: f64 = StandardNormal.sample(rng);
                z.push(m + s * e);
            }
        }
        let z = Tensor::new(vec![n, self.batch.past, self.params.config.latent_dim], z)?;
        let (m, _, _) = self.memory(&self.batch.tile(n), LatentPath::Given(&z))?;
        Ok(m)
    }

    /// Outcome distributions for `batch` (one per row) given `memory`.
    pub fn outcome_dists(&self, batch: &Batch, memory: &Tensor) -> Result<Vec<OutcomeDist>> {
        let mut g = Graph::new();
        let vars = Vars::leaves(&mut g, self.params, &[]);
        let net = Net {
            cfg: &self.params.config,
            vars: &vars,
        };
        let mem = g.constant(memory.clone());
        let h = net.decode(&mut g, batch, mem, true, false)?;
        let mean = g.value(h.mean.expect("outcome head"));
        let logsd = g.value(h.logsd.expect("outcome head"));
        let (b, k) = (batch.b, batch.k);
        Ok((0..b)
            .map(|i| {
                let mut m = Channels::zeros(P, k);
                let mut s = Channels::zeros(P, k);
                for t in 0..k {
                    for p in 0..P {
                        let at = (i * k + t) * P + p;
                        m.set(p, t, mean.data()[at]);
                        s.set(p, t, logsd.data()[at].exp());
                    }
                }
                OutcomeDist { mean: m, sd: s }
            })
            .collect())
    }

    pub fn treatment_dists(&self, batch: &Batch, memory: &Tensor) -> Result<Vec<TreatmentDist>> {
        let mut g = Graph::new();
        let vars = Vars::leaves(&mut g, self.params, &[]);
        let net = Net {
            cfg: &self.params.config,
            vars: &vars,
        };
        let mem = g.constant(memory.clone());
        let h = net.decode(&mut g, batch, mem, false, true)?;
        let eta = g.value(h.eta.expect("treatment head"));
        let (b, k) = (batch.b, batch.k);
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut r = Channels::zeros(D, k);
            for t in 0..k {
                for d in 0..D {
                    let lam = eta.data()[(i * k + t) * D + d].exp();
                    if !(lam.is_finite() && lam > 0.0) {
                        return Err(Error::NonFinite("treatment rate"));
                    }
                    r.set(d, t, lam);
                }
            }
            out.push(TreatmentDist { rate: r });
        }
        Ok(out)
    }
}

fn not_autoregressive(params: &ModelParams, op: &'static str) -> Result<()> {
    if params.config.mode == Mode::Autoregressive {
        return Err(Error::UnsupportedMode {
            op,
            mode: params.config.mode.as_str(),
        });
    }
    Ok(())
}

/// Encodes the (last `max_history` hours of the) context history.
pub fn encode(params: &ModelParams, ctx: &Context) -> Result<Encoding> {
    if ctx.past_len() == 0 {
        return Err(Error::InsufficientData("empty history".into()));
    }
    let prep = Prepared::new(params, ctx)?;
    let (_, mu, sd) = prep.memory(&prep.batch, LatentPath::Mean)?;
    let past = prep.batch.past;
    let l = params.config.latent_dim;
    let mu = mu.expect("history present").reshaped(&[past, l])?;
    Ok(match sd {
        Some(sd) => Encoding::Posterior(GaussianPosterior {
            mean: mu,
            sd: sd.reshaped(&[past, l])?,
        }),
        None => Encoding::Deterministic(mu),
    })
}

/// Outcome distribution (scaled units) for future treatment `x` given latent `z` (`[past, L]`).
pub fn decode_outcome(params: &ModelParams, ctx: &Context, z: &Tensor, x: &Channels<f64>) -> Result<OutcomeDist> {
    not_autoregressive(params, "decode_outcome")?;
    let prep = Prepared::new(params, ctx)?;
    let batch = prep.batch.with_treatments(&params.config, &params.scaler, std::slice::from_ref(x))?;
    let z = z.clone().reshaped(&[1, prep.batch.past, params.config.latent_dim])?;
    let (mem, _, _) = prep.memory(&batch, LatentPath::Given(&z))?;
    Ok(prep.outcome_dists(&batch, &mem)?.remove(0))
}

/// Treatment rates given latent `z` (`[past, L]`).
pub fn decode_treatment(params: &ModelParams, ctx: &Context, z: &Tensor) -> Result<TreatmentDist> {
    not_autoregressive(params, "decode_treatment")?;
    let prep = Prepared::new(params, ctx)?;
    let z = z.clone().reshaped(&[1, prep.batch.past, params.config.latent_dim])?;
    let (mem, _, _) = prep.memory(&prep.batch, LatentPath::Given(&z))?;
    Ok(prep.treatment_dists(&prep.batch, &mem)?.remove(0))
}

/// Outcome distributions for each candidate at the deterministic latent or posterior mean.
pub fn outcome_dists(params: &ModelParams, ctx: &Context, xs: &[Channels<f64>]) -> Result<Vec<OutcomeDist>> {
    not_autoregressive(params, "outcome_dists")?;
    let prep = Prepared::new(params, ctx)?;
    let batch = prep.batch.with_treatments(&params.config, &params.scaler, xs)?;
    let mem = prep.mean_memory(xs.len())?;
    prep.outcome_dists(&batch, &mem)
}

/// Treatment rates at the deterministic latent or posterior mean.
pub fn treatment_dist(params: &ModelParams, ctx: &Context) -> Result<TreatmentDist> {
    not_autoregressive(params, "treatment_dist")?;
    let prep = Prepared::new(params, ctx)?;
    let mem = prep.mean_memory(1)?;
    Ok(prep.treatment_dists(&prep.batch, &mem)?.remove(0))
}

fn unscaled_draw(params: &ModelParams, d: &OutcomeDist, eps: &[f64]) -> Channels<f64> {
    let mut y = Channels::zeros(P, d.mean.cols());
    for (i, out) in y.as_mut_slice().iter_mut().enumerate() {
        let z = d.mean.as_slice()[i] + d.sd.as_slice()[i] * eps[i];
        *out = params.scaler.unscale_outcome(z);
    }
    y
}

struct Rollout {
    outcomes: Vec<Channels<f64>>,
    treatments: Vec<Channels<f64>>,
}

/// Autoregressive rollout of `n` trajectories. Treatments are taken from
/// `fixed_x` or drawn (or, when `greedy`, set to the Poisson mode); outcomes
/// are drawn (or set to the mean when `greedy`) and fed back as measured.
fn ar_rollout(
    params: &ModelParams,
    ctx: &Context,
    fixed_x: Option<&Channels<f64>>,
    n: usize,
    greedy: bool,
    rng: &mut Rng,
) -> Result<Rollout> {
    let k = ctx.horizon();
    let scaler = &params.scaler;
    let (base, split) = Timeline::from_context(scaler, ctx, &Channels::zeros(D, k))?;
    let mut past = base.clone();
    truncate(&mut past, split);
    let mut lines = vec![past; n];
    let mut outcomes = vec![Channels::zeros(P, k); n];
    let mut treatments = vec![Channels::zeros(D, k); n];
    let prep_params = Prepared {
        params,
        batch: Batch::windows(&params.config, &[(&base, split)], split, k)?,
    };
    for t in 0..k {
        let mut v = [0.0; V];
        for (c, slot) in v.iter_mut().enumerate() {
            *slot = ctx.future_covariates.get(c, t);
        }
        let hour = ctx.future_hours[t] as usize;
        for line in lines.iter_mut() {
            line.push_hour(scaler, None, [0.0; D], v, hour);
        }
        let hist = lines[0].len - 1;
        let items: Vec<(&Timeline, usize)> = lines.iter().map(|l| (l, hist)).collect();
        let batch = Batch::windows(&params.config, &items, hist, 1)?;
        let (memory, _, _) = prep_params.memory(&batch, LatentPath::Mean)?;
        let xs: Vec<[f64; D]> = match fixed_x {
            Some(x) => {
                let mut col = [0.0; D];
                for (d, slot) in col.iter_mut().enumerate() {
                    *slot = x.get(d, t);
                }
                vec![col; n]
            }
            None => {
                let rates = prep_params.treatment_dists(&batch, &memory)?;
                rates
                    .iter()
                    .map(|r| {
                        let mut col = [0.0; D];
                        for (d, slot) in col.iter_mut().enumerate() {
                            let lam = r.rate.get(d, 0);
                            *slot = if greedy { poisson_mode(lam) } else { poisson_draw(lam, rng) };
                        }
                        col
                    })
                    .collect()
            }
        };
        for (line, x) in lines.iter_mut().zip(&xs) {
            line.set_last(scaler, None, *x);
        }
        let items: Vec<(&Timeline, usize)> = lines.iter().map(|l| (l, hist)).collect();
        let batch = Batch::windows(&params.config, &items, hist, 1)?;
        let dists = prep_params.outcome_dists(&batch, &memory)?;
        for (i, d) in dists.iter().enumerate() {
            let mut y = [0.0; P];
            for (p, slot) in y.iter_mut().enumerate() {
                let e: f64 = if greedy { 0.0 } else { StandardNormal.sample(rng) };
                *slot = scaler.unscale_outcome(d.mean.get(p, 0) + d.sd.get(p, 0) * e);
                outcomes[i].set(p, t, *slot);
            }
            for d in 0..D {
                treatments[i].set(d, t, xs[i][d]);
            }
            lines[i].set_last(scaler, Some(y), xs[i]);
        }
    }
    Ok(Rollout { outcomes, treatments })
}

fn truncate(tl: &mut Timeline, len: usize) {
    use super::features::{F_ENC, F_OUT, F_TRT};
    tl.len = len;
    tl.enc.truncate(len * F_ENC);
    tl.out.truncate(len * F_OUT);
    tl.trt.truncate(len * F_TRT);
    tl.y.truncate(len * P);
    tl.mask.truncate(len * P);
    tl.x_units.truncate(len * D);
    tl.hours.truncate(len);
}

/// `S` outcome trajectories (mmol/L) per candidate treatment, drawn with
/// common random numbers: draw `s` uses the same noise for every candidate.
pub fn sample_outcomes_common(
    params: &ModelParams,
    ctx: &Context,
    xs: &[Channels<f64>],
    s: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<Channels<f64>>>> {
    warn_untrained(params);
    let k = ctx.horizon();
    match params.config.mode {
        Mode::Parametric => {
            let dists = outcome_dists(params, ctx, xs)?;
            let eps: Vec<Vec<f64>> = (0..s)
                .map(|_| (0..P * k).map(|_| StandardNormal.sample(rng)).collect())
                .collect();
            Ok(dists
                .iter()
                .map(|d| eps.iter().map(|e| unscaled_draw(params, d, e)).collect())
                .collect())
        }
        Mode::Latent => {
            let prep = Prepared::new(params, ctx)?;
            let memory = prep.sampled_memory(s, rng)?;
            let eps: Vec<Vec<f64>> = (0..s)
                .map(|_| (0..P * k).map(|_| StandardNormal.sample(rng)).collect())
                .collect();
            xs.iter()
                .map(|x| {
                    let one = prep.batch.with_treatments(&params.config, &params.scaler, std::slice::from_ref(x))?;
                    let dists = prep.outcome_dists(&one.tile(s), &memory)?;
                    Ok(dists.iter().zip(&eps).map(|(d, e)| unscaled_draw(params, d, e)).collect())
                })
                .collect()
        }
        Mode::Autoregressive => {
            let start = rng.clone();
            let mut out = Vec::with_capacity(xs.len());
            for x in xs {
                let mut r = start.clone();
                out.push(ar_rollout(params, ctx, Some(x), s, false, &mut r)?.outcomes);
                *rng = r;
            }
            Ok(out)
        }
    }
}

/// `S` outcome trajectories (mmol/L) under future treatment `x`.
pub fn sample_outcomes(params: &ModelParams, ctx: &Context, x: &Channels<f64>, s: usize, rng: &mut Rng) -> Result<Vec<Channels<f64>>> {
    Ok(sample_outcomes_common(params, ctx, std::slice::from_ref(x), s, rng)?.remove(0))
}

/// `U` treatment trajectories (integer units) from the treatment model.
pub fn sample_treatments(params: &ModelParams, ctx: &Context, u: usize, rng: &mut Rng) -> Result<Vec<Channels<f64>>> {
    warn_untrained(params);
    if params.config.mode == Mode::Autoregressive {
        return Ok(ar_rollout(params, ctx, None, u, false, rng)?.treatments);
    }
    let prep = Prepared::new(params, ctx)?;
    let rates = match params.config.mode {
        Mode::Latent => {
            let memory = prep.sampled_memory(u, rng)?;
            prep.treatment_dists(&prep.batch.tile(u), &memory)?
        }
        _ => vec![prep.treatment_dists(&prep.batch, &prep.mean_memory(1)?)?.remove(0); u],
    };
    Ok(rates
        .iter()
        .map(|r| {
            let draws = r.rate.as_slice().iter().map(|&lam| poisson_draw(lam, rng)).collect();
            Channels::from_vec(D, r.rate.cols(), draws)
        })
        .collect::<Result<_>>()?)
}

/// Per-cell Poisson mode at the deterministic latent / posterior mean; in
/// autoregressive mode a greedy rollout that feeds back mode doses and mean outcomes.
pub fn most_probable_treatment(params: &ModelParams, ctx: &Context) -> Result<Channels<f64>> {
    if params.config.mode == Mode::Autoregressive {
        let mut unused = crate::rng::stream(0, "greedy", 0);
        return Ok(ar_rollout(params, ctx, None, 1, true, &mut unused)?.treatments.remove(0));
    }
    Ok(treatment_dist(params, ctx)?.rate.map(poisson_mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_mode_ties_go_down() {
        assert_eq!(poisson_mode(2.7), 2.0);
        assert_eq!(poisson_mode(3.0), 2.0);
        assert_eq!(poisson_mode(0.4), 0.0);
        assert_eq!(poisson_mode(1.0), 0.0);
        assert_eq!(poisson_mode(1e-12), 0.0);
    }

    #[test]
    fn poisson_draw_mean() {
        let mut rng = crate::rng::stream(3, "poisson", 0);
        let n = 100_000;
        let mean = (0..n).map(|_| poisson_draw(3.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 0.02, "{mean}");
        assert_eq!(poisson_draw(0.0, &mut rng), 0.0);
        assert_eq!(poisson_draw(1e-320, &mut rng), 0.0);
    }
}
