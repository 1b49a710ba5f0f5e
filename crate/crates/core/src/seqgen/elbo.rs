//! Importance-sampled log marginal likelihood for checking the ELBO bound.

use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use super::config::Mode;
use super::features::{Batch, Timeline};
use super::net::{LatentPath, Net, Vars};
use super::objective::check_mode;
use super::params::ModelParams;
use crate::diffnum::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trajectory::{Window, D, P};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboCheck {
    /// Mean of single-sample ELBO estimates (reconstruction minus analytic KL).
    pub elbo: f64,
    /// Standard error of that mean.
    pub elbo_se: f64,
    /// `log (1/N Σ p(y, x, z_i) / q(z_i))` with `z_i ~ q`.
    pub log_marginal: f64,
    pub particles: usize,
}

impl ElboCheck {
    /// True when the ELBO does not exceed the log marginal by more than `k` standard errors.
    pub fn holds(&self, k: f64) -> bool {
        self.elbo <= self.log_marginal + k * self.elbo_se
    }
}

fn log_normal(x: f64, m: f64, s: f64) -> f64 {
    let r = (x - m) / s;
    -HALF_LN_2PI - s.ln() - 0.5 * r * r
}

/// Draws `particles` latents from the posterior of `window` and compares
/// the ELBO with the importance-sampled log marginal likelihood.
pub fn elbo_check(params: &ModelParams, window: &Window, particles: usize, rng: &mut Rng) -> Result<ElboCheck> {
    check_mode(params, Mode::Latent)?;
    if particles < 2 {
        return Err(Error::InvalidArgument("at least two particles".into()));
    }
    let cfg = &params.config;
    let (tl, split) = Timeline::from_window(&params.scaler, window)?;
    let past = split.min(cfg.max_history);
    if past == 0 {
        return Err(Error::InsufficientData("empty history".into()));
    }
    let k = window.future_outcomes.cols();
    let one = Batch::windows(cfg, &[(&tl, split)], past, k)?;

    let mut g = Graph::new();
    let vars = Vars::leaves(&mut g, params, &[]);
    let net = Net { cfg, vars: &vars };
    let mem = net.encode(&mut g, &one, LatentPath::Mean)?;
    let mu = g.value(mem.mu.expect("history present")).clone();
    let sd = g.value(mem.sd.expect("latent mode")).clone();

    let l = cfg.latent_dim;
    let n_lat = past * l;
    let mut z = Vec::with_capacity(particles * n_lat);
    let mut log_ratio_prior = Vec::with_capacity(particles);
    for _ in 0..particles {
        let mut lr = 0.0;
        for i in 0..n_lat {
            let e: f64 = StandardNormal.sample(rng);
            let zi = mu.data()[i] + sd.data()[i] * e;
            lr += log_normal(zi, 0.0, cfg.prior_sd) - log_normal(zi, mu.data()[i], sd.data()[i]);
            z.push(zi);
        }
        log_ratio_prior.push(lr);
    }
    let z = Tensor::new(vec![particles, past, l], z)?;
    let kl: f64 = mu
        .data()
        .iter()
        .zip(sd.data())
        .map(|(&m, &s)| (cfg.prior_sd / s).ln() + (s * s + m * m) / (2.0 * cfg.prior_sd * cfg.prior_sd) - 0.5)
        .sum();

    let batch = one.tile(particles);
    let mut g = Graph::new();
    let vars = Vars::leaves(&mut g, params, &[]);
    let net = Net { cfg, vars: &vars };
    let mem = net.encode(&mut g, &batch, LatentPath::Given(&z))?;
    let heads = net.decode(&mut g, &batch, mem.memory, true, true)?;
    let mean = g.value(heads.mean.expect("outcome head")).data();
    let logsd = g.value(heads.logsd.expect("outcome head")).data();
    let eta = g.value(heads.eta.expect("treatment head")).data();

    let (y, mask, x) = (one.y.data(), one.mask.data(), one.x_units.data());
    let lg: f64 = x.iter().map(|&v| ln_gamma(v + 1.0)).sum();
    let mut recon = Vec::with_capacity(particles);
    for i in 0..particles {
        let mut ll = -lg;
        for c in 0..k * P {
            if mask[c] > 0.0 {
                let j = i * k * P + c;
                ll += log_normal(y[c], mean[j], logsd[j].exp());
            }
        }
        for c in 0..k * D {
            let e = eta[i * k * D + c];
            ll += x[c] * e - e.exp();
        }
        recon.push(ll);
    }

    let n = particles as f64;
    let elbos: Vec<f64> = recon.iter().map(|r| r - kl).collect();
    let elbo = elbos.iter().sum::<f64>() / n;
    let var = elbos.iter().map(|e| (e - elbo).powi(2)).sum::<f64>() / (n - 1.0);
    let logw: Vec<f64> = recon.iter().zip(&log_ratio_prior).map(|(r, p)| r + p).collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_marginal = max + (logw.iter().map(|w| (w - max).exp()).sum::<f64>() / n).ln();
    Ok(ElboCheck {
        elbo,
        elbo_se: (var / n).sqrt(),
        log_marginal,
        particles,
    })
}
