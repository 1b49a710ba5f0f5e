//! Likelihoods and the three training objectives.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use super::config::Mode;
use super::features::{Batch, Timeline};
use super::net::{LatentPath, Net, Vars};
use super::params::{ModelParams, ParamGroup};
use crate::diffnum::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::trajectory::{Channels, Grid, Window};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian over the latent sequence, one row of `L` values per past hour.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    /// `[past, L]`
    pub mean: Tensor,
    /// `[past, L]`, strictly positive.
    pub sd: Tensor,
}

/// Per-cell Gaussian over future outcomes, in scaled units.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDist {
    pub mean: Channels<f64>,
    pub sd: Channels<f64>,
}

/// Per-cell Poisson rates over future doses.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentDist {
    pub rate: Channels<f64>,
}

/// Gaussian log-density summed over measured cells. The flag is true when
/// no cell is measured (the sum is then 0).
pub fn loglik_outcome(dist: &OutcomeDist, y: &Channels<f64>, mask: &Channels<bool>) -> Result<(f64, bool)> {
    let same = |r: usize, c: usize| r == dist.mean.rows() && c == dist.mean.cols();
    if !same(y.rows(), y.cols()) || !same(mask.rows(), mask.cols()) || !same(dist.sd.rows(), dist.sd.cols()) {
        return Err(Error::shape("loglik_outcome", "dist, y and mask differ in shape"));
    }
    let mut total = 0.0;
    let mut any = false;
    for i in 0..y.as_slice().len() {
        if !mask.as_slice()[i] {
            continue;
        }
        any = true;
        let (m, s) = (dist.mean.as_slice()[i], dist.sd.as_slice()[i]);
        let r = (y.as_slice()[i] - m) / s;
        total += -HALF_LN_2PI - s.ln() - 0.5 * r * r;
    }
    if !any {
        log::warn!("loglik_outcome: no measured cells");
    }
    Ok((total, !any))
}

/// Poisson log-pmf summed over cells; `x` must hold non-negative integers.
pub fn loglik_treatment(dist: &TreatmentDist, x: &Channels<f64>) -> Result<f64> {
    if x.rows() != dist.rate.rows() || x.cols() != dist.rate.cols() {
        return Err(Error::shape("loglik_treatment", "rate and x differ in shape"));
    }
    let mut total = 0.0;
    for (&xi, &lam) in x.as_slice().iter().zip(dist.rate.as_slice()) {
        if xi < 0.0 || xi.fract() != 0.0 || !xi.is_finite() {
            return Err(Error::InvalidArgument(format!("treatment count {xi} is not a non-negative integer")));
        }
        total += xi * lam.ln() - lam - ln_gamma(xi + 1.0);
    }
    Ok(total)
}

/// KL divergence from the posterior to `N(0, prior_sd² I)`.
pub fn kl_to_prior(post: &GaussianPosterior, prior_sd: f64) -> f64 {
    post.mean
        .data()
        .iter()
        .zip(post.sd.data())
        .map(|(&m, &s)| (prior_sd / s).ln() + (s * s + m * m) / (2.0 * prior_sd * prior_sd) - 0.5)
        .sum()
}

/// Reparametrized draw `mean + sd ⊙ ε`.
pub fn sample_latent(post: &GaussianPosterior, rng: &mut Rng) -> Tensor {
    let data = post
        .mean
        .data()
        .iter()
        .zip(post.sd.data())
        .map(|(&m, &s)| {
            let e: f64 = StandardNormal.sample(rng);
            m + s * e
        })
        .collect();
    Tensor::new(post.mean.shape().to_vec(), data).expect("posterior shape")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Parametric mode: negative log-likelihood with the deterministic latent.
    L1,
    /// Latent mode: negative ELBO with one reparametrized sample per window.
    /// `zero_sd` replaces the sample by the posterior mean (requires `kl_weight = 0`).
    L2 { kl_weight: f64, zero_sd: bool, noise_seed: u64 },
    /// Autoregressive mode: teacher-forced one-step negative log-likelihood summed over hours.
    L3,
}

impl Objective {
    pub fn elbo(noise_seed: u64) -> Self {
        Objective::L2 {
            kl_weight: 1.0,
            zero_sd: false,
            noise_seed,
        }
    }

    fn mode(&self) -> Mode {
        match self {
            Objective::L1 => Mode::Parametric,
            Objective::L2 { .. } => Mode::Latent,
            Objective::L3 => Mode::Autoregressive,
        }
    }
}

/// Prepared inputs for an objective, grouped by shape.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub(crate) groups: Vec<Batch>,
    pub(crate) n_items: usize,
}

impl LossBatch {
    pub(crate) fn from_timelines(params: &ModelParams, items: &[(&Timeline, usize)], k: usize) -> Result<Self> {
        let cfg = &params.config;
        let mut shapes: BTreeMap<usize, Vec<(&Timeline, usize)>> = BTreeMap::new();
        for &(tl, split) in items {
            shapes.entry(split.min(cfg.max_history)).or_default().push((tl, split));
        }
        let groups = shapes
            .into_iter()
            .map(|(past, group)| Batch::windows(cfg, &group, past, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            groups,
            n_items: items.len(),
        })
    }

    pub(crate) fn from_sequences(params: &ModelParams, items: &[&Timeline]) -> Result<Self> {
        let mut by_len: BTreeMap<usize, Vec<&Timeline>> = BTreeMap::new();
        for &tl in items {
            by_len.entry(tl.len).or_default().push(tl);
        }
        let groups = by_len
            .into_values()
            .map(|group| Batch::sequences(&params.config, &group))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            groups,
            n_items: items.len(),
        })
    }

    /// Windows for the parametric and latent objectives. Each window's
    /// encoder history is its last `max_history` past hours.
    pub fn from_windows(params: &ModelParams, windows: &[Window]) -> Result<Self> {
        let k = windows
            .first()
            .ok_or_else(|| Error::InsufficientData("no windows".into()))?
            .future_outcomes
            .cols();
        let prepared = windows
            .iter()
            .map(|w| {
                if w.future_outcomes.cols() != k {
                    return Err(Error::shape("LossBatch", "windows differ in horizon"));
                }
                Timeline::from_window(&params.scaler, w)
            })
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<(&Timeline, usize)> = prepared.iter().map(|(t, s)| (t, *s)).collect();
        Self::from_timelines(params, &items, k)
    }

    /// Whole grids for the autoregressive objective.
    pub fn from_grids(params: &ModelParams, grids: &[Grid]) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::InsufficientData("no grids".into()));
        }
        let prepared = grids
            .iter()
            .map(|g| Timeline::from_grid(&params.scaler, g))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<&Timeline> = prepared.iter().collect();
        Self::from_sequences(params, &items)
    }

    pub fn len(&self) -> usize {
        self.n_items
    }

    pub fn is_empty(&self) -> bool {
        self.n_items == 0
    }
}

fn gaussian_loglik(g: &mut Graph, batch: &Batch, mean: Var, logsd: Var) -> Result<Var> {
    let y = g.constant(batch.y.clone());
    let mask = g.constant(batch.mask.clone());
    let diff = g.sub(y, mean)?;
    let neg = g.scale(logsd, -1.0)?;
    let inv = g.exp(neg)?;
    let r = g.mul(diff, inv)?;
    let r2 = g.square(r)?;
    let t = g.scale(r2, -0.5)?;
    let t = g.sub(t, logsd)?;
    let t = g.add_scalar(t, -HALF_LN_2PI)?;
    let t = g.mul(t, mask)?;
    g.sum(t)
}

fn poisson_loglik(g: &mut Graph, batch: &Batch, eta: Var) -> Result<Var> {
    let x = g.constant(batch.x_units.clone());
    let xe = g.mul(x, eta)?;
    let lam = g.exp(eta)?;
    let t = g.sub(xe, lam)?;
    let s = g.sum(t)?;
    let lg: f64 = batch.x_units.data().iter().map(|&v| ln_gamma(v + 1.0)).sum();
    g.add_scalar(s, -lg)
}

fn kl_graph(g: &mut Graph, mu: Var, sd: Var, prior_sd: f64) -> Result<Var> {
    let log_sd = g.log(sd)?;
    let sd2 = g.square(sd)?;
    let mu2 = g.square(mu)?;
    let s = g.add(sd2, mu2)?;
    let s = g.scale(s, 1.0 / (2.0 * prior_sd * prior_sd))?;
    let t = g.sub(s, log_sd)?;
    let t = g.add_scalar(t, prior_sd.ln() - 0.5)?;
    g.sum(t)
}

pub(crate) fn check_mode(params: &ModelParams, expected: Mode) -> Result<()> {
    if params.config.mode != expected {
        return Err(Error::ModeMismatch {
            expected: expected.as_str(),
            found: params.config.mode.as_str(),
        });
    }
    Ok(())
}

/// Records the mean loss of `objective` over `batch` on `g`.
pub(crate) fn loss_graph(g: &mut Graph, vars: &Vars, params: &ModelParams, batch: &LossBatch, objective: Objective) -> Result<Var> {
    check_mode(params, objective.mode())?;
    if let Objective::L2 {
        kl_weight, zero_sd: true, ..
    } = objective
    {
        if kl_weight != 0.0 {
            return Err(Error::InvalidArgument("a zero-sd posterior needs kl_weight = 0".into()));
        }
    }
    let net = Net {
        cfg: &params.config,
        vars,
    };
    let mut total: Option<Var> = None;
    for (gi, b) in batch.groups.iter().enumerate() {
        let eps;
        let path = match objective {
            Objective::L2 {
                zero_sd: false,
                noise_seed,
                ..
            } if b.past > 0 => {
                let mut rng = rng::substream(noise_seed, &[("elbo", gi as u64)]);
                eps = Tensor::randn(&[b.b, b.past, params.config.latent_dim], 1.0, &mut rng);
                LatentPath::Reparam(&eps)
            }
            _ => LatentPath::Mean,
        };
        let mem = net.encode(g, b, path)?;
        let heads = net.decode(g, b, mem.memory, true, true)?;
        let (mean, logsd, eta) = (heads.mean.unwrap(), heads.logsd.unwrap(), heads.eta.unwrap());
        let ly = gaussian_loglik(g, b, mean, logsd)?;
        let lx = poisson_loglik(g, b, eta)?;
        let ll = g.add(ly, lx)?;
        let mut loss = g.scale(ll, -1.0)?;
        if let Objective::L2 {
            kl_weight,
            zero_sd: false,
            ..
        } = objective
        {
            if let (Some(mu), Some(sd)) = (mem.mu, mem.sd) {
                if kl_weight != 0.0 {
                    let kl = kl_graph(g, mu, sd, params.config.prior_sd)?;
                    let kl = g.scale(kl, kl_weight)?;
                    loss = g.add(loss, kl)?;
                }
            }
        }
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| Error::InsufficientData("empty loss batch".into()))?;
    g.scale(total, 1.0 / batch.n_items as f64)
}

/// Mean loss over the batch.
pub fn objective_value(params: &ModelParams, batch: &LossBatch, objective: Objective) -> Result<f64> {
    let mut g = Graph::new();
    let vars = Vars::leaves(&mut g, params, &[]);
    let l = loss_graph(&mut g, &vars, params, batch, objective)?;
    Ok(g.value(l).item())
}

/// Loss and gradients for every tensor in `trainable` groups.
pub fn objective_gradients(
    params: &ModelParams,
    batch: &LossBatch,
    objective: Objective,
    trainable: &[ParamGroup],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let vars = Vars::leaves(&mut g, params, trainable);
    let l = loss_graph(&mut g, &vars, params, batch, objective)?;
    let loss = g.value(l).item();
    let mut grads = g.backward(l)?;
    let mut out = BTreeMap::new();
    for (name, &v) in vars.iter() {
        if ParamGroup::of(name).is_some_and(|gr| trainable.contains(&gr)) {
            let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            out.insert(name.clone(), t);
        }
    }
    Ok((loss, out))
}

/// Central-difference check of every model gradient for `objective`.
pub fn objective_grad_check(
    params: &ModelParams,
    batch: &LossBatch,
    objective: Objective,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let tensors: Vec<Tensor> = params.tensors.values().cloned().collect();
    grad_check(&tensors, opts, |g, v| {
        let vars = Vars::from_slice(params, v)?;
        loss_graph(g, &vars, params, batch, objective)
    })
}

/// Parametric negative log-likelihood, averaged over `windows`.
pub fn objective_l1(params: &ModelParams, windows: &[Window]) -> Result<f64> {
    objective_value(params, &LossBatch::from_windows(params, windows)?, Objective::L1)
}

/// Single-sample negative ELBO, averaged over `windows`.
pub fn objective_l2(params: &ModelParams, windows: &[Window], rng: &mut Rng) -> Result<f64> {
    let seed = rng::child_seed(rng);
    objective_value(params, &LossBatch::from_windows(params, windows)?, Objective::elbo(seed))
}

/// Teacher-forced autoregressive negative log-likelihood, averaged over `grids`.
pub fn objective_l3(params: &ModelParams, grids: &[Grid]) -> Result<f64> {
    objective_value(params, &LossBatch::from_grids(params, grids)?, Objective::L3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(mean: Vec<f64>, sd: Vec<f64>, rows: usize, cols: usize) -> OutcomeDist {
        OutcomeDist {
            mean: Channels::from_vec(rows, cols, mean).unwrap(),
            sd: Channels::from_vec(rows, cols, sd).unwrap(),
        }
    }

    #[test]
    fn gaussian_at_mode() {
        let d = dist(vec![4.2], vec![1.0], 1, 1);
        let y = Channels::from_vec(1, 1, vec![4.2]).unwrap();
        let (ll, empty) = loglik_outcome(&d, &y, &Channels::filled(1, 1, true)).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!(!empty);
    }

    #[test]
    fn unmeasured_cells_are_ignored() {
        let d = dist(vec![0.0, 1.0], vec![1.0, 2.0], 1, 2);
        let mask = Channels::from_vec(1, 2, vec![true, false]).unwrap();
        let a = loglik_outcome(&d, &Channels::from_vec(1, 2, vec![0.3, 5.0]).unwrap(), &mask).unwrap();
        let b = loglik_outcome(&d, &Channels::from_vec(1, 2, vec![0.3, -80.0]).unwrap(), &mask).unwrap();
        assert_eq!(a, b);
        let (v, empty) = loglik_outcome(&d, &Channels::from_vec(1, 2, vec![0.3, 5.0]).unwrap(), &Channels::filled(1, 2, false)).unwrap();
        assert_eq!(v, 0.0);
        assert!(empty);
    }

    #[test]
    fn gaussian_matches_naive_sum() {
        let mut rng = rng::stream(5, "ll", 0);
        let m = Tensor::randn(&[12], 1.0, &mut rng).into_data();
        let s: Vec<f64> = Tensor::randn(&[12], 0.3, &mut rng).data().iter().map(|v| v.exp()).collect();
        let y = Tensor::randn(&[12], 2.0, &mut rng).into_data();
        let mask: Vec<bool> = (0..12).map(|i| i % 5 != 1).collect();
        let d = dist(m.clone(), s.clone(), 3, 4);
        let (ll, _) = loglik_outcome(
            &d,
            &Channels::from_vec(3, 4, y.clone()).unwrap(),
            &Channels::from_vec(3, 4, mask.clone()).unwrap(),
        )
        .unwrap();
        let mut naive = 0.0;
        for i in 0..12 {
            if mask[i] {
                let pdf = (-(y[i] - m[i]).powi(2) / (2.0 * s[i] * s[i])).exp() / (s[i] * (2.0 * std::f64::consts::PI).sqrt());
                naive += pdf.ln();
            }
        }
        assert!((ll - naive).abs() < 1e-12);
    }

    #[test]
    fn poisson_examples() {
        let one = |lam: f64, x: f64| {
            loglik_treatment(
                &TreatmentDist {
                    rate: Channels::from_vec(1, 1, vec![lam]).unwrap(),
                },
                &Channels::from_vec(1, 1, vec![x]).unwrap(),
            )
        };
        assert!((one(1.0, 0.0).unwrap() + 1.0).abs() < 1e-15);
        assert!((one(2.0, 2.0).unwrap() - (2f64.ln() - 2.0)).abs() < 1e-12);
        assert!((one(2.0, 2.0).unwrap() + 1.3069).abs() < 1e-4);
        for x in [0.0f64, 1.0, 4.0, 9.0] {
            let at = one(x.max(1e-9), x).unwrap();
            for lam in [0.5, 1.5, 3.0, 8.0, 12.0] {
                assert!(one(lam, x).unwrap() <= at + 1e-12);
            }
        }
        assert!(one(1.0, -1.0).is_err());
        assert!(one(1.0, 0.5).is_err());
    }

    #[test]
    fn kl_examples() {
        let post = |m: f64, s: f64| GaussianPosterior {
            mean: Tensor::full(&[3, 2], m),
            sd: Tensor::full(&[3, 2], s),
        };
        assert!(kl_to_prior(&post(0.0, 1.0), 1.0).abs() < 1e-15);
        assert!(kl_to_prior(&post(0.0, 2.5), 2.5).abs() < 1e-15);
        assert!((kl_to_prior(&post(1.0, 1.0), 1.0) - 0.5 * 6.0).abs() < 1e-15);
    }

    #[test]
    fn latent_sampling() {
        let post = GaussianPosterior {
            mean: Tensor::from_fn(&[2, 2], |i| i as f64 - 1.0),
            sd: Tensor::full(&[2, 2], 0.0),
        };
        let mut rng = rng::stream(6, "z", 0);
        assert_eq!(sample_latent(&post, &mut rng), post.mean);

        let post = GaussianPosterior {
            mean: Tensor::from_fn(&[1, 3], |i| i as f64),
            sd: Tensor::from_fn(&[1, 3], |i| 0.5 + i as f64),
        };
        let n = 100_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let z = sample_latent(&post, &mut rng);
            for (s, v) in sums.iter_mut().zip(z.data()) {
                *s += v;
            }
        }
        for i in 0..3 {
            let mean = sums[i] / n as f64;
            let tol = 4.0 * post.sd.data()[i] / (n as f64).sqrt();
            assert!((mean - post.mean.data()[i]).abs() < tol);
        }
    }

    #[test]
    fn reparametrized_gradient_of_second_moment() {
        // E[z²] = μ² + σ², so d/dμ = 2μ.
        let mu0 = 0.7;
        let n = 1_000_000;
        let mut rng = rng::stream(7, "reparam", 0);
        let eps = Tensor::randn(&[n], 1.0, &mut rng);
        let mut g = Graph::new();
        let mu = g.param(Tensor::full(&[n], mu0));
        let sd = g.param(Tensor::full(&[n], 1.3));
        let e = g.constant(eps);
        let noise = g.mul(sd, e).unwrap();
        let z = g.add(mu, noise).unwrap();
        let z2 = g.square(z).unwrap();
        let s = g.sum(z2).unwrap();
        let mean = g.scale(s, 1.0 / n as f64).unwrap();
        let grads = g.backward(mean).unwrap();
        let d_mu: f64 = grads.get(mu).unwrap().data().iter().sum();
        assert!((d_mu - 2.0 * mu0).abs() < 1e-2, "{d_mu}");
    }
}
