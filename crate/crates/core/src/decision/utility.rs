//! Utilities over glucose trajectories and their expectations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Channels, P};

/// Per-reading utility curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UtilityShape {
    /// 1 inside the band, squared-exponential decay outside it.
    PlateauExp,
    /// `exp(−(y − center)² / (2 width²))`.
    GaussianBump { center: f64, width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilityConfig {
    /// mmol/L
    pub band_low: f64,
    /// mmol/L
    pub band_high: f64,
    pub hypo_steepness: f64,
    pub hyper_steepness: f64,
    /// Per-hour discount, in (0, 1].
    pub gamma: f64,
    /// One weight per outcome channel.
    pub alpha: Vec<f64>,
    pub shape: UtilityShape,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            band_low: 3.9,
            band_high: 10.0,
            hypo_steepness: 0.5,
            hyper_steepness: 0.05,
            gamma: 0.95,
            alpha: vec![1.0; P],
            shape: UtilityShape::PlateauExp,
        }
    }
}

impl UtilityConfig {
    pub fn gaussian_bump(center: f64, width: f64) -> Self {
        Self {
            shape: UtilityShape::GaussianBump { center, width },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("utility: {m}")));
        if !(self.band_low < self.band_high) {
            return bad("band_low must be below band_high");
        }
        if !(self.hypo_steepness > 0.0 && self.hyper_steepness > 0.0) {
            return bad("steepness must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.alpha.len() != P || self.alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad("alpha needs one positive weight per outcome channel");
        }
        if let UtilityShape::GaussianBump { center, width } = self.shape {
            if !center.is_finite() || !(width > 0.0) {
                return bad("bump width must be positive");
            }
        }
        Ok(())
    }
}

/// Utility of a single reading, in [0, 1].
pub fn utility_scalar(y: f64, cfg: &UtilityConfig) -> f64 {
    match cfg.shape {
        UtilityShape::PlateauExp => {
            if y < cfg.band_low {
                (-cfg.hypo_steepness * (cfg.band_low - y).powi(2)).exp()
            } else if y > cfg.band_high {
                (-cfg.hyper_steepness * (y - cfg.band_high).powi(2)).exp()
            } else {
                1.0
            }
        }
        UtilityShape::GaussianBump { center, width } => (-(y - center).powi(2) / (2.0 * width * width)).exp(),
    }
}

/// `Σ_t γ^t Π_p α_p u(y_pt)` with `t` counted from 1.
pub fn utility_trajectory(y: &Channels<f64>, cfg: &UtilityConfig) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for t in 0..y.cols() {
        discount *= cfg.gamma;
        let mut prod = 1.0;
        for p in 0..y.rows() {
            prod *= cfg.alpha[p] * utility_scalar(y.get(p, t), cfg);
        }
        total += discount * prod;
    }
    total
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    /// `sd / √S`; 0 for a single sample.
    pub se: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::InvalidArgument("no Monte-Carlo samples".into()));
        }
        // Shifted by the first value so that constant samples give an exact mean.
        let shift = values[0];
        let offset = values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
        let mean = shift + offset;
        let se = if n > 1 {
            let ss = values.iter().map(|v| (v - shift - offset).powi(2)).sum::<f64>();
            let var = ss / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            log::debug!("standard error of a single sample reported as 0");
            0.0
        };
        Ok(Self {
            estimate: mean,
            se,
            samples: n,
        })
    }

    /// True when the standard error is undefined (one sample).
    pub fn single_sample(&self) -> bool {
        self.samples == 1
    }
}

pub fn mc_expected_utility(samples: &[Channels<f64>], cfg: &UtilityConfig) -> Result<McEstimate> {
    let values: Vec<f64> = samples.iter().map(|y| utility_trajectory(y, cfg)).collect();
    McEstimate::from_values(&values)
}

/// Expected utility of independent Gaussian cells (`mu`, `sigma` in mmol/L)
/// under a Gaussian-bump utility.
pub fn exact_gaussian_eu(mu: &Channels<f64>, sigma: &Channels<f64>, cfg: &UtilityConfig) -> Result<f64> {
    let UtilityShape::GaussianBump { center, width } = cfg.shape else {
        return Err(Error::InvalidArgument("closed form needs the gaussian-bump utility".into()));
    };
    if mu.rows() != sigma.rows() || mu.cols() != sigma.cols() || mu.rows() != cfg.alpha.len() {
        return Err(Error::shape("exact_gaussian_eu", "mu, sigma and alpha disagree"));
    }
    if sigma.as_slice().iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidArgument("sigma must be non-negative".into()));
    }
    let s2 = width * width;
    let mut total = 0.0;
    let mut discount = 1.0;
    for t in 0..mu.cols() {
        discount *= cfg.gamma;
        let mut prod = 1.0;
        for p in 0..mu.rows() {
            let v = s2 + sigma.get(p, t).powi(2);
            let cell = (s2 / v).sqrt() * (-(mu.get(p, t) - center).powi(2) / (2.0 * v)).exp();
            prod *= cfg.alpha[p] * cell;
        }
        total += discount * prod;
    }
    Ok(total)
}
