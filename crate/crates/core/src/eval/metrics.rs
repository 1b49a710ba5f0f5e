//! Point-forecast error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Channels;

/// Errors at one hours-ahead index (1-based); both are 0 when `n_points` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonBin {
    pub hours_ahead: usize,
    pub mae: f64,
    pub rmse: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub n_points: usize,
    pub horizon_profile: Vec<HorizonBin>,
    pub split_id: usize,
}

/// Running sums of absolute and squared errors by hours-ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorAccumulator {
    abs: Vec<f64>,
    sq: Vec<f64>,
    n: Vec<usize>,
}

impl ErrorAccumulator {
    pub fn new(k: usize) -> Self {
        Self {
            abs: vec![0.0; k],
            sq: vec![0.0; k],
            n: vec![0; k],
        }
    }

    /// Adds the measured cells of one window. Column `t` is `t + 1` hours ahead.
    pub fn add(&mut self, pred: &Channels<f64>, truth: &Channels<f64>, mask: &Channels<bool>) -> Result<()> {
        if pred.rows() != truth.rows()
            || pred.cols() != truth.cols()
            || mask.rows() != truth.rows()
            || mask.cols() != truth.cols()
            || truth.cols() > self.n.len()
        {
            return Err(Error::shape("metrics", "prediction, truth and mask disagree"));
        }
        for p in 0..truth.rows() {
            for t in 0..truth.cols() {
                if mask.get(p, t) {
                    let e = pred.get(p, t) - truth.get(p, t);
                    self.abs[t] += e.abs();
                    self.sq[t] += e * e;
                    self.n[t] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.n.iter().sum()
    }

    pub fn report(&self, split_id: usize) -> Result<MetricsReport> {
        let n = self.n_points();
        if n == 0 {
            return Err(Error::InsufficientData("no measured cells to score".into()));
        }
        let profile = (0..self.n.len())
            .map(|t| {
                let c = self.n[t].max(1) as f64;
                HorizonBin {
                    hours_ahead: t + 1,
                    mae: self.abs[t] / c,
                    rmse: (self.sq[t] / c).sqrt(),
                    n_points: self.n[t],
                }
            })
            .collect();
        Ok(MetricsReport {
            mae: self.abs.iter().sum::<f64>() / n as f64,
            rmse: (self.sq.iter().sum::<f64>() / n as f64).sqrt(),
            n_points: n,
            horizon_profile: profile,
            split_id,
        })
    }
}

/// MAE and RMSE over the measured cells of one prediction.
pub fn metrics(pred: &Channels<f64>, truth: &Channels<f64>, mask: &Channels<bool>) -> Result<MetricsReport> {
    let mut acc = ErrorAccumulator::new(truth.cols());
    acc.add(pred, truth, mask)?;
    acc.report(0)
}

/// Error profile by hours-ahead over `(prediction, truth, mask)` triples.
pub fn horizon_profile(items: &[(Channels<f64>, Channels<f64>, Channels<bool>)]) -> Result<Vec<HorizonBin>> {
    let k = items
        .first()
        .ok_or_else(|| Error::InsufficientData("no windows".into()))?
        .1
        .cols();
    let mut acc = ErrorAccumulator::new(k);
    for (p, y, m) in items {
        acc.add(p, y, m)?;
    }
    Ok(acc.report(0)?.horizon_profile)
}

/// Mean of each field over several reports (profiles averaged bin by bin,
/// weighting splits equally).
pub fn average_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| Error::InsufficientData("no reports".into()))?;
    let n = reports.len() as f64;
    let k = first.horizon_profile.len();
    let profile = (0..k)
        .map(|t| {
            let bins: Vec<&HorizonBin> = reports.iter().map(|r| &r.horizon_profile[t]).collect();
            let present: Vec<&&HorizonBin> = bins.iter().filter(|b| b.n_points > 0).collect();
            let m = present.len().max(1) as f64;
            HorizonBin {
                hours_ahead: t + 1,
                mae: present.iter().map(|b| b.mae).sum::<f64>() / m,
                rmse: present.iter().map(|b| b.rmse).sum::<f64>() / m,
                n_points: bins.iter().map(|b| b.n_points).sum(),
            }
        })
        .collect();
    Ok(MetricsReport {
        mae: reports.iter().map(|r| r.mae).sum::<f64>() / n,
        rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / n,
        n_points: reports.iter().map(|r| r.n_points).sum(),
        horizon_profile: profile,
        split_id: first.split_id,
    })
}
