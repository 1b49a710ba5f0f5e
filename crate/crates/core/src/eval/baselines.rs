//! Reference forecasters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Channels, Context, Grid, P};

/// Predicts the mean of the context's measured past glucose at every future hour.
pub fn baseline_patient_mean(ctx: &Context) -> Result<Channels<f64>> {
    let k = ctx.horizon();
    let mut out = Channels::zeros(P, k);
    for p in 0..P {
        let m = ctx
            .measured_past_mean(p)
            .ok_or_else(|| Error::InsufficientData(format!("{}: no measured past glucose", ctx.patient_id)))?;
        out.row_mut(p).iter_mut().for_each(|v| *v = m);
    }
    Ok(out)
}

/// Mean measured glucose of the training patients by clock hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationTimeBaseline {
    /// `[hour][p]`
    pub by_hour: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub global_mean: Vec<f64>,
    /// Hours without training data; they predict the global mean.
    pub uncovered: Vec<u32>,
}

impl PopulationTimeBaseline {
    pub fn fit(grids: &[Grid]) -> Result<Self> {
        let mut sums = vec![vec![0.0; P]; 24];
        let mut counts = vec![0usize; 24];
        let mut total = vec![0.0; P];
        let mut n_total = 0usize;
        for g in grids {
            for t in 0..g.len() {
                let h = g.hours_of_day[t] as usize % 24;
                for p in 0..P {
                    if g.outcome_mask.get(p, t) {
                        let y = g.outcomes.get(p, t);
                        sums[h][p] += y;
                        total[p] += y;
                        if p == 0 {
                            counts[h] += 1;
                            n_total += 1;
                        }
                    }
                }
            }
        }
        if n_total == 0 {
            return Err(Error::InsufficientData("no measured glucose in training data".into()));
        }
        let global_mean: Vec<f64> = total.iter().map(|s| s / n_total as f64).collect();
        let mut uncovered = Vec::new();
        let by_hour = (0..24)
            .map(|h| {
                if counts[h] == 0 {
                    uncovered.push(h as u32);
                    global_mean.clone()
                } else {
                    sums[h].iter().map(|s| s / counts[h] as f64).collect()
                }
            })
            .collect();
        if !uncovered.is_empty() {
            log::warn!("population baseline: no training data at hours {uncovered:?}, using the global mean");
        }
        Ok(Self {
            by_hour,
            counts,
            global_mean,
            uncovered,
        })
    }

    pub fn predict(&self, ctx: &Context) -> Channels<f64> {
        let k = ctx.horizon();
        let mut out = Channels::zeros(P, k);
        for (t, &h) in ctx.future_hours.iter().enumerate() {
            for p in 0..P {
                out.set(p, t, self.by_hour[h as usize % 24][p]);
            }
        }
        out
    }

    /// Clock hour with the lowest mean.
    pub fn argmin_hour(&self) -> u32 {
        (0..24)
            .filter(|h| self.counts[*h] > 0)
            .min_by(|&a, &b| self.by_hour[a][0].total_cmp(&self.by_hour[b][0]))
            .unwrap_or(0) as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{split_window, tests::toy_grid};

    #[test]
    fn patient_mean_of_measured_past() {
        let mut g = toy_grid(10);
        for t in 0..10 {
            g.outcome_mask.set(0, t, false);
        }
        g.outcomes.set(0, 1, 6.0);
        g.outcome_mask.set(0, 1, true);
        g.outcomes.set(0, 3, 8.0);
        g.outcome_mask.set(0, 3, true);
        let mut w = split_window(&g, 5, 3).unwrap();
        assert_eq!(baseline_patient_mean(&w.context).unwrap().as_slice(), &[7.0; 3]);
        w.context.future_covariates.set(0, 0, 99.0);
        assert_eq!(baseline_patient_mean(&w.context).unwrap().as_slice(), &[7.0; 3]);

        g.outcome_mask.set(0, 3, false);
        g.outcomes.set(0, 1, 9.1);
        let w = split_window(&g, 5, 3).unwrap();
        assert_eq!(baseline_patient_mean(&w.context).unwrap().as_slice(), &[9.1; 3]);

        g.outcome_mask.set(0, 1, false);
        let w = split_window(&g, 5, 3).unwrap();
        assert!(baseline_patient_mean(&w.context).is_err());
    }

    #[test]
    fn constant_data_gives_constant_table() {
        let mut grids = vec![toy_grid(48), toy_grid(48)];
        for g in &mut grids {
            for t in 0..48 {
                g.outcomes.set(0, t, 7.0);
                g.outcome_mask.set(0, t, true);
            }
        }
        grids[1].id = "other".into();
        let b = PopulationTimeBaseline::fit(&grids).unwrap();
        assert!(b.uncovered.is_empty());
        let w = split_window(&grids[0], 20, 10).unwrap();
        assert!(b.predict(&w.context).as_slice().iter().all(|&v| v == 7.0));
        let mut other = w.context.clone();
        other.patient_id = "someone-else".into();
        other.static_features.iter_mut().for_each(|v| *v += 3.0);
        assert_eq!(b.predict(&other), b.predict(&w.context));
    }

    #[test]
    fn uncovered_hours_fall_back_to_the_global_mean() {
        let mut g = toy_grid(12);
        for t in 0..12 {
            g.outcome_mask.set(0, t, t < 6);
            g.outcomes.set(0, t, t as f64);
        }
        let b = PopulationTimeBaseline::fit(&[g]).unwrap();
        assert!(!b.uncovered.is_empty());
        assert_eq!(b.by_hour[20], b.global_mean);
    }
}
