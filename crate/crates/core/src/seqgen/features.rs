//! Scaled per-hour model inputs and their assembly into batches.

use super::config::{Channel, ModelConfig};
use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::ScalerParams;
use crate::trajectory::{Channels, Context, Grid, Window, D, P, V};

/// Encoder features per hour: last observed glucose, measured flag, doses, carbs.
pub(crate) const F_ENC: usize = 2 * P + D + V;
/// Outcome-decoder features per future hour: doses and carbs.
pub(crate) const F_OUT: usize = D + V;
/// Treatment-decoder features per future hour: carbs.
pub(crate) const F_TRT: usize = V;

/// Scaled inputs and targets of one patient timeline.
///
/// Past glucose enters the encoder only through measured values carried
/// forward, so interpolated grid cells never reach the model.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Timeline {
    pub len: usize,
    pub enc: Vec<f64>,
    pub out: Vec<f64>,
    pub trt: Vec<f64>,
    /// Scaled glucose at measured cells, 0 elsewhere.
    pub y: Vec<f64>,
    pub mask: Vec<f64>,
    pub x_units: Vec<f64>,
    pub hours: Vec<usize>,
    pub static_features: Vec<f64>,
}

impl Timeline {
    pub fn from_parts(
        scaler: &ScalerParams,
        outcomes: &Channels<f64>,
        mask: &Channels<bool>,
        treatments: &Channels<f64>,
        covariates: &Channels<f64>,
        hours: &[u32],
        static_features: &[f64],
    ) -> Result<Self> {
        let len = hours.len();
        if outcomes.cols() != len || mask.cols() != len || treatments.cols() != len || covariates.cols() != len {
            return Err(Error::shape("Timeline", "channel lengths differ"));
        }
        if static_features.len() != scaler.static_mean.len() {
            return Err(Error::shape(
                "Timeline",
                format!("{} static features, scaler has {}", static_features.len(), scaler.static_mean.len()),
            ));
        }
        let mut tl = Timeline {
            len,
            enc: vec![0.0; len * F_ENC],
            out: vec![0.0; len * F_OUT],
            trt: vec![0.0; len * F_TRT],
            y: vec![0.0; len * P],
            mask: vec![0.0; len * P],
            x_units: vec![0.0; len * D],
            hours: hours.iter().map(|&h| h as usize % 24).collect(),
            static_features: static_features
                .iter()
                .enumerate()
                .map(|(i, &s)| scaler.scale_static(i, s))
                .collect(),
        };
        let mut carried = [0.0; P];
        for t in 0..len {
            let e = &mut tl.enc[t * F_ENC..(t + 1) * F_ENC];
            for p in 0..P {
                if mask.get(p, t) {
                    let ys = scaler.scale_outcome(outcomes.get(p, t));
                    carried[p] = ys;
                    tl.y[t * P + p] = ys;
                    tl.mask[t * P + p] = 1.0;
                    e[P + p] = 1.0;
                }
                e[p] = carried[p];
            }
            for d in 0..D {
                let x = treatments.get(d, t);
                let xs = scaler.scale_treatment(d, x);
                e[2 * P + d] = xs;
                tl.out[t * F_OUT + d] = xs;
                tl.x_units[t * D + d] = x;
            }
            for v in 0..V {
                let c = scaler.scale_covariate(covariates.get(v, t));
                e[2 * P + D + v] = c;
                tl.out[t * F_OUT + D + v] = c;
                tl.trt[t * F_TRT + v] = c;
            }
        }
        Ok(tl)
    }

    pub fn from_grid(scaler: &ScalerParams, grid: &Grid) -> Result<Self> {
        Self::from_parts(
            scaler,
            &grid.outcomes,
            &grid.outcome_mask,
            &grid.treatments,
            &grid.covariates,
            &grid.hours_of_day,
            &grid.static_features,
        )
    }

    /// Past of `ctx` followed by a future with treatments `future_x`
    /// (unmeasured outcomes). Returns the timeline and the split index.
    pub fn from_context(scaler: &ScalerParams, ctx: &Context, future_x: &Channels<f64>) -> Result<(Self, usize)> {
        let k = ctx.horizon();
        if future_x.rows() != D || future_x.cols() != k {
            return Err(Error::shape(
                "Timeline::from_context",
                format!("treatment {}x{}, expected {D}x{k}", future_x.rows(), future_x.cols()),
            ));
        }
        let outcomes = ctx.past_outcomes.hconcat(&Channels::zeros(P, k))?;
        let mask = ctx.past_mask.hconcat(&Channels::filled(P, k, false))?;
        let treatments = ctx.past_treatments.hconcat(future_x)?;
        let covariates = ctx.past_covariates.hconcat(&ctx.future_covariates)?;
        let hours: Vec<u32> = ctx.past_hours.iter().chain(&ctx.future_hours).copied().collect();
        let tl = Self::from_parts(scaler, &outcomes, &mask, &treatments, &covariates, &hours, &ctx.static_features)?;
        Ok((tl, ctx.past_len()))
    }

    pub fn from_window(scaler: &ScalerParams, w: &Window) -> Result<(Self, usize)> {
        let ctx = &w.context;
        let outcomes = ctx.past_outcomes.hconcat(&w.future_outcomes)?;
        let mask = ctx.past_mask.hconcat(&w.future_mask)?;
        let treatments = ctx.past_treatments.hconcat(&w.future_treatments)?;
        let covariates = ctx.past_covariates.hconcat(&ctx.future_covariates)?;
        let hours: Vec<u32> = ctx.past_hours.iter().chain(&ctx.future_hours).copied().collect();
        let tl = Self::from_parts(scaler, &outcomes, &mask, &treatments, &covariates, &hours, &ctx.static_features)?;
        Ok((tl, ctx.past_len()))
    }

    /// Rewrites the last hour's treatment and (if `y` is given) marks its outcome measured.
    pub fn set_last(&mut self, scaler: &ScalerParams, y: Option<[f64; P]>, x: [f64; D]) {
        let t = self.len - 1;
        for d in 0..D {
            let xs = scaler.scale_treatment(d, x[d]);
            self.enc[t * F_ENC + 2 * P + d] = xs;
            self.out[t * F_OUT + d] = xs;
            self.x_units[t * D + d] = x[d];
        }
        if let Some(y) = y {
            for p in 0..P {
                let ys = scaler.scale_outcome(y[p]);
                self.enc[t * F_ENC + p] = ys;
                self.enc[t * F_ENC + P + p] = 1.0;
                self.y[t * P + p] = ys;
                self.mask[t * P + p] = 1.0;
            }
        }
    }

    /// Appends one hour (used by autoregressive rollouts). `y` is `None` when unmeasured.
    pub fn push_hour(&mut self, scaler: &ScalerParams, y: Option<[f64; P]>, x: [f64; D], v: [f64; V], hour: usize) {
        let mut e = [0.0; F_ENC];
        let t = self.len;
        for p in 0..P {
            let prev = if t > 0 { self.enc[(t - 1) * F_ENC + p] } else { 0.0 };
            match y {
                Some(y) => {
                    let ys = scaler.scale_outcome(y[p]);
                    e[p] = ys;
                    e[P + p] = 1.0;
                    self.y.push(ys);
                    self.mask.push(1.0);
                }
                None => {
                    e[p] = prev;
                    self.y.push(0.0);
                    self.mask.push(0.0);
                }
            }
        }
        for d in 0..D {
            let xs = scaler.scale_treatment(d, x[d]);
            e[2 * P + d] = xs;
            self.out.push(xs);
            self.x_units.push(x[d]);
        }
        for c in 0..V {
            let vs = scaler.scale_covariate(v[c]);
            e[2 * P + D + c] = vs;
            self.out.push(vs);
            self.trt.push(vs);
        }
        self.enc.extend_from_slice(&e);
        self.hours.push(hour % 24);
        self.len += 1;
    }
}

/// Model inputs for `B` windows sharing the same past length.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    pub b: usize,
    pub past: usize,
    pub k: usize,
    /// `[B, past, F_ENC]`
    pub enc: Tensor,
    pub enc_hours: Vec<usize>,
    /// `[B, n_static]`
    pub stat: Tensor,
    /// `[B, k, F_OUT]`
    pub out: Tensor,
    /// `[B, k, F_TRT]`
    pub trt: Tensor,
    pub fut_hours: Vec<usize>,
    /// `[B, k, P]`
    pub y: Tensor,
    pub mask: Tensor,
    /// `[B, k, D]`
    pub x_units: Tensor,
    /// Position index of the first future hour.
    pub fut_pos: usize,
}

fn zero_cols(buf: &mut [f64], width: usize, cols: std::ops::Range<usize>) {
    for row in buf.chunks_mut(width) {
        for c in cols.clone() {
            row[c] = 0.0;
        }
    }
}

impl Batch {
    /// Windows `(timeline, split)` with encoder history `[split − past, split)`
    /// and future `[split, split + k)`. All windows must allow `past` history.
    pub fn windows(cfg: &ModelConfig, items: &[(&Timeline, usize)], past: usize, k: usize) -> Result<Self> {
        let b = items.len();
        if b == 0 {
            return Err(Error::shape("Batch", "empty batch"));
        }
        let n_static = items[0].0.static_features.len();
        let mut enc = Vec::with_capacity(b * past * F_ENC);
        let mut enc_hours = Vec::with_capacity(b * past);
        let mut stat = Vec::with_capacity(b * n_static);
        let mut out = Vec::with_capacity(b * k * F_OUT);
        let mut trt = Vec::with_capacity(b * k * F_TRT);
        let mut fut_hours = Vec::with_capacity(b * k);
        let mut y = Vec::with_capacity(b * k * P);
        let mut mask = Vec::with_capacity(b * k * P);
        let mut x_units = Vec::with_capacity(b * k * D);
        for &(tl, split) in items {
            if split < past || split + k > tl.len || tl.static_features.len() != n_static {
                return Err(Error::WindowBounds { t_split: split, k, t: tl.len });
            }
            let (s, e) = (split - past, split + k);
            enc.extend_from_slice(&tl.enc[s * F_ENC..split * F_ENC]);
            enc_hours.extend_from_slice(&tl.hours[s..split]);
            stat.extend_from_slice(&tl.static_features);
            out.extend_from_slice(&tl.out[split * F_OUT..e * F_OUT]);
            trt.extend_from_slice(&tl.trt[split * F_TRT..e * F_TRT]);
            fut_hours.extend_from_slice(&tl.hours[split..e]);
            y.extend_from_slice(&tl.y[split * P..e * P]);
            mask.extend_from_slice(&tl.mask[split * P..e * P]);
            x_units.extend_from_slice(&tl.x_units[split * D..e * D]);
        }
        let mut batch = Batch {
            b,
            past,
            k,
            enc: Tensor::new(vec![b, past, F_ENC], enc)?,
            enc_hours,
            stat: Tensor::new(vec![b, n_static], stat)?,
            out: Tensor::new(vec![b, k, F_OUT], out)?,
            trt: Tensor::new(vec![b, k, F_TRT], trt)?,
            fut_hours,
            y: Tensor::new(vec![b, k, P], y)?,
            mask: Tensor::new(vec![b, k, P], mask)?,
            x_units: Tensor::new(vec![b, k, D], x_units)?,
            fut_pos: past,
        };
        batch.apply_channels(cfg);
        Ok(batch)
    }

    /// Whole timelines for teacher-forced one-step training: the encoder sees
    /// every hour and the decoder has one query per hour.
    pub fn sequences(cfg: &ModelConfig, items: &[&Timeline]) -> Result<Self> {
        let len = items.first().ok_or_else(|| Error::shape("Batch", "empty batch"))?.len;
        if items.iter().any(|t| t.len != len) {
            return Err(Error::shape("Batch::sequences", "timelines differ in length"));
        }
        let pairs: Vec<(&Timeline, usize)> = items.iter().map(|&t| (t, 0)).collect();
        // Future block covers the whole sequence; encoder block is the same hours.
        let mut batch = Self::windows(cfg, &pairs, 0, len)?;
        let mut enc = Vec::with_capacity(items.len() * len * F_ENC);
        let mut hours = Vec::with_capacity(items.len() * len);
        for t in items {
            enc.extend_from_slice(&t.enc);
            hours.extend_from_slice(&t.hours);
        }
        batch.past = len;
        batch.enc = Tensor::new(vec![items.len(), len, F_ENC], enc)?;
        batch.enc_hours = hours;
        batch.fut_pos = 0;
        batch.apply_channels(cfg);
        Ok(batch)
    }

    /// Repeats a single-window batch `n` times.
    pub fn tile(&self, n: usize) -> Batch {
        assert_eq!(self.b, 1, "tile expects a single window");
        let rep = |t: &Tensor| super::net::tile_batch(t, n);
        let idx = |v: &[usize]| v.iter().copied().cycle().take(v.len() * n).collect::<Vec<_>>();
        Batch {
            b: n,
            past: self.past,
            k: self.k,
            enc: rep(&self.enc),
            enc_hours: idx(&self.enc_hours),
            stat: rep(&self.stat),
            out: rep(&self.out),
            trt: rep(&self.trt),
            fut_hours: idx(&self.fut_hours),
            y: rep(&self.y),
            mask: rep(&self.mask),
            x_units: rep(&self.x_units),
            fut_pos: self.fut_pos,
        }
    }

    /// One copy of a single-window batch per candidate future treatment.
    pub fn with_treatments(&self, cfg: &ModelConfig, scaler: &ScalerParams, xs: &[Channels<f64>]) -> Result<Batch> {
        let mut out = self.tile(xs.len());
        let k = self.k;
        for (i, x) in xs.iter().enumerate() {
            if x.rows() != D || x.cols() != k {
                return Err(Error::shape("candidate treatment", format!("{}x{}, expected {D}x{k}", x.rows(), x.cols())));
            }
            for t in 0..k {
                for d in 0..D {
                    let units = x.get(d, t);
                    out.x_units.data_mut()[(i * k + t) * D + d] = units;
                    out.out.data_mut()[(i * k + t) * F_OUT + d] = if cfg.uses(Channel::FutureX) {
                        scaler.scale_treatment(d, units)
                    } else {
                        0.0
                    };
                }
            }
        }
        Ok(out)
    }

    fn apply_channels(&mut self, cfg: &ModelConfig) {
        if !cfg.uses(Channel::PastY) {
            zero_cols(self.enc.data_mut(), F_ENC, 0..2 * P);
        }
        if !cfg.uses(Channel::PastX) {
            zero_cols(self.enc.data_mut(), F_ENC, 2 * P..2 * P + D);
        }
        if !cfg.uses(Channel::PastV) {
            zero_cols(self.enc.data_mut(), F_ENC, 2 * P + D..F_ENC);
        }
        if !cfg.uses(Channel::FutureX) {
            zero_cols(self.out.data_mut(), F_OUT, 0..D);
        }
        if !cfg.uses(Channel::FutureV) {
            zero_cols(self.out.data_mut(), F_OUT, D..F_OUT);
            zero_cols(self.trt.data_mut(), F_TRT, 0..F_TRT);
        }
        if !cfg.uses(Channel::Static) {
            self.stat.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::tests::toy_grid;

    #[test]
    fn glucose_is_carried_forward_from_measurements_only() {
        let mut grid = toy_grid(8);
        let scaler = ScalerParams::identity(grid.static_features.len());
        for t in 0..8 {
            grid.outcome_mask.set(0, t, t == 2 || t == 5);
            grid.outcomes.set(0, t, 100.0 + t as f64);
        }
        let tl = Timeline::from_grid(&scaler, &grid).unwrap();
        let carried: Vec<f64> = (0..8).map(|t| tl.enc[t * F_ENC]).collect();
        assert_eq!(carried, vec![0.0, 0.0, 102.0, 102.0, 102.0, 105.0, 105.0, 105.0]);
        let flags: Vec<f64> = (0..8).map(|t| tl.enc[t * F_ENC + 1]).collect();
        assert_eq!(flags, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(tl.y[3], 0.0);
    }

    #[test]
    fn excluded_channels_are_zeroed() {
        let grid = toy_grid(10);
        let scaler = ScalerParams::identity(grid.static_features.len());
        let tl = Timeline::from_grid(&scaler, &grid).unwrap();
        let cfg = ModelConfig {
            channels: vec![Channel::PastY],
            ..ModelConfig::tiny(super::super::Mode::Parametric)
        };
        let b = Batch::windows(&cfg, &[(&tl, 5)], 4, 3).unwrap();
        for row in b.enc.data().chunks(F_ENC) {
            assert!(row[2 * P..].iter().all(|&v| v == 0.0));
        }
        assert!(b.out.data().iter().all(|&v| v == 0.0));
        assert!(b.stat.data().iter().all(|&v| v == 0.0));
        // Targets are never masked by the conditioning set.
        assert_eq!(b.x_units.data(), &tl.x_units[5 * D..8 * D]);
    }
}
