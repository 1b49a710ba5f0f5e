//! Irregular records to hourly grids, plus scaling and the dataset file.
//!
//! Glucose is linearly interpolated between measured hours (held constant
//! before the first and after the last measurement) and only measured hours
//! are flagged in the mask. Insulin and carbohydrates are summed into their
//! hour bin and are zero elsewhere. Bins use `floor(time_hours)`.
//!
//! Grids always keep raw units: insulin stays in whole units for the Poisson
//! likelihood, and the network inputs are scaled on the fly with
//! [`ScalerParams`].

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::trajectory::{Channels, EventKind, Grid, PatientRecord, D, P, V};

/// Linear scaling parameters fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub outcome_mean: f64,
    pub outcome_sd: f64,
    /// One per treatment channel; treatments are scaled, never shifted.
    pub treatment_sd: Vec<f64>,
    pub covariate_sd: f64,
    pub static_mean: Vec<f64>,
    pub static_sd: Vec<f64>,
}

impl ScalerParams {
    pub fn identity(n_static: usize) -> Self {
        Self {
            outcome_mean: 0.0,
            outcome_sd: 1.0,
            treatment_sd: vec![1.0; D],
            covariate_sd: 1.0,
            static_mean: vec![0.0; n_static],
            static_sd: vec![1.0; n_static],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sds = std::iter::once(self.outcome_sd)
            .chain(self.treatment_sd.iter().copied())
            .chain(std::iter::once(self.covariate_sd))
            .chain(self.static_sd.iter().copied());
        for sd in sds {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::InvalidArgument(format!("scaler sd {sd} must be positive")));
            }
        }
        if self.treatment_sd.len() != D || self.static_mean.len() != self.static_sd.len() {
            return Err(Error::shape("ScalerParams", "channel counts"));
        }
        Ok(())
    }

    pub fn scale_outcome(&self, y: f64) -> f64 {
        (y - self.outcome_mean) / self.outcome_sd
    }

    pub fn unscale_outcome(&self, z: f64) -> f64 {
        z * self.outcome_sd + self.outcome_mean
    }

    pub fn scale_treatment(&self, channel: usize, x: f64) -> f64 {
        x / self.treatment_sd[channel]
    }

    pub fn scale_covariate(&self, v: f64) -> f64 {
        v / self.covariate_sd
    }

    pub fn scale_static(&self, i: usize, s: f64) -> f64 {
        (s - self.static_mean[i]) / self.static_sd[i]
    }
}

/// Hour bin of an event time; an event exactly at the horizon goes to the last bin.
fn bin(t: f64, len: usize) -> usize {
    (t.floor() as usize).min(len - 1)
}

/// Converts a record to an hourly grid. Admission is taken to be midnight,
/// so grid index `t` has clock hour `t mod 24`.
pub fn resample_hourly(record: &PatientRecord) -> Result<Grid> {
    record.validate()?;
    let t_len = record.horizon_hours.ceil() as usize;
    let mut sums = vec![0.0; t_len];
    let mut counts = vec![0usize; t_len];
    let mut treatments = Channels::zeros(D, t_len);
    let mut covariates = Channels::zeros(V, t_len);
    for ev in &record.events {
        let h = bin(ev.time_hours, t_len);
        match ev.kind {
            EventKind::Glucose => {
                sums[h] += ev.value;
                counts[h] += 1;
            }
            EventKind::Basal => treatments.row_mut(0)[h] += ev.value,
            EventKind::Bolus => treatments.row_mut(1)[h] += ev.value,
            EventKind::Carbs => covariates.row_mut(0)[h] += ev.value,
        }
    }
    let n_glucose = record.events_of(EventKind::Glucose).count();
    if n_glucose < 2 {
        return Err(Error::InsufficientData(format!(
            "{}: {n_glucose} glucose events, need at least 2",
            record.id
        )));
    }
    let anchors: Vec<(usize, f64)> = (0..t_len)
        .filter(|&h| counts[h] > 0)
        .map(|h| (h, sums[h] / counts[h] as f64))
        .collect();

    let mut outcomes = Channels::zeros(P, t_len);
    let mut mask = Channels::filled(P, t_len, false);
    let first = anchors[0];
    let last = anchors[anchors.len() - 1];
    let mut seg = 0;
    for h in 0..t_len {
        let value = if h <= first.0 {
            first.1
        } else if h >= last.0 {
            last.1
        } else {
            while anchors[seg + 1].0 < h {
                seg += 1;
            }
            let (h0, v0) = anchors[seg];
            let (h1, v1) = anchors[seg + 1];
            if h == h1 {
                v1
            } else {
                v0 + (v1 - v0) * (h - h0) as f64 / (h1 - h0) as f64
            }
        };
        outcomes.set(0, h, value);
        mask.set(0, h, counts[h] > 0);
    }
    let grid = Grid {
        id: record.id.clone(),
        static_features: record.static_features.clone(),
        outcomes,
        treatments,
        covariates,
        outcome_mask: mask,
        hours_of_day: (0..t_len).map(|t| (t % 24) as u32).collect(),
    };
    grid.validate()?;
    Ok(grid)
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// A channel whose spread is zero (or numerically so) keeps unit scale.
fn usable_sd(sd: f64) -> f64 {
    if sd > 1e-12 && sd.is_finite() {
        sd
    } else {
        1.0
    }
}

/// Population mean/sd over measured outcomes, sd over all treatment and
/// covariate cells, and mean/sd of static features across patients.
pub fn fit_scaler(grids: &[Grid]) -> Result<ScalerParams> {
    if grids.is_empty() {
        return Err(Error::InsufficientData("cannot fit a scaler on an empty dataset".into()));
    }
    let measured = || {
        grids.iter().flat_map(|g| {
            g.outcomes
                .as_slice()
                .iter()
                .zip(g.outcome_mask.as_slice())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
        })
    };
    if measured().take(2).count() < 2 {
        return Err(Error::InsufficientData("need at least two measured outcomes".into()));
    }
    let (outcome_mean, outcome_sd) = mean_sd(measured());
    let treatment_sd = (0..D)
        .map(|d| usable_sd(mean_sd(grids.iter().flat_map(|g| g.treatments.row(d).iter().copied())).1))
        .collect();
    let covariate_sd = usable_sd(mean_sd(grids.iter().flat_map(|g| g.covariates.row(0).iter().copied())).1);
    let n_static = grids[0].static_features.len();
    if grids.iter().any(|g| g.static_features.len() != n_static) {
        return Err(Error::shape("fit_scaler", "static feature lengths differ across patients"));
    }
    let (static_mean, static_sd) = (0..n_static)
        .map(|i| {
            let (m, s) = mean_sd(grids.iter().map(|g| g.static_features[i]));
            (m, usable_sd(s))
        })
        .unzip();
    Ok(ScalerParams {
        outcome_mean,
        outcome_sd: usable_sd(outcome_sd),
        treatment_sd,
        covariate_sd,
        static_mean,
        static_sd,
    })
}

fn check_shape(grid: &Grid, params: &ScalerParams) -> Result<()> {
    if grid.outcomes.rows() != P
        || grid.treatments.rows() != params.treatment_sd.len()
        || grid.covariates.rows() != V
        || grid.static_features.len() != params.static_mean.len()
    {
        return Err(Error::shape("scaler", "grid channels do not match scaler"));
    }
    Ok(())
}

/// Returns a scaled copy of `grid`; masks and hours are untouched.
pub fn apply_scaler(grid: &Grid, params: &ScalerParams) -> Result<Grid> {
    check_shape(grid, params)?;
    let mut out = grid.clone();
    for v in out.outcomes.as_mut_slice() {
        *v = params.scale_outcome(*v);
    }
    for d in 0..D {
        for v in out.treatments.row_mut(d) {
            *v = params.scale_treatment(d, *v);
        }
    }
    for v in out.covariates.as_mut_slice() {
        *v = params.scale_covariate(*v);
    }
    for (i, v) in out.static_features.iter_mut().enumerate() {
        *v = params.scale_static(i, *v);
    }
    Ok(out)
}

/// Inverse of [`apply_scaler`].
pub fn invert_scaler(grid: &Grid, params: &ScalerParams) -> Result<Grid> {
    check_shape(grid, params)?;
    let mut out = grid.clone();
    for v in out.outcomes.as_mut_slice() {
        *v = params.unscale_outcome(*v);
    }
    for d in 0..D {
        for v in out.treatments.row_mut(d) {
            *v *= params.treatment_sd[d];
        }
    }
    for v in out.covariates.as_mut_slice() {
        *v *= params.covariate_sd;
    }
    for (i, v) in out.static_features.iter_mut().enumerate() {
        *v = *v * params.static_sd[i] + params.static_mean[i];
    }
    Ok(out)
}

/// Unscales a slice of outcome values in place.
pub fn invert_outcomes(values: &mut [f64], params: &ScalerParams) {
    for v in values {
        *v = params.unscale_outcome(*v);
    }
}

/// A preprocessed cohort in raw units, with an optional dataset-level scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grids: Vec<Grid>,
    pub scaler: Option<ScalerParams>,
}

pub const DATASET_MAGIC: &[u8; 8] = b"GLYCODS1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    #[serde(rename = "P")]
    p: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "V")]
    v: usize,
    scaler: Option<ScalerParams>,
    patients: Vec<PatientIndex>,
}

/// Per-patient entry: float block = outcomes (P·T), treatments (D·T),
/// covariates (V·T), static features; mask block = P·T bits.
#[derive(Debug, Serialize, Deserialize)]
struct PatientIndex {
    id: String,
    #[serde(rename = "T")]
    t: usize,
    start_hour: u32,
    n_static: usize,
    float_offset: usize,
    mask_offset: usize,
}

impl Dataset {
    pub fn from_records(records: &[PatientRecord]) -> Result<Self> {
        let grids = records.iter().map(resample_hourly).collect::<Result<Vec<_>>>()?;
        let scaler = Some(fit_scaler(&grids)?);
        Ok(Self { grids, scaler })
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut floats = Vec::new();
        let mut bits = Vec::new();
        let mut patients = Vec::with_capacity(self.grids.len());
        for g in &self.grids {
            let t = g.len();
            let start_hour = g.hours_of_day.first().copied().unwrap_or(0);
            if g.hours_of_day.iter().enumerate().any(|(i, &h)| h != (start_hour + i as u32) % 24) {
                return Err(Error::Format(format!("{}: hours of day are not consecutive", g.id)));
            }
            patients.push(PatientIndex {
                id: g.id.clone(),
                t,
                start_hour,
                n_static: g.static_features.len(),
                float_offset: floats.len(),
                mask_offset: bits.len(),
            });
            floats.extend_from_slice(g.outcomes.as_slice());
            floats.extend_from_slice(g.treatments.as_slice());
            floats.extend_from_slice(g.covariates.as_slice());
            floats.extend_from_slice(&g.static_features);
            bits.extend_from_slice(g.outcome_mask.as_slice());
        }
        let manifest = DatasetManifest {
            version: DATASET_VERSION,
            p: P,
            d: D,
            v: V,
            scaler: self.scaler.clone(),
            patients,
        };
        container::write_framed(w, DATASET_MAGIC, &serde_json::to_vec(&manifest)?, &floats, &bits)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let framed = container::read_framed(r, DATASET_MAGIC)?;
        let manifest: DatasetManifest = serde_json::from_slice(&framed.manifest)?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::Format(format!("dataset version {} unsupported", manifest.version)));
        }
        if (manifest.p, manifest.d, manifest.v) != (P, D, V) {
            return Err(Error::Format("dataset channel counts differ from this build".into()));
        }
        let mut grids = Vec::with_capacity(manifest.patients.len());
        for p in manifest.patients {
            let t = p.t;
            let need = (P + D + V) * t + p.n_static;
            let block = framed
                .floats
                .get(p.float_offset..p.float_offset + need)
                .ok_or_else(|| Error::Format(format!("{}: float block out of range", p.id)))?;
            let mask = framed
                .bits
                .get(p.mask_offset..p.mask_offset + P * t)
                .ok_or_else(|| Error::Format(format!("{}: mask block out of range", p.id)))?;
            let (o, rest) = block.split_at(P * t);
            let (x, rest) = rest.split_at(D * t);
            let (v, s) = rest.split_at(V * t);
            let grid = Grid {
                id: p.id,
                static_features: s.to_vec(),
                outcomes: Channels::from_vec(P, t, o.to_vec())?,
                treatments: Channels::from_vec(D, t, x.to_vec())?,
                covariates: Channels::from_vec(V, t, v.to_vec())?,
                outcome_mask: Channels::from_vec(P, t, mask.to_vec())?,
                hours_of_day: (0..t).map(|i| (p.start_hour + i as u32) % 24).collect(),
            };
            grid.validate()?;
            grids.push(grid);
        }
        Ok(Self {
            grids,
            scaler: manifest.scaler,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Event;
    use proptest::prelude::*;

    fn record(events: Vec<Event>, horizon: f64) -> PatientRecord {
        PatientRecord::new("r", vec![50.0, 70.0, 1.0], horizon, events).unwrap()
    }

    #[test]
    fn linear_midpoint_is_imputed_and_unmasked() {
        let r = record(
            vec![
                Event::new(10.0, EventKind::Glucose, 6.0),
                Event::new(12.0, EventKind::Glucose, 8.0),
            ],
            24.0,
        );
        let g = resample_hourly(&r).unwrap();
        assert_eq!(g.len(), 24);
        assert!((g.outcomes.get(0, 11) - 7.0).abs() < 1e-12);
        assert!(!g.outcome_mask.get(0, 11));
        assert!(g.outcome_mask.get(0, 10) && g.outcome_mask.get(0, 12));
        // Held constant outside the measured span.
        assert_eq!(g.outcomes.get(0, 0), 6.0);
        assert_eq!(g.outcomes.get(0, 23), 8.0);
    }

    #[test]
    fn boluses_in_one_hour_are_summed() {
        let r = record(
            vec![
                Event::new(1.0, EventKind::Glucose, 6.0),
                Event::new(12.2, EventKind::Bolus, 4.0),
                Event::new(12.8, EventKind::Bolus, 3.0),
                Event::new(20.0, EventKind::Glucose, 7.0),
            ],
            24.0,
        );
        let g = resample_hourly(&r).unwrap();
        assert_eq!(g.treatments.get(1, 12), 7.0);
        assert_eq!(g.treatments.get(1, 5), 0.0);
        assert_eq!(g.treatments.get(0, 5), 0.0);
        assert_eq!(g.covariates.get(0, 5), 0.0);
        assert!(!g.outcome_mask.get(0, 5));
    }

    #[test]
    fn horizon_rounds_up_and_boundary_event_lands_in_last_bin() {
        let r = record(
            vec![
                Event::new(0.5, EventKind::Glucose, 6.0),
                Event::new(9.5, EventKind::Glucose, 7.0),
                Event::new(9.5, EventKind::Carbs, 30.0),
            ],
            9.5,
        );
        let g = resample_hourly(&r).unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g.covariates.get(0, 9), 30.0);
    }

    #[test]
    fn too_few_glucose_events() {
        let r = record(vec![Event::new(1.0, EventKind::Glucose, 6.0)], 10.0);
        assert!(matches!(resample_hourly(&r), Err(Error::InsufficientData(_))));
    }

    fn grid_with(y: &[f64], mask: &[bool], bolus: &[f64]) -> Grid {
        let t = y.len();
        Grid {
            id: "g".into(),
            static_features: vec![1.0],
            outcomes: Channels::from_vec(P, t, y.to_vec()).unwrap(),
            treatments: Channels::from_vec(D, t, [vec![0.0; t], bolus.to_vec()].concat()).unwrap(),
            covariates: Channels::zeros(V, t),
            outcome_mask: Channels::from_vec(P, t, mask.to_vec()).unwrap(),
            hours_of_day: (0..t as u32).collect(),
        }
    }

    #[test]
    fn scaler_on_two_measurements() {
        let g = grid_with(&[4.0, 100.0, 6.0], &[true, false, true], &[0.0, 2.0, 0.0]);
        let s = fit_scaler(&[g.clone()]).unwrap();
        assert!((s.outcome_mean - 5.0).abs() < 1e-12);
        assert!((s.outcome_sd - 1.0).abs() < 1e-12);
        let scaled = apply_scaler(&g, &s).unwrap();
        assert!((scaled.outcomes.get(0, 0) + 1.0).abs() < 1e-12);
        assert!((scaled.outcomes.get(0, 2) - 1.0).abs() < 1e-12);
        // All-zero basal channel keeps unit scale and stays zero.
        assert_eq!(s.treatment_sd[0], 1.0);
        assert!(scaled.treatments.row(0).iter().all(|&v| v == 0.0));
        // Scale-only: zeros stay zeros on the bolus channel too.
        assert_eq!(scaled.treatments.get(1, 0), 0.0);
        assert_eq!(scaled.outcome_mask, g.outcome_mask);
    }

    #[test]
    fn scaler_worked_values() {
        let mut s = ScalerParams::identity(1);
        assert_eq!(s.scale_outcome(7.0), 7.0);
        s.outcome_mean = 8.0;
        s.outcome_sd = 2.0;
        assert_eq!(s.scale_outcome(7.0), -0.5);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(fit_scaler(&[]).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let g = grid_with(&[4.0, 6.0], &[true, true], &[0.0, 0.0]);
        let s = ScalerParams::identity(3);
        assert!(apply_scaler(&g, &s).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let g1 = grid_with(&[4.0, 5.0, 6.0], &[true, false, true], &[0.0, 2.0, 0.0]);
        let g2 = grid_with(&[7.0, 8.0], &[false, true], &[1.0, 0.0]);
        let ds = Dataset {
            scaler: Some(fit_scaler(&[g1.clone(), g2.clone()]).unwrap()),
            grids: vec![g1, g2],
        };
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        assert_eq!(Dataset::read(&buf[..]).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn scaler_round_trip(y in proptest::collection::vec(1.0f64..30.0, 4..30),
                             mean in -5.0f64..10.0, sd in 0.1f64..5.0) {
            let t = y.len();
            let mask: Vec<bool> = (0..t).map(|i| i % 2 == 0).collect();
            let bolus: Vec<f64> = (0..t).map(|i| (i % 4) as f64).collect();
            let g = grid_with(&y, &mask, &bolus);
            let params = ScalerParams {
                outcome_mean: mean,
                outcome_sd: sd,
                treatment_sd: vec![1.7, sd],
                covariate_sd: 3.0,
                static_mean: vec![0.5],
                static_sd: vec![2.0],
            };
            let back = invert_scaler(&apply_scaler(&g, &params).unwrap(), &params).unwrap();
            for (a, b) in back.outcomes.as_slice().iter().zip(g.outcomes.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in back.treatments.as_slice().iter().zip(g.treatments.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(back.outcome_mask, g.outcome_mask);
        }

        #[test]
        fn resampling_never_marks_imputed_hours(times in proptest::collection::vec(0.0f64..47.9, 2..12)) {
            let events = times.iter().map(|&t| Event::new(t, EventKind::Glucose, 7.0)).collect();
            let r = record(events, 48.0);
            let g = resample_hourly(&r).unwrap();
            for h in 0..48 {
                let measured = times.iter().any(|&t| t.floor() as usize == h);
                prop_assert_eq!(g.outcome_mask.get(0, h), measured);
            }
        }
    }
}
