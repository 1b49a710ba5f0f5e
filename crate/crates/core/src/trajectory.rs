//! Patient records, hourly grids and past/future windows.
//!
//! A [`PatientRecord`] keeps the irregular, multi-rate event stream exactly
//! as recorded. Preprocessing turns it into a [`Grid`]: one hourly time axis
//! shared by outcomes (`P` channels, glucose), treatments (`D` channels,
//! basal and bolus insulin) and covariates (`V` channels, carbohydrates).
//! Windows split a grid into a conditioning [`Context`] and a fixed-length
//! future of `K` hours.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of outcome channels (glucose).
pub const P: usize = 1;
/// Number of treatment channels (basal, bolus).
pub const D: usize = 2;
/// Number of covariate channels (carbohydrates).
pub const V: usize = 1;
/// Default future window length in hours.
pub const DEFAULT_K: usize = 24;

/// Upper sanity bound for a glucose reading, mmol/L.
pub const GLUCOSE_MAX: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Glucose,
    Basal,
    Bolus,
    Carbs,
}

/// One timestamped observation or intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Hours since admission.
    #[serde(rename = "t")]
    pub time_hours: f64,
    pub kind: EventKind,
    /// mmol/L for glucose, insulin units for basal/bolus, grams for carbs.
    pub value: f64,
}

impl Event {
    pub fn new(time_hours: f64, kind: EventKind, value: f64) -> Self {
        Self {
            time_hours,
            kind,
            value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.time_hours.is_finite() || self.time_hours < 0.0 {
            return Err(Error::InvalidRecord(format!(
                "event time {} is not a non-negative number",
                self.time_hours
            )));
        }
        if !self.value.is_finite() || self.value < 0.0 {
            return Err(Error::InvalidRecord(format!(
                "{:?} value {} is negative or non-finite",
                self.kind, self.value
            )));
        }
        match self.kind {
            EventKind::Glucose if self.value <= 0.0 || self.value >= GLUCOSE_MAX => {
                Err(Error::InvalidRecord(format!(
                    "glucose {} outside (0, {GLUCOSE_MAX})",
                    self.value
                )))
            }
            EventKind::Basal | EventKind::Bolus if self.value.fract() != 0.0 => Err(
                Error::InvalidRecord(format!("insulin dose {} is not whole units", self.value)),
            ),
            _ => Ok(()),
        }
    }
}

/// Irregularly sampled history of one admission plus static features
/// (age in years, weight in kg, type-2 flag for the synthetic cohort).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    #[serde(rename = "static")]
    pub static_features: Vec<f64>,
    pub horizon_hours: f64,
    pub events: Vec<Event>,
}

impl PatientRecord {
    /// Builds a record, sorting events by time (stable, so equal times keep
    /// their insertion order) and validating every invariant.
    pub fn new(
        id: impl Into<String>,
        static_features: Vec<f64>,
        horizon_hours: f64,
        mut events: Vec<Event>,
    ) -> Result<Self> {
        events.sort_by(|a, b| a.time_hours.total_cmp(&b.time_hours));
        let record = Self {
            id: id.into(),
            static_features,
            horizon_hours,
            events,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_hours.is_finite() && self.horizon_hours > 0.0) {
            return Err(Error::InvalidRecord(format!(
                "{}: horizon {} must be positive",
                self.id, self.horizon_hours
            )));
        }
        if self.static_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord(format!("{}: non-finite static feature", self.id)));
        }
        let mut prev = 0.0;
        for ev in &self.events {
            ev.validate()?;
            if ev.time_hours < prev {
                return Err(Error::InvalidRecord(format!("{}: events not time-sorted", self.id)));
            }
            if ev.time_hours > self.horizon_hours {
                return Err(Error::InvalidRecord(format!(
                    "{}: event at {} beyond horizon {}",
                    self.id, ev.time_hours, self.horizon_hours
                )));
            }
            prev = ev.time_hours;
        }
        Ok(())
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }
}

/// Reads one record per non-empty line.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<PatientRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, records: &[PatientRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Row-major `rows × cols` array: one row per channel, one column per hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channels<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Channels<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::default())
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Channels::from_vec",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Columns `[start, end)` of every row.
    pub fn cols_range(&self, start: usize, end: usize) -> Self {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Appends the columns of `other` after the columns of `self`.
    pub fn hconcat(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "Channels::hconcat",
                format!("{} rows vs {} rows", self.rows, other.rows),
            ));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Channels<U> {
        Channels {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Hourly grid for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub id: String,
    pub static_features: Vec<f64>,
    /// P × T glucose, measured or linearly imputed.
    pub outcomes: Channels<f64>,
    /// D × T insulin units (basal, bolus); zero where nothing was given.
    pub treatments: Channels<f64>,
    /// V × T carbohydrate grams.
    pub covariates: Channels<f64>,
    /// P × T, true where the hour holds a real measurement.
    pub outcome_mask: Channels<bool>,
    pub hours_of_day: Vec<u32>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.hours_of_day.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours_of_day.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let shapes = [
            ("outcomes", self.outcomes.cols()),
            ("treatments", self.treatments.cols()),
            ("covariates", self.covariates.cols()),
            ("outcome_mask", self.outcome_mask.cols()),
        ];
        for (name, cols) in shapes {
            if cols != t {
                return Err(Error::shape("Grid::validate", format!("{name} has {cols} columns, T={t}")));
            }
        }
        if self.outcomes.rows() != self.outcome_mask.rows() {
            return Err(Error::shape("Grid::validate", "mask rows differ from outcome rows"));
        }
        for (v, m) in self.outcomes.as_slice().iter().zip(self.outcome_mask.as_slice()) {
            if *m && !v.is_finite() {
                return Err(Error::InvalidRecord(format!("{}: measured outcome not finite", self.id)));
            }
        }
        if self.treatments.as_slice().iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidRecord(format!("{}: negative treatment", self.id)));
        }
        Ok(())
    }
}

/// Everything known when a decision is made for the next `K` hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub patient_id: String,
    /// Grid index of the first future hour.
    pub t_split: usize,
    pub past_outcomes: Channels<f64>,
    pub past_mask: Channels<bool>,
    pub past_treatments: Channels<f64>,
    pub past_covariates: Channels<f64>,
    pub past_hours: Vec<u32>,
    pub future_covariates: Channels<f64>,
    pub future_hours: Vec<u32>,
    pub static_features: Vec<f64>,
}

impl Context {
    pub fn past_len(&self) -> usize {
        self.past_hours.len()
    }

    pub fn horizon(&self) -> usize {
        self.future_hours.len()
    }

    /// Mean of the measured past outcomes for channel `p`, if any.
    pub fn measured_past_mean(&self, p: usize) -> Option<f64> {
        let (sum, n) = self
            .past_outcomes
            .row(p)
            .iter()
            .zip(self.past_mask.row(p))
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// Index and value of the last measured past glucose.
    pub fn last_measured(&self, p: usize) -> Option<(usize, f64)> {
        let mask = self.past_mask.row(p);
        (0..mask.len())
            .rev()
            .find(|&i| mask[i])
            .map(|i| (i, self.past_outcomes.get(p, i)))
    }
}

/// A context plus the observed future it is paired with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub context: Context,
    pub future_outcomes: Channels<f64>,
    pub future_treatments: Channels<f64>,
    pub future_mask: Channels<bool>,
}

/// Splits `grid` into past `[0, t_split)` and future `[t_split, t_split + k)`.
pub fn split_window(grid: &Grid, t_split: usize, k: usize) -> Result<Window> {
    let t = grid.len();
    if t_split < 1 || k < 1 || t_split + k > t {
        return Err(Error::WindowBounds { t_split, k, t });
    }
    let end = t_split + k;
    let context = Context {
        patient_id: grid.id.clone(),
        t_split,
        past_outcomes: grid.outcomes.cols_range(0, t_split),
        past_mask: grid.outcome_mask.cols_range(0, t_split),
        past_treatments: grid.treatments.cols_range(0, t_split),
        past_covariates: grid.covariates.cols_range(0, t_split),
        past_hours: grid.hours_of_day[..t_split].to_vec(),
        future_covariates: grid.covariates.cols_range(t_split, end),
        future_hours: grid.hours_of_day[t_split..end].to_vec(),
        static_features: grid.static_features.clone(),
    };
    Ok(Window {
        context,
        future_outcomes: grid.outcomes.cols_range(t_split, end),
        future_treatments: grid.treatments.cols_range(t_split, end),
        future_mask: grid.outcome_mask.cols_range(t_split, end),
    })
}

/// Admissible split points `1, 1 + stride, …, T − K`. Empty when `T ≤ K`.
pub fn window_starts(t: usize, k: usize, stride: usize) -> Vec<usize> {
    assert!(k >= 1 && stride >= 1, "K and stride must be positive");
    if t <= k {
        return Vec::new();
    }
    (1..=t - k).step_by(stride).collect()
}

/// All windows of length `k` sliding with `stride`. A grid with `T ≤ K`
/// has no admissible split and yields an empty vector.
pub fn moving_windows(grid: &Grid, k: usize, stride: usize) -> Vec<Window> {
    window_starts(grid.len(), k, stride)
        .into_iter()
        .map(|s| split_window(grid, s, k).expect("start drawn from admissible range"))
        .collect()
}

/// Split points whose first future hour is midnight and whose full window fits.
pub fn midnight_starts(grid: &Grid, k: usize) -> Vec<usize> {
    window_starts(grid.len(), k, 1)
        .into_iter()
        .filter(|&s| grid.hours_of_day[s] == 0)
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn toy_grid(t: usize) -> Grid {
        let outcomes = Channels::from_vec(P, t, (0..t).map(|i| 5.0 + i as f64 * 0.1).collect()).unwrap();
        let treatments =
            Channels::from_vec(D, t, (0..D * t).map(|i| (i % 5) as f64).collect()).unwrap();
        let covariates = Channels::from_vec(V, t, (0..t).map(|i| (i % 7) as f64 * 10.0).collect()).unwrap();
        let outcome_mask = Channels::from_vec(P, t, (0..t).map(|i| i % 3 == 0).collect()).unwrap();
        Grid {
            id: "toy".into(),
            static_features: vec![60.0, 80.0, 1.0],
            outcomes,
            treatments,
            covariates,
            outcome_mask,
            hours_of_day: (0..t).map(|i| (i % 24) as u32).collect(),
        }
    }

    #[test]
    fn split_partition_sizes() {
        let w = split_window(&toy_grid(48), 24, 24).unwrap();
        assert_eq!(w.context.past_len(), 24);
        assert_eq!(w.future_outcomes.cols(), 24);

        let w = split_window(&toy_grid(25), 1, 24).unwrap();
        assert_eq!(w.context.past_len(), 1);
        assert_eq!(w.future_outcomes.cols(), 24);
    }

    #[test]
    fn split_out_of_bounds() {
        assert!(matches!(
            split_window(&toy_grid(48), 30, 24),
            Err(Error::WindowBounds { t_split: 30, .. })
        ));
        assert!(split_window(&toy_grid(48), 0, 24).is_err());
    }

    #[test]
    fn moving_window_counts() {
        let starts: Vec<usize> = moving_windows(&toy_grid(26), 24, 1)
            .iter()
            .map(|w| w.context.t_split)
            .collect();
        assert_eq!(starts, vec![1, 2]);
        let w = moving_windows(&toy_grid(48), 24, 24);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].context.t_split, 1);
        assert!(moving_windows(&toy_grid(24), 24, 1).is_empty());
    }

    #[test]
    fn event_validation() {
        assert!(Event::new(1.0, EventKind::Bolus, 2.5).validate().is_err());
        assert!(Event::new(1.0, EventKind::Glucose, 60.0).validate().is_err());
        assert!(Event::new(-1.0, EventKind::Carbs, 20.0).validate().is_err());
        assert!(Event::new(1.0, EventKind::Basal, 12.0).validate().is_ok());
    }

    #[test]
    fn record_sorts_and_rejects_late_events() {
        let r = PatientRecord::new(
            "a",
            vec![1.0],
            10.0,
            vec![
                Event::new(5.0, EventKind::Glucose, 7.0),
                Event::new(2.0, EventKind::Glucose, 6.0),
            ],
        )
        .unwrap();
        assert_eq!(r.events[0].time_hours, 2.0);
        assert!(PatientRecord::new("b", vec![], 4.0, vec![Event::new(5.0, EventKind::Carbs, 1.0)]).is_err());
    }

    #[test]
    fn jsonl_wire_format() {
        let line = r#"{"id":"p1","static":[70.0,80.0,1.0],"horizon_hours":48.0,"events":[{"t":7.2,"kind":"glucose","value":6.5},{"t":7.5,"kind":"bolus","value":4.0}]}"#;
        let records = read_jsonl(std::io::Cursor::new(format!("{line}\n"))).unwrap();
        assert_eq!(records[0].events[1].kind, EventKind::Bolus);
        let mut out = Vec::new();
        write_jsonl(&mut out, &records).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{line}\n"));
    }

    proptest! {
        #[test]
        fn window_round_trip(t in 2usize..60, k in 1usize..30, split_frac in 0.0f64..1.0) {
            prop_assume!(t > k);
            let grid = toy_grid(t);
            let t_split = 1 + ((t - k - 1) as f64 * split_frac) as usize;
            let w = split_window(&grid, t_split, k).unwrap();
            let y = w.context.past_outcomes.hconcat(&w.future_outcomes).unwrap();
            prop_assert_eq!(&y, &grid.outcomes.cols_range(0, t_split + k));
            let x = w.context.past_treatments.hconcat(&w.future_treatments).unwrap();
            prop_assert_eq!(&x, &grid.treatments.cols_range(0, t_split + k));
            let m = w.context.past_mask.hconcat(&w.future_mask).unwrap();
            prop_assert_eq!(&m, &grid.outcome_mask.cols_range(0, t_split + k));
        }

        #[test]
        fn stride_one_covers_future(t in 2usize..80, k in 1usize..30) {
            prop_assume!(t > k);
            let starts = window_starts(t, k, 1);
            prop_assert_eq!(starts.len(), t - k);
            for idx in 1..t {
                prop_assert!(starts.iter().any(|&s| s <= idx && idx < s + k));
            }
        }

        #[test]
        fn count_formula(t in 2usize..100, k in 1usize..30, stride in 1usize..10) {
            prop_assume!(t > k);
            prop_assert_eq!(window_starts(t, k, stride).len(), (t - k - 1) / stride + 1);
        }
    }
}
