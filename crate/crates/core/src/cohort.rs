//! Synthetic hospitalised-diabetes cohorts.
//!
//! Each patient has a latent [`Phenotype`] driving a two-compartment hourly
//! model: insulin-on-board and carbs-on-board decay with first-order
//! half-lives and their absorbed fractions move glucose, which otherwise
//! relaxes toward a personal set point. Treatments follow a sliding-scale
//! behavioural policy that is informative but deliberately imperfect.
//!
//! The same dynamics serve as the ground-truth environment when generated
//! treatment strategies are evaluated (see [`environment_rollout`]).

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::trajectory::{Channels, Context, Event, EventKind, PatientRecord, D, P, V};

/// Glucose is clamped to this physiological range after every step.
pub const GLUCOSE_CLAMP: (f64, f64) = (1.0, 35.0);

/// Latent per-patient physiology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phenotype {
    /// mmol/L drop per absorbed insulin unit.
    pub insulin_sensitivity: f64,
    /// mmol/L rise per 10 g absorbed carbohydrate.
    pub carb_sensitivity: f64,
    /// Fraction of the gap to the set point closed per hour.
    pub endogenous_drift: f64,
    /// mmol/L.
    pub set_point: f64,
    /// Per-step process noise, mmol/L.
    pub noise_sd: f64,
}

impl Phenotype {
    pub fn validate(&self) -> Result<()> {
        let ok = self.insulin_sensitivity > 0.0
            && self.carb_sensitivity > 0.0
            && (0.0..=1.0).contains(&self.endogenous_drift)
            && (6.0..=12.0).contains(&self.set_point)
            && self.noise_sd >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Simulation(format!("invalid phenotype {self:?}")))
        }
    }
}

/// Log-uniform sampling bounds for each phenotype field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhenotypeRanges {
    pub insulin_sensitivity: (f64, f64),
    pub carb_sensitivity: (f64, f64),
    pub endogenous_drift: (f64, f64),
    pub set_point: (f64, f64),
    pub noise_sd: (f64, f64),
}

impl Default for PhenotypeRanges {
    fn default() -> Self {
        Self {
            insulin_sensitivity: (0.15, 0.5),
            carb_sensitivity: (0.5, 1.2),
            endogenous_drift: (0.08, 0.25),
            set_point: (6.0, 12.0),
            noise_sd: (0.2, 0.5),
        }
    }
}

/// First-order absorption constants (hours).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub insulin_half_life: f64,
    pub carb_half_life: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Self {
            insulin_half_life: 2.0,
            carb_half_life: 1.0,
        }
    }
}

impl Dynamics {
    fn insulin_fraction(&self) -> f64 {
        1.0 - 0.5f64.powf(1.0 / self.insulin_half_life)
    }

    fn carb_fraction(&self) -> f64 {
        1.0 - 0.5f64.powf(1.0 / self.carb_half_life)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub meal_hours: Vec<u32>,
    pub measure_hours: Vec<u32>,
    /// Measurement hour is shifted uniformly by up to this many hours.
    pub measure_jitter: u32,
    pub carb_range: (f64, f64),
    pub basal_dose_range: (u32, u32),
    pub bolus_dose_range: (u32, u32),
    pub basal_hours: Vec<u32>,
    pub days: u32,
    pub reporting_prob_carbs: f64,
    /// Probability that a patient receives no basal insulin at all.
    pub no_basal_prob: f64,
    /// Probability of an extra spot check at 2–5 a.m. on a given night.
    pub night_check_prob: f64,
    pub dynamics: Dynamics,
    pub phenotypes: PhenotypeRanges,
    pub policy: SlidingScalePolicy,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            meal_hours: vec![7, 12, 18],
            measure_hours: vec![7, 12, 18, 22],
            measure_jitter: 1,
            carb_range: (20.0, 70.0),
            basal_dose_range: (2, 20),
            bolus_dose_range: (0, 30),
            basal_hours: vec![7, 18],
            days: 3,
            reporting_prob_carbs: 0.5,
            no_basal_prob: 0.3,
            night_check_prob: 0.0,
            dynamics: Dynamics::default(),
            phenotypes: PhenotypeRanges::default(),
            policy: SlidingScalePolicy::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let hours_ok = self
            .meal_hours
            .iter()
            .chain(&self.measure_hours)
            .chain(&self.basal_hours)
            .all(|&h| h < 24);
        let ranges_ok = self.carb_range.0 <= self.carb_range.1
            && self.basal_dose_range.0 <= self.basal_dose_range.1
            && self.bolus_dose_range.0 <= self.bolus_dose_range.1;
        let probs_ok = [self.reporting_prob_carbs, self.no_basal_prob, self.night_check_prob]
            .iter()
            .all(|p| (0.0..=1.0).contains(p));
        if !hours_ok || !ranges_ok || !probs_ok || self.days == 0 || self.basal_hours.is_empty() {
            return Err(Error::InvalidArgument(format!("invalid SimConfig {self:?}")));
        }
        Ok(())
    }

    pub fn horizon_hours(&self) -> usize {
        self.days as usize * 24
    }
}

/// Sliding-scale insulin rules used by the simulated ward staff.
///
/// Meal bolus: `clamp(round((g − target)·gain + carbs/carb_ratio), lo, hi)`.
/// Late-evening correction: a fixed small dose when glucose exceeds a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlidingScalePolicy {
    pub target: f64,
    pub gain: f64,
    pub carb_ratio: f64,
    pub correction_hour: u32,
    pub correction_threshold: f64,
    pub correction_dose: u32,
    /// Basal dose is `round(u / insulin_sensitivity)` with `u` uniform in this range.
    pub basal_effect_range: (f64, f64),
}

impl Default for SlidingScalePolicy {
    fn default() -> Self {
        Self {
            target: 7.0,
            gain: 2.0,
            carb_ratio: 15.0,
            correction_hour: 22,
            correction_threshold: 11.0,
            correction_dose: 2,
            basal_effect_range: (1.5, 3.5),
        }
    }
}

/// Behavioural treatment rules consulted by [`simulate_patient`].
pub trait BehaviorPolicy {
    /// Units given with a meal of `carbs` grams at pre-meal glucose `glucose`.
    fn meal_bolus(&self, glucose: f64, carbs: f64, range: (u32, u32)) -> u32;
    /// Units given at `hour` outside meals (0 for none).
    fn correction(&self, glucose: f64, hour: u32) -> u32;
    /// Daily basal plan: `(hour, units)` or `None` for patients without basal.
    fn basal_plan(&self, phenotype: &Phenotype, config: &SimConfig, rng: &mut Rng) -> Option<(u32, u32)>;
}

impl BehaviorPolicy for SlidingScalePolicy {
    fn meal_bolus(&self, glucose: f64, carbs: f64, range: (u32, u32)) -> u32 {
        let raw = ((glucose - self.target) * self.gain + carbs / self.carb_ratio).round();
        raw.clamp(range.0 as f64, range.1 as f64) as u32
    }

    fn correction(&self, glucose: f64, hour: u32) -> u32 {
        if hour == self.correction_hour && glucose > self.correction_threshold {
            self.correction_dose
        } else {
            0
        }
    }

    fn basal_plan(&self, phenotype: &Phenotype, config: &SimConfig, rng: &mut Rng) -> Option<(u32, u32)> {
        // Draws are made unconditionally so the stream position does not depend on the branch.
        let none = rng.gen::<f64>() < config.no_basal_prob;
        let hour = config.basal_hours[rng.gen_range(0..config.basal_hours.len())];
        let (lo, hi) = self.basal_effect_range;
        let effect = rng.gen_range(lo..=hi);
        let (dlo, dhi) = config.basal_dose_range;
        let units = (effect / phenotype.insulin_sensitivity)
            .round()
            .clamp(dlo as f64, dhi as f64) as u32;
        (!none).then_some((hour, units))
    }
}

fn log_uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Draws a phenotype; every field is log-uniform on its configured range.
pub fn sample_phenotype(rng: &mut Rng, config: &SimConfig) -> Phenotype {
    let r = &config.phenotypes;
    Phenotype {
        insulin_sensitivity: log_uniform(rng, r.insulin_sensitivity),
        carb_sensitivity: log_uniform(rng, r.carb_sensitivity),
        endogenous_drift: log_uniform(rng, r.endogenous_drift),
        set_point: log_uniform(rng, r.set_point),
        noise_sd: log_uniform(rng, r.noise_sd),
    }
}

/// Hidden physiological state at the start of an hour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardState {
    pub glucose: f64,
    pub insulin_on_board: f64,
    pub carbs_on_board: f64,
}

/// Advances the state by one hour. Doses given during the hour must already
/// be added to the boards. `noise` is a standard-normal draw, scaled by the
/// phenotype's `noise_sd`.
pub fn glucose_step_with_noise(
    state: BoardState,
    phenotype: &Phenotype,
    dynamics: &Dynamics,
    noise: f64,
) -> Result<BoardState> {
    let finite = state.glucose.is_finite()
        && state.insulin_on_board.is_finite()
        && state.carbs_on_board.is_finite()
        && noise.is_finite();
    if !finite || state.glucose <= 0.0 {
        return Err(Error::Simulation(format!("invalid state {state:?}")));
    }
    let absorbed_insulin = state.insulin_on_board * dynamics.insulin_fraction();
    let absorbed_carbs = state.carbs_on_board * dynamics.carb_fraction();
    let next = state.glucose + phenotype.endogenous_drift * (phenotype.set_point - state.glucose)
        - phenotype.insulin_sensitivity * absorbed_insulin
        + phenotype.carb_sensitivity * absorbed_carbs / 10.0
        + phenotype.noise_sd * noise;
    Ok(BoardState {
        glucose: next.clamp(GLUCOSE_CLAMP.0, GLUCOSE_CLAMP.1),
        insulin_on_board: state.insulin_on_board - absorbed_insulin,
        carbs_on_board: state.carbs_on_board - absorbed_carbs,
    })
}

/// [`glucose_step_with_noise`] drawing its noise from `rng` (one draw per call,
/// even when `noise_sd` is zero).
pub fn glucose_step(state: BoardState, phenotype: &Phenotype, dynamics: &Dynamics, rng: &mut Rng) -> Result<BoardState> {
    let noise: f64 = StandardNormal.sample(rng);
    glucose_step_with_noise(state, phenotype, dynamics, noise)
}

fn event_time(hour: usize, rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    hour as f64 + rng.gen_range(lo..hi)
}

/// Simulates one admission of `config.days` days starting at midnight.
pub fn simulate_patient(
    id: &str,
    static_features: Vec<f64>,
    phenotype: &Phenotype,
    config: &SimConfig,
    policy: &dyn BehaviorPolicy,
    rng: &mut Rng,
) -> Result<PatientRecord> {
    config.validate()?;
    phenotype.validate()?;
    let horizon = config.horizon_hours();
    let basal = policy.basal_plan(phenotype, config, rng);
    let mut state = BoardState {
        glucose: (phenotype.set_point + rng.gen_range(-1.0..3.0)).clamp(GLUCOSE_CLAMP.0, GLUCOSE_CLAMP.1),
        insulin_on_board: 0.0,
        carbs_on_board: 0.0,
    };
    let mut events = Vec::new();
    for day in 0..config.days as usize {
        let mut measure_today = Vec::with_capacity(config.measure_hours.len() + 1);
        for &h in &config.measure_hours {
            let j = config.measure_jitter as i64;
            let shift = rng.gen_range(-j..=j);
            measure_today.push((h as i64 + shift).clamp(0, 23) as u32);
        }
        let night = rng.gen::<f64>() < config.night_check_prob;
        let night_hour = rng.gen_range(2..=5u32);
        if night {
            measure_today.push(night_hour);
        }

        for hour in 0..24u32 {
            let t = day * 24 + hour as usize;
            let g = state.glucose;
            if measure_today.contains(&hour) {
                let value = (g * 10.0).round() / 10.0;
                events.push(Event::new(event_time(t, rng, 0.0, 0.5), EventKind::Glucose, value));
            }
            let mut insulin = 0u32;
            let mut carbs = 0.0;
            if config.meal_hours.contains(&hour) {
                carbs = rng.gen_range(config.carb_range.0..=config.carb_range.1).round();
                if rng.gen::<f64>() < config.reporting_prob_carbs {
                    events.push(Event::new(event_time(t, rng, 0.5, 0.9), EventKind::Carbs, carbs));
                }
                let dose = policy.meal_bolus(g, carbs, config.bolus_dose_range);
                if dose > 0 {
                    events.push(Event::new(event_time(t, rng, 0.5, 0.9), EventKind::Bolus, dose as f64));
                    insulin += dose;
                }
            } else {
                let dose = policy.correction(g, hour);
                if dose > 0 {
                    events.push(Event::new(event_time(t, rng, 0.5, 0.9), EventKind::Bolus, dose as f64));
                    insulin += dose;
                }
            }
            if let Some((basal_hour, units)) = basal {
                if basal_hour == hour {
                    events.push(Event::new(event_time(t, rng, 0.5, 0.9), EventKind::Basal, units as f64));
                    insulin += units;
                }
            }
            state.insulin_on_board += insulin as f64;
            state.carbs_on_board += carbs;
            state = glucose_step(state, phenotype, &config.dynamics, rng)?;
        }
    }
    PatientRecord::new(id, static_features, horizon as f64, events)
}

/// A simulated patient with its hidden phenotype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPatient {
    pub record: PatientRecord,
    pub phenotype: Phenotype,
}

/// Sidecar line pairing a patient id with its phenotype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeEntry {
    pub id: String,
    pub phenotype: Phenotype,
}

/// Patient `index` of the cohort for `seed`; each patient owns one stream.
pub fn simulate_cohort_patient(index: usize, config: &SimConfig, seed: u64) -> Result<SimulatedPatient> {
    let mut rng = rng::stream(seed, "patient", index as u64);
    let phenotype = sample_phenotype(&mut rng, config);
    let age = rng.gen_range(30.0f64..90.0).round();
    let weight = rng.gen_range(50.0f64..120.0).round();
    let type2 = if rng.gen::<f64>() < 0.8 { 1.0 } else { 0.0 };
    let record = simulate_patient(
        &format!("p{index:05}"),
        vec![age, weight, type2],
        &phenotype,
        config,
        &config.policy,
        &mut rng,
    )?;
    Ok(SimulatedPatient { record, phenotype })
}

pub fn simulate_cohort(n: usize, config: &SimConfig, seed: u64) -> Result<Vec<SimulatedPatient>> {
    (0..n).map(|i| simulate_cohort_patient(i, config, seed)).collect()
}

/// Hourly inputs over the concatenated past + future axis.
struct InputStream<'a> {
    context: &'a Context,
    treatment: &'a Channels<f64>,
    carbs: &'a Channels<f64>,
}

impl InputStream<'_> {
    fn insulin(&self, t: usize) -> f64 {
        let past = self.context.past_len();
        if t < past {
            (0..D).map(|d| self.context.past_treatments.get(d, t)).sum()
        } else {
            (0..D).map(|d| self.treatment.get(d, t - past)).sum()
        }
    }

    fn carbs(&self, t: usize) -> f64 {
        let past = self.context.past_len();
        if t < past {
            (0..V).map(|v| self.context.past_covariates.get(v, t)).sum()
        } else {
            (0..V).map(|v| self.carbs.get(v, t - past)).sum()
        }
    }

    fn hour(&self, t: usize) -> u32 {
        let past = self.context.past_len();
        if t < past {
            self.context.past_hours[t]
        } else {
            self.context.future_hours[t - past]
        }
    }
}

/// How a rollout treats meal hours without recorded carbohydrates.
#[derive(Debug, Clone, Copy)]
pub enum MealFill<'a> {
    /// Use the recorded carbohydrates as they are.
    AsRecorded,
    /// Unrecorded meals are assumed eaten but unreported: draw their size
    /// from the configured carbohydrate range.
    Unreported(&'a SimConfig),
}

/// Rolls the ground-truth dynamics forward `S` times.
///
/// Each rollout starts from the last measured context glucose, replays the
/// recorded past inputs up to the split (insulin and carbs on board are
/// rebuilt from the full past), then applies `treatment` (`D × K`, whole
/// units) and `carbs` (`V × K`). Returned trajectories hold the glucose at
/// the start of each future hour, aligned with the context's future grid.
#[allow(clippy::too_many_arguments)]
pub fn environment_rollout(
    phenotype: &Phenotype,
    dynamics: &Dynamics,
    context: &Context,
    treatment: &Channels<f64>,
    carbs: &Channels<f64>,
    meals: MealFill<'_>,
    rng: &mut Rng,
    samples: usize,
) -> Result<Vec<Channels<f64>>> {
    let k = context.horizon();
    if treatment.rows() != D || treatment.cols() != k || carbs.rows() != V || carbs.cols() != k {
        return Err(Error::shape("environment_rollout", "treatment/carbs do not match the context horizon"));
    }
    if treatment.as_slice().iter().any(|&x| x < 0.0 || x.fract() != 0.0) {
        return Err(Error::InvalidArgument("treatment must be non-negative whole units".into()));
    }
    let (start, g0) = context
        .last_measured(0)
        .ok_or_else(|| Error::OracleInit(format!("{}: no measured glucose in context", context.patient_id)))?;
    let stream = InputStream {
        context,
        treatment,
        carbs,
    };
    let past = context.past_len();
    let fi = 0.5f64.powf(1.0 / dynamics.insulin_half_life);
    let fc = 0.5f64.powf(1.0 / dynamics.carb_half_life);

    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let carbs_at = |t: usize, rng: &mut Rng| -> f64 {
            let c = stream.carbs(t);
            match meals {
                MealFill::Unreported(cfg) if c == 0.0 && cfg.meal_hours.contains(&stream.hour(t)) => {
                    rng.gen_range(cfg.carb_range.0..=cfg.carb_range.1).round()
                }
                _ => c,
            }
        };
        let mut state = BoardState {
            glucose: g0,
            insulin_on_board: 0.0,
            carbs_on_board: 0.0,
        };
        for t in 0..start {
            let age = (start - t) as f64;
            state.insulin_on_board += stream.insulin(t) * fi.powf(age);
            state.carbs_on_board += carbs_at(t, rng) * fc.powf(age);
        }
        let mut traj = Channels::zeros(P, k);
        for t in start..past + k {
            if t >= past {
                traj.set(0, t - past, state.glucose);
            }
            if t + 1 == past + k {
                break;
            }
            state.insulin_on_board += stream.insulin(t);
            state.carbs_on_board += carbs_at(t, rng);
            state = glucose_step(state, phenotype, dynamics, rng)?;
        }
        out.push(traj);
    }
    Ok(out)
}

/// Marginal statistics of a simulated cohort, as fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub glucose_values: usize,
    pub patient_days: usize,
    /// Glucose values inside [5, 15] mmol/L.
    pub glucose_in_5_15: f64,
    /// Patient-days with zero or one basal injection.
    pub basal_days_0_1: f64,
    /// Patient-days with zero to four bolus injections.
    pub bolus_days_0_4: f64,
    /// Basal doses inside `basal_dose_range`.
    pub basal_doses_in_range: f64,
    /// Bolus doses inside `bolus_dose_range`.
    pub bolus_doses_in_range: f64,
}

pub fn cohort_stats(records: &[PatientRecord], config: &SimConfig) -> CohortStats {
    let frac = |hit: usize, n: usize| if n == 0 { 1.0 } else { hit as f64 / n as f64 };
    let in_range = |v: f64, (lo, hi): (u32, u32)| v >= lo as f64 && v <= hi as f64;
    let (mut glucose, mut glucose_hit) = (0, 0);
    let (mut days, mut basal_ok, mut bolus_ok) = (0, 0, 0);
    let (mut basal, mut basal_hit, mut bolus, mut bolus_hit) = (0, 0, 0, 0);
    for r in records {
        let n_days = (r.horizon_hours / 24.0).ceil() as usize;
        let mut per_day = vec![(0usize, 0usize); n_days];
        for e in &r.events {
            let day = ((e.time_hours / 24.0) as usize).min(n_days.saturating_sub(1));
            match e.kind {
                EventKind::Glucose => {
                    glucose += 1;
                    glucose_hit += usize::from((5.0..=15.0).contains(&e.value));
                }
                EventKind::Basal => {
                    per_day[day].0 += 1;
                    basal += 1;
                    basal_hit += usize::from(in_range(e.value, config.basal_dose_range));
                }
                EventKind::Bolus => {
                    per_day[day].1 += 1;
                    bolus += 1;
                    bolus_hit += usize::from(in_range(e.value, config.bolus_dose_range));
                }
                EventKind::Carbs => {}
            }
        }
        days += n_days;
        basal_ok += per_day.iter().filter(|d| d.0 <= 1).count();
        bolus_ok += per_day.iter().filter(|d| d.1 <= 4).count();
    }
    CohortStats {
        glucose_values: glucose,
        patient_days: days,
        glucose_in_5_15: frac(glucose_hit, glucose),
        basal_days_0_1: frac(basal_ok, days),
        bolus_days_0_4: frac(bolus_ok, days),
        basal_doses_in_range: frac(basal_hit, basal),
        bolus_doses_in_range: frac(bolus_hit, bolus),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::EventKind;

    fn pheno(drift: f64, sp: f64, noise: f64) -> Phenotype {
        Phenotype {
            insulin_sensitivity: 0.3,
            carb_sensitivity: 0.8,
            endogenous_drift: drift,
            set_point: sp,
            noise_sd: noise,
        }
    }

    fn step(s: BoardState, p: &Phenotype) -> BoardState {
        glucose_step_with_noise(s, p, &Dynamics::default(), 0.0).unwrap()
    }

    #[test]
    fn phenotype_sampling_is_seeded() {
        let cfg = SimConfig::default();
        let a = sample_phenotype(&mut rng::stream(0, "x", 0), &cfg);
        let b = sample_phenotype(&mut rng::stream(0, "x", 0), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn phenotype_draws_respect_constraints() {
        let cfg = SimConfig::default();
        let mut r = rng::stream(1, "pheno", 0);
        let draws: Vec<Phenotype> = (0..1000).map(|_| sample_phenotype(&mut r, &cfg)).collect();
        for p in &draws {
            p.validate().unwrap();
        }
        let mean = draws.iter().map(|p| p.set_point).sum::<f64>() / 1000.0;
        // Log-uniform on [6, 12] has mean 6/ln 2 ≈ 8.66.
        assert!((8.0..=10.0).contains(&mean), "mean set point {mean}");
    }

    #[test]
    fn set_point_is_a_fixed_point() {
        let p = pheno(0.3, 8.0, 0.0);
        let s = BoardState { glucose: 8.0, insulin_on_board: 0.0, carbs_on_board: 0.0 };
        assert_eq!(step(s, &p).glucose, 8.0);
    }

    #[test]
    fn linear_relaxation() {
        let p = pheno(0.5, 8.0, 0.0);
        let s = BoardState { glucose: 10.0, insulin_on_board: 0.0, carbs_on_board: 0.0 };
        assert!((step(s, &p).glucose - 9.0).abs() < 1e-12);
    }

    #[test]
    fn large_bolus_causes_hypo_within_four_hours() {
        // Independent recurrence: the absorbed amount in hour n is
        // dose·(2^{-n/2} − 2^{-(n+1)/2}).
        let p = pheno(0.05, 7.0, 0.0);
        let mut g_oracle = 7.0;
        let mut oracle = Vec::new();
        for n in 0..4 {
            let absorbed = 20.0 * (0.5f64.powf(n as f64 / 2.0) - 0.5f64.powf((n + 1) as f64 / 2.0));
            g_oracle = g_oracle + 0.05 * (7.0 - g_oracle) - 0.3 * absorbed;
            oracle.push(g_oracle);
        }
        let mut s = BoardState { glucose: 7.0, insulin_on_board: 20.0, carbs_on_board: 0.0 };
        for expected in &oracle {
            s = step(s, &p);
            assert!((s.glucose - expected).abs() < 1e-12);
        }
        assert!(oracle.iter().any(|&g| g < 3.9), "{oracle:?}");
    }

    #[test]
    fn step_rejects_non_finite() {
        let p = pheno(0.1, 8.0, 0.0);
        let s = BoardState { glucose: f64::NAN, insulin_on_board: 0.0, carbs_on_board: 0.0 };
        assert!(glucose_step_with_noise(s, &p, &Dynamics::default(), 0.0).is_err());
    }

    #[test]
    fn bolus_is_monotone_in_glucose() {
        let pol = SlidingScalePolicy::default();
        let mut prev = 0;
        for g10 in 30..250 {
            let d = pol.meal_bolus(g10 as f64 / 10.0, 40.0, (0, 30));
            assert!(d >= prev && d <= 30);
            prev = d;
        }
    }

    #[test]
    fn stats_count_patient_days() {
        let r = PatientRecord::new(
            "s",
            vec![1.0],
            48.0,
            vec![
                Event::new(7.0, EventKind::Glucose, 4.0),
                Event::new(7.5, EventKind::Basal, 10.0),
                Event::new(18.0, EventKind::Basal, 25.0),
                Event::new(31.0, EventKind::Glucose, 9.0),
                Event::new(31.5, EventKind::Bolus, 3.0),
            ],
        )
        .unwrap();
        let s = cohort_stats(&[r], &SimConfig::default());
        assert_eq!((s.glucose_values, s.patient_days), (2, 2));
        assert_eq!(s.glucose_in_5_15, 0.5);
        assert_eq!(s.basal_days_0_1, 0.5);
        assert_eq!(s.bolus_days_0_4, 1.0);
        assert_eq!(s.basal_doses_in_range, 0.5);
        assert_eq!(s.bolus_doses_in_range, 1.0);
    }

    #[test]
    fn patient_simulation_is_deterministic() {
        let cfg = SimConfig::default();
        let a = simulate_cohort_patient(3, &cfg, 11).unwrap();
        let b = simulate_cohort_patient(3, &cfg, 11).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.record.events_of(EventKind::Glucose).count() >= 9);
    }

    #[test]
    fn larger_bolus_never_raises_noise_free_glucose() {
        let p = pheno(0.15, 8.0, 0.0);
        let dynamics = Dynamics::default();
        let run = |dose: f64| {
            let mut s = BoardState { glucose: 9.0, insulin_on_board: 0.0, carbs_on_board: 40.0 };
            let mut out = Vec::new();
            for h in 0..12 {
                if h == 2 {
                    s.insulin_on_board += dose;
                }
                s = glucose_step_with_noise(s, &p, &dynamics, 0.0).unwrap();
                out.push(s.glucose);
            }
            out
        };
        let low = run(2.0);
        let high = run(6.0);
        assert!(low.iter().zip(&high).all(|(l, h)| h <= l));
    }
}
