use super::*;
use crate::cohort::{simulate_cohort, SimConfig};
use crate::decision::UtilityConfig;
use crate::preprocess::{fit_scaler, resample_hourly};
use crate::rng::stream;
use crate::seqgen::tests::{toy_grids, toy_model};
use crate::seqgen::{objective_gradients, Channel, LossBatch, Mode, ModelConfig, ModelParams, Objective, ParamGroup};
use crate::trajectory::{Channels, Grid, D, P};

fn cohort(n: usize, days: u32, seed: u64) -> (Vec<Grid>, Vec<(String, crate::cohort::Phenotype)>) {
    let cfg = SimConfig {
        days,
        ..SimConfig::default()
    };
    let pats = simulate_cohort(n, &cfg, seed).unwrap();
    let grids = pats.iter().map(|p| resample_hourly(&p.record).unwrap()).collect();
    let ph = pats.iter().map(|p| (p.record.id.clone(), p.phenotype)).collect();
    (grids, ph)
}

#[test]
fn splits_partition_patients() {
    let a = patient_splits(11, 30, 5);
    assert_eq!(a, patient_splits(11, 30, 5));
    assert_eq!(a.len(), 30);
    for s in &a {
        assert_eq!(s.train.len(), 5);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }
    assert_ne!(a[0], a[1]);
}

#[test]
fn test_windows_start_at_midnight() {
    let grids = toy_grids(3, 3, 41);
    for g in &grids {
        let ws = midnight_windows(g, 24).unwrap();
        assert_eq!(ws.len(), 2);
        for w in &ws {
            assert_eq!(w.context.future_hours[0], 0);
            assert_eq!(w.future_outcomes.cols(), 24);
        }
    }
}

#[test]
fn population_table_bottoms_out_before_breakfast() {
    let (grids, _) = cohort(300, 3, 42);
    let b = PopulationTimeBaseline::fit(&grids).unwrap();
    let h = b.argmin_hour();
    assert!((6..=7).contains(&h), "minimum at {h}: {:?}", b.by_hour);
}

fn tiny_window_model(mode: Mode, grids: &[Grid], seed: u64) -> ModelParams {
    let mut cfg = ModelConfig::tiny(mode);
    cfg.window = 24;
    let mut p = ModelParams::init(&cfg, &fit_scaler(grids).unwrap(), &mut stream(seed, "init", 0)).unwrap();
    p.trained = true;
    p
}

#[test]
fn forecast_comparison_scores_the_same_cells() {
    let (grids, _) = cohort(6, 3, 43);
    for mode in [Mode::Parametric, Mode::Latent, Mode::Autoregressive] {
        let p = tiny_window_model(mode, &grids, 43);
        let c = evaluate_forecasts(&p, &grids[..3], &grids[3..], 4, 9).unwrap();
        assert_eq!(c.n_windows, 6);
        assert_eq!(c.model.n_points, c.patient_mean.n_points);
        assert_eq!(c.model.n_points, c.population_time.n_points);
        assert_eq!(c.model.split_id, 4);
        for r in [&c.model, &c.patient_mean, &c.population_time] {
            assert!(r.rmse >= r.mae);
            assert_eq!(r.horizon_profile.len(), 24);
        }
        assert_eq!(c, evaluate_forecasts(&p, &grids[..3], &grids[3..], 4, 9).unwrap());
    }
}

#[test]
fn full_ablation_is_the_default_pipeline() {
    let (grids, _) = cohort(24, 3, 44);
    let cfg = ModelConfig {
        window: 24,
        steps: 20,
        eval_every: 10,
        ..ModelConfig::tiny(Mode::Parametric)
    };
    let split = &patient_splits(grids.len(), 1, 1)[0];
    let (_, run) = run_split(&grids, split, &cfg, 7).unwrap();
    let full = ablation_run(&Channel::ALL, &grids, split, &cfg, 7).unwrap();
    assert_eq!(full, run.comparison.model);
    let only_y = ablation_run(&[Channel::PastY], &grids, split, &cfg, 7).unwrap();
    assert_ne!(only_y, full);
}

#[test]
fn excluded_channels_get_no_gradient() {
    let grids = toy_grids(2, 2, 45);
    let mut p = toy_model(Mode::Parametric, &grids, 45);
    p.config.channels = vec![Channel::PastY];
    let ws: Vec<_> = grids.iter().map(|g| crate::trajectory::split_window(g, 20, 4).unwrap()).collect();
    let batch = LossBatch::from_windows(&p, &ws).unwrap();
    let (_, grads) = objective_gradients(&p, &batch, Objective::L1, &ParamGroup::ALL).unwrap();
    let w = &grads["enc.in1.w"];
    let hidden = w.shape()[1];
    // Rows beyond the glucose and measured-flag features feed excluded channels.
    assert!(w.data()[2 * P * hidden..].iter().all(|&g| g == 0.0));
    assert!(w.data()[..2 * P * hidden].iter().any(|&g| g != 0.0));
    let out_w = &grads["out.in1.w"];
    assert!(out_w.data().iter().all(|&g| g == 0.0));
}

#[test]
fn insulin_free_policy_loses_time_in_range_on_high_contexts() {
    let (grids, ph) = cohort(40, 3, 46);
    let contexts: Vec<EvalContext> = eval_contexts(&grids, &ph, 24)
        .unwrap()
        .into_iter()
        .filter(|c| c.context.measured_past_mean(0).unwrap() > 10.0)
        .take(15)
        .collect();
    assert!(contexts.len() >= 5);
    let sim = SimConfig::default();
    let u = UtilityConfig::default();
    let logged = policy_evaluation(&mut |c, _| Ok(c.logged_treatment.clone()), &contexts, &sim, &u, 50, 3).unwrap();
    let zero = policy_evaluation(&mut |_, _| Ok(Channels::zeros(D, 24)), &contexts, &sim, &u, 50, 3).unwrap();
    assert!(zero.time_in_range < logged.time_in_range, "{} vs {}", zero.time_in_range, logged.time_in_range);
    let again = policy_evaluation(&mut |c, _| Ok(c.logged_treatment.clone()), &contexts, &sim, &u, 50, 3).unwrap();
    assert_eq!(logged, again);

    let mut anon = contexts[..1].to_vec();
    anon[0].phenotype = None;
    assert!(matches!(
        policy_evaluation(&mut |c, _| Ok(c.logged_treatment.clone()), &anon, &sim, &u, 5, 3),
        Err(crate::Error::MissingPhenotype(_))
    ));
}

#[test]
fn support_score_is_a_nearest_neighbour_distance() {
    let grids = toy_grids(4, 3, 47);
    let sup = TreatmentSupport::from_grids(&grids, 24).unwrap();
    assert_eq!(sup.score(&sup.treatments[3]).unwrap(), 0.0);
    let mut x = sup.treatments[0].clone();
    x.as_mut_slice()[5] += 500.0;
    let s = sup.score(&x).unwrap();
    assert!(s > 0.0 && s <= 500.0);
}

#[test]
fn gap_profile_peaks_where_the_model_helps_most() {
    let bins = |maes: &[f64]| MetricsReport {
        mae: 0.0,
        rmse: 0.0,
        n_points: 100,
        horizon_profile: maes
            .iter()
            .enumerate()
            .map(|(t, &m)| HorizonBin {
                hours_ahead: t + 1,
                mae: m,
                rmse: m,
                n_points: if t == 0 { 3 } else { 40 },
            })
            .collect(),
        split_id: 0,
    };
    let cmp = ForecastComparison {
        model: bins(&[0.1, 1.0, 0.5, 1.0]),
        patient_mean: bins(&[5.0, 2.0, 2.0, 2.0]),
        population_time: bins(&[5.0, 3.0, 1.8, 1.5]),
        n_windows: 1,
    };
    let gaps = error_gap(&cmp, 30);
    assert_eq!(gaps.len(), 3);
    assert_eq!(peak_gap(&gaps), Some(3));
    assert!((gaps[1].gap - 1.3).abs() < 1e-12);
}
