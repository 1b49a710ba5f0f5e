use std::io::Cursor;

use glyco_core::cohort::{simulate_cohort, SimConfig};
use glyco_core::decision::{decide, DecisionConfig, UtilityConfig};
use glyco_core::eval::{
    evaluate_forecasts, generate_like, midnight_windows, real_vs_generated_auc, SampleTrajectory,
};
use glyco_core::preprocess::Dataset;
use glyco_core::rng::stream;
use glyco_core::seqgen::{sample_outcomes, train, Mode, ModelConfig, ModelParams};
use glyco_core::trajectory::{read_jsonl, write_jsonl};
use glyco_core::{PatientRecord, Window};

fn records() -> Vec<PatientRecord> {
    let cfg = SimConfig {
        days: 4,
        night_check_prob: 0.5,
        ..SimConfig::default()
    };
    simulate_cohort(16, &cfg, 3).unwrap().into_iter().map(|p| p.record).collect()
}

#[test]
fn simulate_store_train_forecast_and_decide() {
    let records = records();
    let mut jsonl = Vec::new();
    write_jsonl(&mut jsonl, &records).unwrap();
    let back = read_jsonl(Cursor::new(&jsonl)).unwrap();
    assert_eq!(back, records);

    let ds = Dataset::from_records(&back).unwrap();
    let mut bin = Vec::new();
    ds.write(&mut bin).unwrap();
    let ds = Dataset::read(Cursor::new(&bin)).unwrap();
    assert_eq!(ds.grids.len(), 16);

    let cfg = ModelConfig {
        window: 12,
        ..ModelConfig::tiny(Mode::Parametric)
    };
    let (fit, rest) = ds.grids.split_at(10);
    let (val, test) = rest.split_at(2);
    let (params, report) = train(fit, val, &cfg, 9).unwrap();
    assert!(params.trained);
    assert!(report.best_validation.unwrap().is_finite());

    let mut ckpt = Vec::new();
    params.save(&mut ckpt).unwrap();
    let loaded = ModelParams::load(Cursor::new(&ckpt)).unwrap();
    let w = &midnight_windows(&test[0], 12).unwrap()[0];
    let a = sample_outcomes(&params, &w.context, &w.future_treatments, 20, &mut stream(1, "s", 0)).unwrap();
    let b = sample_outcomes(&loaded, &w.context, &w.future_treatments, 20, &mut stream(1, "s", 0)).unwrap();
    assert_eq!(a, b);

    let cmp = evaluate_forecasts(&loaded, fit, test, 0, 4).unwrap();
    for r in [&cmp.model, &cmp.patient_mean, &cmp.population_time] {
        assert!(r.rmse >= r.mae && r.mae > 0.0);
    }

    let decision = DecisionConfig {
        num_treatments: 8,
        num_outcomes: 16,
        ..DecisionConfig::default()
    };
    let d = decide(&loaded, &w.context, &UtilityConfig::default(), &decision, &mut stream(2, "d", 0)).unwrap();
    assert_eq!(d.chosen_treatment.cols(), 12);
    assert!(d.estimated_eu.is_finite());
}

#[test]
fn generated_trajectories_are_scored_against_real_ones() {
    let ds = Dataset::from_records(&records()).unwrap();
    let cfg = ModelConfig {
        window: 12,
        steps: 60,
        ..ModelConfig::tiny(Mode::Latent)
    };
    let (params, _) = train(&ds.grids[..12], &ds.grids[12..], &cfg, 2).unwrap();
    let windows: Vec<Window> = ds.grids.iter().flat_map(|g| midnight_windows(g, 12).unwrap()).collect();
    let real: Vec<SampleTrajectory> = windows.iter().map(SampleTrajectory::from_window).collect();
    let generated = generate_like(&params, &windows, &mut stream(3, "gen", 0)).unwrap();
    assert_eq!(generated.len(), real.len());
    let auc = real_vs_generated_auc(&real, &generated, 8).unwrap();
    assert!((0.0..=1.0).contains(&auc));
}
