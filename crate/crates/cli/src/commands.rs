//! One function per subcommand. Each reads its inputs, writes its artifacts
//! into the output directory and finishes with a run manifest.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use glyco_core::cohort::{simulate_cohort, PhenotypeEntry};
use glyco_core::decision::{decide, finetune_policy, DecisionConfig, DecisionResult};
use glyco_core::eval::{
    average_reports, error_gap, midnight_windows, patient_splits, peak_gap, run_split, ForecastComparison, GapBin,
    MetricsReport,
};
use glyco_core::preprocess::Dataset;
use glyco_core::rng;
use glyco_core::seqgen::{sample_outcomes, train, ModelParams, TrainReport};
use glyco_core::trajectory::{read_jsonl, write_jsonl};
use glyco_core::{Grid, Window};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::output::{histogram, pit, quantile, write_csv, write_json, QUANTILE_LEVELS};
use crate::CliError;

const PIT_BINS: usize = 10;

/// Share of the patients held back for best-step selection in `train`.
const VALIDATION_SHARE: f64 = 0.1;

pub fn run(command: &str, config: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    fs::create_dir_all(&config.paths.out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", config.paths.out_dir.display())))?;
    let (inputs, outputs) = match command {
        "cohort" => cohort(config)?,
        "preprocess" => preprocess(config)?,
        "train" => train_cmd(config)?,
        "predict" => predict(config)?,
        "decide" => decide_cmd(config)?,
        "evaluate" => evaluate(config)?,
        "finetune" => finetune(config)?,
        other => return Err(CliError::Validation(format!("unknown command {other}"))),
    };
    let manifest = RunManifest::write(config, command, &inputs, &outputs, start.elapsed())?;
    log::info!("{command} finished in {:.1}s; manifest {}", start.elapsed().as_secs_f64(), manifest.display());
    Ok(())
}

type Artifacts = (Vec<PathBuf>, Vec<PathBuf>);

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{} does not exist", path.display())))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    require(path)?;
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_dataset(config: &RunConfig) -> Result<(PathBuf, Dataset), CliError> {
    let path = config.dataset_path();
    let ds = Dataset::read(open(&path)?)?;
    Ok((path, ds))
}

fn load_checkpoint(config: &RunConfig) -> Result<(PathBuf, ModelParams), CliError> {
    let path = config.checkpoint_path();
    let params = ModelParams::load(open(&path)?)?;
    Ok((path, params))
}

fn cohort(config: &RunConfig) -> Result<Artifacts, CliError> {
    let patients = simulate_cohort(config.cohort.patients, &config.cohort.sim, config.seed)?;
    let records: Vec<_> = patients.iter().map(|p| p.record.clone()).collect();
    let records_path = config.out("cohort.jsonl");
    let mut w = create(&records_path)?;
    write_jsonl(&mut w, &records)?;
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;

    let pheno_path = config.out("phenotypes.jsonl");
    let mut w = create(&pheno_path)?;
    for p in &patients {
        let entry = PhenotypeEntry {
            id: p.record.id.clone(),
            phenotype: p.phenotype,
        };
        serde_json::to_writer(&mut w, &entry).map_err(|e| CliError::Runtime(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok((vec![], vec![records_path, pheno_path]))
}

fn preprocess(config: &RunConfig) -> Result<Artifacts, CliError> {
    let input = config.cohort_path();
    let records = read_jsonl(open(&input)?)?;
    let ds = Dataset::from_records(&records)?;
    let out = config.out("dataset.bin");
    let mut w = create(&out)?;
    ds.write(&mut w)?;
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok((vec![input], vec![out]))
}

/// Training and validation patients: the last tenth of the dataset validates.
fn holdout(grids: &[Grid]) -> Result<(&[Grid], &[Grid]), CliError> {
    let n_val = ((grids.len() as f64 * VALIDATION_SHARE).round() as usize).max(1);
    if grids.len() <= n_val {
        return Err(CliError::Validation(format!("{} patients are too few to train", grids.len())));
    }
    Ok(grids.split_at(grids.len() - n_val))
}

fn train_cmd(config: &RunConfig) -> Result<Artifacts, CliError> {
    let (input, ds) = load_dataset(config)?;
    let (fit, val) = holdout(&ds.grids)?;
    let (params, report): (ModelParams, TrainReport) = train(fit, val, &config.model, config.seed)?;
    let ckpt = config.out("model.ckpt");
    let mut w = create(&ckpt)?;
    params.save(&mut w)?;
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    let report_path = config.out("train_report.json");
    write_json(&report_path, &report)?;
    Ok((vec![input], vec![ckpt, report_path]))
}

/// Midnight windows of every grid, at most `max` per grid (0 = all).
fn windows(grids: &[Grid], k: usize, max: usize) -> Result<Vec<Window>, CliError> {
    let mut out = Vec::new();
    for g in grids {
        let mut w = midnight_windows(g, k)?;
        if max > 0 {
            w.truncate(max);
        }
        out.extend(w);
    }
    if out.is_empty() {
        return Err(CliError::Validation("dataset has no midnight windows with a measured past".into()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct QuantileRow<'a> {
    patient: &'a str,
    t_split: usize,
    hours_ahead: usize,
    q05: f64,
    q25: f64,
    q50: f64,
    q75: f64,
    q95: f64,
    mean: f64,
    /// Empty where glucose was not measured.
    observed: Option<f64>,
}

fn predict(config: &RunConfig) -> Result<Artifacts, CliError> {
    let (ckpt, params) = load_checkpoint(config)?;
    let (input, ds) = load_dataset(config)?;
    let k = params.config.window;
    let ws = windows(&ds.grids, k, config.eval.max_windows)?;
    let mut rows = Vec::with_capacity(ws.len() * k);
    for (i, w) in ws.iter().enumerate() {
        let mut r = rng::stream(config.seed, "predict", i as u64);
        let draws = sample_outcomes(&params, &w.context, &w.future_treatments, config.eval.samples, &mut r)?;
        for h in 0..k {
            let mut v: Vec<f64> = draws.iter().map(|d| d.get(0, h)).collect();
            v.sort_by(f64::total_cmp);
            let q: Vec<f64> = QUANTILE_LEVELS.iter().map(|&l| quantile(&v, l)).collect();
            rows.push(QuantileRow {
                patient: &w.context.patient_id,
                t_split: w.context.t_split,
                hours_ahead: h + 1,
                q05: q[0],
                q25: q[1],
                q50: q[2],
                q75: q[3],
                q95: q[4],
                mean: v.iter().sum::<f64>() / v.len() as f64,
                observed: w.future_mask.get(0, h).then(|| w.future_outcomes.get(0, h)),
            });
        }
    }
    let out = config.out("predictions.csv");
    write_csv(&out, &rows)?;
    Ok((vec![ckpt, input], vec![out]))
}

#[derive(Serialize)]
struct Decision<'a> {
    patient: &'a str,
    t_split: usize,
    #[serde(flatten)]
    result: DecisionResult,
}

fn decision_config(config: &RunConfig) -> DecisionConfig {
    DecisionConfig {
        approach: config.decision.approach,
        num_treatments: config.decision.num_treatments,
        num_outcomes: config.decision.num_outcomes,
        search: config.decision.search.clone(),
    }
}

fn decide_cmd(config: &RunConfig) -> Result<Artifacts, CliError> {
    let (ckpt, params) = load_checkpoint(config)?;
    let (input, ds) = load_dataset(config)?;
    let mut ws = windows(&ds.grids, params.config.window, 0)?;
    ws.truncate(config.decision.max_contexts.max(1));
    let cfg = decision_config(config);
    let mut out = Vec::with_capacity(ws.len());
    for (i, w) in ws.iter().enumerate() {
        let result = decide(&params, &w.context, &config.utility, &cfg, &mut rng::stream(config.seed, "decide", i as u64))?;
        out.push(Decision {
            patient: &w.context.patient_id,
            t_split: w.context.t_split,
            result,
        });
    }
    let path = config.out("decisions.json");
    write_json(&path, &out)?;
    Ok((vec![ckpt, input], vec![path]))
}

#[derive(Serialize)]
struct Metrics {
    n_splits: usize,
    model: MetricsReport,
    patient_mean: MetricsReport,
    population_time: MetricsReport,
    error_gap: Vec<GapBin>,
    peak_gap_hours_ahead: Option<usize>,
    splits: Vec<ForecastComparison>,
}

#[derive(Serialize)]
struct ProfileRow {
    hours_ahead: usize,
    model_mae: f64,
    model_rmse: f64,
    patient_mean_mae: f64,
    patient_mean_rmse: f64,
    population_time_mae: f64,
    population_time_rmse: f64,
    n_points: usize,
}

#[derive(Serialize)]
struct PitRow {
    bin_low: f64,
    bin_high: f64,
    count: usize,
    fraction: f64,
}

#[derive(Serialize)]
struct CandidateRow<'a> {
    patient: &'a str,
    t_split: usize,
    candidate: usize,
    expected_utility: f64,
    chosen: bool,
}

/// Scored cells per hours-ahead bin needed to report an error gap.
const GAP_MIN_POINTS: usize = 30;

fn evaluate(config: &RunConfig) -> Result<Artifacts, CliError> {
    let (input, ds) = load_dataset(config)?;
    let splits = patient_splits(ds.grids.len(), config.eval.n_splits, config.seed);
    let mut comparisons = Vec::with_capacity(splits.len());
    let mut first: Option<(ModelParams, Vec<Grid>)> = None;
    for split in &splits {
        log::info!("split {}/{}", split.split_id + 1, splits.len());
        let (params, run) = run_split(&ds.grids, split, &config.model, config.seed)?;
        if first.is_none() {
            first = Some((params, split.test.iter().map(|&i| ds.grids[i].clone()).collect()));
        }
        comparisons.push(run.comparison);
    }
    let pick = |f: fn(&ForecastComparison) -> &MetricsReport| -> Result<MetricsReport, CliError> {
        Ok(average_reports(&comparisons.iter().map(|c| f(c).clone()).collect::<Vec<_>>())?)
    };
    let mean = ForecastComparison {
        model: pick(|c| &c.model)?,
        patient_mean: pick(|c| &c.patient_mean)?,
        population_time: pick(|c| &c.population_time)?,
        n_windows: comparisons.iter().map(|c| c.n_windows).sum(),
    };
    let gaps = error_gap(&mean, GAP_MIN_POINTS);

    let profile: Vec<ProfileRow> = (0..mean.model.horizon_profile.len())
        .map(|h| ProfileRow {
            hours_ahead: h + 1,
            model_mae: mean.model.horizon_profile[h].mae,
            model_rmse: mean.model.horizon_profile[h].rmse,
            patient_mean_mae: mean.patient_mean.horizon_profile[h].mae,
            patient_mean_rmse: mean.patient_mean.horizon_profile[h].rmse,
            population_time_mae: mean.population_time.horizon_profile[h].mae,
            population_time_rmse: mean.population_time.horizon_profile[h].rmse,
            n_points: mean.model.horizon_profile[h].n_points,
        })
        .collect();

    let (params, test) = first.expect("at least one split");
    let k = params.config.window;
    let ws = windows(&test, k, 0)?;
    let mut pits = Vec::new();
    for (i, w) in ws.iter().enumerate() {
        let mut r = rng::stream(config.seed, "pit", i as u64);
        let draws = sample_outcomes(&params, &w.context, &w.future_treatments, config.eval.samples, &mut r)?;
        for h in (0..k).filter(|&h| w.future_mask.get(0, h)) {
            let v: Vec<f64> = draws.iter().map(|d| d.get(0, h)).collect();
            pits.push(pit(&v, w.future_outcomes.get(0, h)));
        }
    }
    let pit_rows: Vec<PitRow> = histogram(&pits, PIT_BINS)
        .into_iter()
        .enumerate()
        .map(|(b, count)| PitRow {
            bin_low: b as f64 / PIT_BINS as f64,
            bin_high: (b + 1) as f64 / PIT_BINS as f64,
            count,
            fraction: count as f64 / pits.len().max(1) as f64,
        })
        .collect();

    let cfg = DecisionConfig {
        approach: glyco_core::decision::Approach::Joint,
        ..decision_config(config)
    };
    let mut candidate_rows = Vec::new();
    for (i, w) in ws.iter().take(config.decision.max_contexts.max(1)).enumerate() {
        let res = decide(&params, &w.context, &config.utility, &cfg, &mut rng::stream(config.seed, "candidate-eu", i as u64))?;
        for (c, &eu) in res.per_candidate_eu.iter().enumerate() {
            candidate_rows.push(CandidateRow {
                patient: &w.context.patient_id,
                t_split: w.context.t_split,
                candidate: c,
                expected_utility: eu,
                chosen: c == res.candidate_index,
            });
        }
    }

    let metrics = Metrics {
        n_splits: comparisons.len(),
        model: mean.model.clone(),
        patient_mean: mean.patient_mean.clone(),
        population_time: mean.population_time.clone(),
        peak_gap_hours_ahead: peak_gap(&gaps),
        error_gap: gaps,
        splits: comparisons,
    };
    let paths = [
        config.out("metrics.json"),
        config.out("horizon_profile.csv"),
        config.out("calibration.csv"),
        config.out("candidate_eu.csv"),
    ];
    write_json(&paths[0], &metrics)?;
    write_csv(&paths[1], &profile)?;
    write_csv(&paths[2], &pit_rows)?;
    write_csv(&paths[3], &candidate_rows)?;
    Ok((vec![input], paths.to_vec()))
}

fn finetune(config: &RunConfig) -> Result<Artifacts, CliError> {
    let (ckpt, params) = load_checkpoint(config)?;
    let (input, ds) = load_dataset(config)?;
    let (fit, _) = holdout(&ds.grids)?;
    let (tuned, report) = finetune_policy(
        &params,
        fit,
        &config.utility,
        &config.finetune,
        &mut rng::stream(config.seed, "finetune", 0),
    )?;
    let out = config.out("finetuned.ckpt");
    let mut w = create(&out)?;
    tuned.save(&mut w)?;
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    let report_path = config.out("finetune_report.json");
    write_json(&report_path, &report)?;
    Ok((vec![ckpt, input], vec![out, report_path]))
}
