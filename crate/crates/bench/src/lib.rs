//! Fixtures shared by the criterion benches: a small simulated cohort and
//! an untrained default-size model fitted to its scaler.

use glyco_core::cohort::{simulate_cohort, SimConfig};
use glyco_core::preprocess::{fit_scaler, resample_hourly};
use glyco_core::rng;
use glyco_core::seqgen::{ModelConfig, ModelParams};
use glyco_core::{Grid, Window};

pub fn cohort(n: usize, seed: u64) -> Vec<Grid> {
    simulate_cohort(n, &SimConfig::default(), seed)
        .expect("simulation")
        .iter()
        .map(|p| resample_hourly(&p.record).expect("resample"))
        .collect()
}

/// Default-size model with random weights, flagged as trained so the
/// decision code does not warn.
pub fn model(config: &ModelConfig, grids: &[Grid], seed: u64) -> ModelParams {
    let scaler = fit_scaler(grids).expect("scaler");
    let mut p = ModelParams::init(config, &scaler, &mut rng::stream(seed, "bench-init", 0)).expect("init");
    p.trained = true;
    p
}

/// One window per grid, split at its first admissible midnight.
pub fn windows(grids: &[Grid], k: usize) -> Vec<Window> {
    grids
        .iter()
        .filter_map(|g| glyco_core::eval::midnight_windows(g, k).ok()?.into_iter().next())
        .collect()
}
