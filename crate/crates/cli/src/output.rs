//! Artifact writers and the small statistics behind them.

use std::fs::{self, File};
use std::path::Path;

use serde::Serialize;

use crate::CliError;

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], level: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of no values");
    let pos = level.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mid-rank probability integral transform of `y` under an empirical sample.
pub fn pit(samples: &[f64], y: f64) -> f64 {
    let below = samples.iter().filter(|&&s| s < y).count() as f64;
    let ties = samples.iter().filter(|&&s| s == y).count() as f64;
    (below + 0.5 * ties) / samples.len() as f64
}

/// Counts of values in `bins` equal-width bins over [0, 1].
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Comma-separated, LF-terminated CSV with a header row.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let file = File::create(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}
