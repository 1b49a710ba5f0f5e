//! Baselines, forecast metrics, ablations, sample-quality checks and
//! simulator-oracle policy evaluation.

mod baselines;
mod discriminate;
mod metrics;
mod policy;
mod protocol;

#[cfg(test)]
mod tests;

pub use baselines::{baseline_patient_mean, PopulationTimeBaseline};
pub use discriminate::{auc, generate_like, real_vs_generated_auc, summary_features, SampleTrajectory};
pub use metrics::{average_reports, horizon_profile, metrics, ErrorAccumulator, HorizonBin, MetricsReport};
pub use policy::{
    eval_contexts, out_of_support_score, policy_evaluation, EvalContext, PolicyOutcome, TreatmentSupport,
    HYPO_THRESHOLD,
};
pub use protocol::{
    ablation_run, error_gap, evaluate_forecasts, midnight_windows, patient_splits, peak_gap, point_forecast, run_split,
    ForecastComparison, GapBin, PatientSplit, SplitRun,
};
