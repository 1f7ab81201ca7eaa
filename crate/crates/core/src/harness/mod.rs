//! Monte Carlo harness: configuration, trial ensembles, analytic-vs-empirical checks and
//! file outputs.

pub mod checks;
pub mod config;
pub mod output;
pub mod trials;

pub use checks::{compare_report, resolve_checks, AnalyticReport, Verdict, VerdictRule, CHECKS};
pub use config::{CheckParams, ExperimentConfig, OutputFormat, OutputSpec, SigmaPopSpec};
pub use trials::{run_trials, run_trials_with, Observables, TrialData, TrialRecord, TrialSummary};
