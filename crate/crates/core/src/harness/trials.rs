//! Parallel trial execution with index-ordered, schedule-independent aggregation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{solve_sigma_view, SolverOptions};
use crate::freenergy::{conditional_free_energy, full_free_energy, map_fe_conditional_variance};
use crate::harness::config::ExperimentConfig;
use crate::linalg::SpectralView;
use crate::model::{FreeEnergyBreakdown, PopulationModel, RegressionInstance};
use crate::sampler::{sample_instance, SeedSpec};
use crate::stats::{CoMoments, Moments};

/// Trials per aggregation chunk. Chunks are merged in index order, so the result does not
/// depend on how many workers ran them.
const CHUNK: usize = 256;

/// Which optional per-trial observables to compute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observables {
    /// `theta_ml - theta0` per coordinate.
    pub theta_error: bool,
    /// Conditional free energy at the configured `(sigma^2, eta, beta)`.
    pub free_energy: bool,
    /// Eigenvalues of the sample covariance `C`.
    pub spectrum: bool,
    /// Fixed point of the noise-variance recursion.
    pub sigma_fixed_point: bool,
    /// Full free energy with the noise variance integrated out (or minimized).
    pub full_free_energy: bool,
    /// Exact variance of `F/N` over teacher and noise at the sampled design.
    pub conditional_fe_variance: bool,
}

impl Observables {
    pub fn all() -> Self {
        Observables {
            theta_error: true,
            free_energy: true,
            spectrum: true,
            sigma_fixed_point: true,
            full_free_energy: true,
            conditional_fe_variance: true,
        }
    }

    pub fn union(self, o: Observables) -> Self {
        Observables {
            theta_error: self.theta_error || o.theta_error,
            free_energy: self.free_energy || o.free_energy,
            spectrum: self.spectrum || o.spectrum,
            sigma_fixed_point: self.sigma_fixed_point || o.sigma_fixed_point,
            full_free_energy: self.full_free_energy || o.full_free_energy,
            conditional_fe_variance: self.conditional_fe_variance || o.conditional_fe_variance,
        }
    }
}

/// Observables of one teacher-student draw. Free energies are per sample (`/N`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: u64,
    /// `|t - Z theta_ml|^2`.
    pub rss: f64,
    /// `rss / N`.
    pub sigma_ml: f64,
    /// `|theta_ml - theta0|^2 / d`.
    pub mse: f64,
    pub theta_error: Option<Vec<f64>>,
    pub free_energy: Option<FreeEnergyBreakdown>,
    pub eigenvalues: Option<Vec<f64>>,
    pub sigma_fixed_point: Option<f64>,
    pub full_free_energy: Option<f64>,
    pub conditional_fe_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub index: u64,
    pub message: String,
}

/// Ordered results of an indexed run plus the failures that stayed within budget.
#[derive(Debug, Clone)]
pub struct IndexedRun<T> {
    pub records: Vec<T>,
    pub failures: Vec<TrialFailure>,
}

/// Runs `f(0..trials)` on the worker pool, keeping index order.
pub fn run_indexed<T, F>(trials: usize, workers: Option<usize>, failure_budget: usize, f: F) -> Result<IndexedRun<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let job = || (0..trials as u64).into_par_iter().map(|k| (k, f(k))).collect::<Vec<_>>();
    let results = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(job),
        None => job(),
    };
    let mut records = Vec::with_capacity(trials);
    let mut failures = Vec::new();
    let mut first: Option<(u64, Error)> = None;
    for (k, r) in results {
        match r {
            Ok(v) => records.push(v),
            Err(e) => {
                failures.push(TrialFailure { index: k, message: e.to_string() });
                if first.is_none() {
                    first = Some((k, e));
                }
            }
        }
    }
    if failures.len() > failure_budget {
        let (index, source) = first.expect("at least one failure");
        return Err(Error::Trial { index, source: Box::new(source) });
    }
    Ok(IndexedRun { records, failures })
}

/// Draws trial `seed` and computes the requested observables.
pub fn observe(cfg: &ExperimentConfig, pop: &PopulationModel, seed: SeedSpec, obs: Observables) -> Result<TrialRecord> {
    let inst = sample_instance(pop, cfg.n, cfg.sigma0_sq, cfg.scaled, seed)?;
    observe_instance(cfg, &inst, seed.stream_index, obs)
}

pub fn observe_instance(cfg: &ExperimentConfig, inst: &RegressionInstance, index: u64, obs: Observables) -> Result<TrialRecord> {
    let view = SpectralView::of(inst)?;
    view.check_shift(0.0)?;
    let (n, d) = (inst.n(), inst.d());
    let err = view.theta(0.0) - inst.theta0();
    let rss = view.rss(0.0);
    let sigma_sq = cfg.student_sigma_sq();
    let scale = if inst.scaled() { d as f64 / n as f64 } else { 1.0 / n as f64 };
    let eigenvalues = (obs.spectrum || obs.conditional_fe_variance).then(|| {
        let mut e: Vec<f64> = view.mu.iter().map(|m| m * scale).collect();
        e.sort_by(f64::total_cmp);
        e
    });
    let free_energy = if obs.free_energy {
        Some(conditional_free_energy(inst, sigma_sq, cfg.eta, cfg.beta)?.per_sample(n))
    } else {
        None
    };
    let sigma_fixed_point = if obs.sigma_fixed_point {
        Some(match cfg.prior.pinned() {
            Some(s) => s,
            None => {
                cfg.beta.check_above(inst.zeta())?;
                solve_sigma_view(&view, cfg.eta, cfg.beta, &cfg.prior, SolverOptions::default())?.sigma_sq
            }
        })
    } else {
        None
    };
    let full = if obs.full_free_energy {
        Some(full_free_energy(inst, cfg.eta, cfg.beta, &cfg.prior)? / n as f64)
    } else {
        None
    };
    let conditional_fe_variance = obs.conditional_fe_variance.then(|| {
        let e = eigenvalues.as_deref().expect("computed above");
        map_fe_conditional_variance(e, inst.zeta(), sigma_sq, cfg.sigma0_sq, cfg.eta, cfg.theta_prior_var, n)
    });
    Ok(TrialRecord {
        index,
        rss,
        sigma_ml: rss / n as f64,
        mse: err.norm_squared() / d as f64,
        theta_error: obs.theta_error.then(|| err.iter().copied().collect()),
        free_energy,
        eigenvalues: if obs.spectrum { eigenvalues } else { None },
        sigma_fixed_point,
        full_free_energy: full,
        conditional_fe_variance,
    })
}

/// Aggregate report of a run: streaming moments of every scalar observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub config_hash: String,
    pub master_seed: u64,
    pub trials: usize,
    pub completed: usize,
    pub failures: Vec<TrialFailure>,
    pub moments: BTreeMap<String, Moments>,
    /// Joint moments of `(E/N, S/N)` when free energies were computed.
    pub energy_entropy: Option<CoMoments>,
}

/// Records and their summary.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub records: Vec<TrialRecord>,
    pub summary: TrialSummary,
}

impl TrialData {
    pub fn column(&self, f: impl Fn(&TrialRecord) -> Option<f64>) -> Vec<f64> {
        self.records.iter().filter_map(f).collect()
    }

    pub fn spectra(&self) -> Vec<&[f64]> {
        self.records.iter().filter_map(|r| r.eigenvalues.as_deref()).collect()
    }
}

fn scalar_columns(r: &TrialRecord) -> Vec<(String, f64)> {
    let mut out = vec![("rss".to_string(), r.rss), ("sigma_ml".to_string(), r.sigma_ml), ("mse".to_string(), r.mse)];
    if let Some(fe) = &r.free_energy {
        out.push(("free_energy".into(), fe.free_energy));
        out.push(("avg_energy".into(), fe.avg_energy));
        out.push(("entropy".into(), fe.entropy));
    }
    if let Some(v) = r.sigma_fixed_point {
        out.push(("sigma_fixed_point".into(), v));
    }
    if let Some(v) = r.full_free_energy {
        out.push(("full_free_energy".into(), v));
    }
    if let Some(v) = r.conditional_fe_variance {
        out.push(("conditional_fe_variance".into(), v));
    }
    if let Some(e) = &r.theta_error {
        for (j, x) in e.iter().enumerate() {
            out.push((format!("theta_error_{j}"), *x));
        }
    }
    out
}

/// Streaming aggregation: per-chunk moments merged in chunk order.
pub fn summarize(cfg: &ExperimentConfig, records: &[TrialRecord], failures: Vec<TrialFailure>) -> TrialSummary {
    let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
    let mut es: Option<CoMoments> = None;
    for chunk in records.chunks(CHUNK) {
        let mut local: BTreeMap<String, Moments> = BTreeMap::new();
        let mut local_es: Option<CoMoments> = None;
        for r in chunk {
            for (k, v) in scalar_columns(r) {
                local.entry(k).or_default().push(v);
            }
            if let Some(fe) = &r.free_energy {
                local_es.get_or_insert_with(CoMoments::default).push(fe.avg_energy, fe.entropy);
            }
        }
        for (k, m) in local {
            moments.entry(k).or_default().merge(&m);
        }
        if let Some(c) = local_es {
            es.get_or_insert_with(CoMoments::default).merge(&c);
        }
    }
    TrialSummary {
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        trials: cfg.trials,
        completed: records.len(),
        failures,
        moments,
        energy_entropy: es,
    }
}

/// Runs `cfg.trials` draws with stream indices `0..trials` (salted by `salt` when nonzero).
pub fn run_trials_with(cfg: &ExperimentConfig, obs: Observables, salt: u64) -> Result<TrialData> {
    cfg.validate()?;
    let pop = cfg.population()?;
    let run = run_indexed(cfg.trials, cfg.workers, cfg.failure_budget, |k| {
        let seed = SeedSpec::new(cfg.master_seed, k);
        let seed = if salt == 0 { seed } else { seed.child(salt) };
        let mut r = observe(cfg, &pop, seed, obs)?;
        r.index = k;
        Ok(r)
    })?;
    let summary = summarize(cfg, &run.records, run.failures);
    Ok(TrialData { records: run.records, summary })
}

/// Runs the configured trials computing every observable the build supports for `cfg`.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<TrialSummary> {
    let mut obs = Observables { theta_error: true, spectrum: false, ..Observables::default() };
    if cfg.beta.is_finite() {
        obs.free_energy = true;
    }
    Ok(run_trials_with(cfg, obs, 0)?.summary)
}
