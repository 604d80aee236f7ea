//! Seeded Monte-Carlo sweeps of total MSE for the LS and EM estimators.
//!
//! Every trial draws from its own stream `trial_rng(seed, trial)`, so the
//! channel and pilot noise of trial `k` are shared across all operating
//! points, and serial and parallel runs produce identical numbers.

use crate::error::{Error, Result};
use crate::estimators::{em_estimate, ls_estimate, EmOptions, ThetaEstimate};
use crate::model::{trial_rng, Noise, Scenario, SystemConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Everything needed to run a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub pilot_len: usize,
    pub p1: f64,
    pub p2: f64,
    pub pr: f64,
    pub snr_grid_db: Vec<f64>,
    pub mod_orders: Vec<usize>,
    pub n_values: Vec<usize>,
    pub trials: usize,
    pub em_iters: usize,
    pub seed: u64,
    /// Spread trials over the rayon pool.
    pub parallel: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            pilot_len: 8,
            p1: 1.0,
            p2: 1.0,
            pr: 1.0,
            snr_grid_db: (0..=6).map(|k| 5.0 * k as f64).collect(),
            mod_orders: vec![4, 16, 64],
            n_values: vec![32],
            trials: 100,
            em_iters: 4,
            seed: 1,
            parallel: true,
        }
    }
}

impl ExperimentSpec {
    /// Defaults of the convergence experiment: N ∈ {32, 100} at 15 dB, with
    /// enough iterations to compare iterations 12 and 13.
    pub fn convergence_defaults() -> Self {
        Self {
            snr_grid_db: vec![15.0],
            n_values: vec![32, 100],
            em_iters: 13,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.em_iters == 0 {
            return Err(Error::Config("em_iters must be at least 1".into()));
        }
        for (name, empty) in [
            ("snr grid", self.snr_grid_db.is_empty()),
            ("modulation orders", self.mod_orders.is_empty()),
            ("data lengths", self.n_values.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
        }
        if self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("SNR values must be finite".into()));
        }
        // Surface bad orders, powers and lengths before any trial runs.
        for &order in &self.mod_orders {
            for &n in &self.n_values {
                Scenario::new(self.config(order, n, 0.0)?)?;
            }
        }
        Ok(())
    }

    pub fn config(&self, order: usize, data_len: usize, snr_db: f64) -> Result<SystemConfig> {
        SystemConfig::new(self.pilot_len, data_len, order, self.p1, self.p2, self.pr, snr_to_sigma2(snr_db, self.p2))
    }
}

/// Averaged result for one operating point (and one iteration count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRecord {
    pub snr_db: f64,
    pub order: usize,
    pub data_len: usize,
    pub iteration: usize,
    pub mse_em: f64,
    pub mse_ls: f64,
    /// Trials with finite output that entered the averages.
    pub trials: usize,
    /// Clamped modulus updates summed over trials and iterations.
    pub clamp_flags: usize,
    /// Trials dropped because an estimator produced a non-finite value.
    pub excluded: usize,
}

/// `σ²` for an SNR defined as `10·log10(P2/σ²)`.
pub fn snr_to_sigma2(snr_db: f64, p2: f64) -> f64 {
    p2 / 10f64.powf(snr_db / 10.0)
}

/// Mean over trials of `|â − a|² + |b̂ − b|²`.
pub fn total_mse(estimates: &[ThetaEstimate], truths: &[ThetaEstimate]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::LengthMismatch(estimates.len(), truths.len()));
    }
    if estimates.is_empty() {
        return Err(Error::Degenerate("no trials to average"));
    }
    let sum: f64 = estimates.iter().zip(truths).map(|(e, t)| e.squared_error(t)).sum();
    Ok(sum / estimates.len() as f64)
}

/// Per-trial squared errors after every EM iteration.
#[derive(Debug, Clone)]
struct TrialOutcome {
    ls_error: f64,
    em_errors: Vec<f64>,
    clamped: usize,
}

fn run_trial(scenario: &Scenario, seed: u64, trial: usize, em_iters: usize) -> Option<TrialOutcome> {
    let mut rng = trial_rng(seed, trial as u64);
    let r = scenario.realize(Noise::Awgn, &mut rng);
    let truth = ThetaEstimate::new(r.channel.a, r.channel.b);
    let cfg = &scenario.config;
    let ls = ls_estimate(&r.frame, &scenario.pilots, cfg).ok()?;
    let options = EmOptions { init: Some(ls), max_iters: em_iters, rel_tol: None };
    let trajectory = em_estimate(&r.frame, &scenario.pilots, &scenario.constellation, cfg, &options).ok()?;
    let em_errors: Vec<f64> = trajectory.iterates.iter().map(|t| t.squared_error(&truth)).collect();
    let ls_error = ls.squared_error(&truth);
    if !ls_error.is_finite() || em_errors.iter().any(|e| !e.is_finite()) {
        return None;
    }
    Some(TrialOutcome { ls_error, em_errors, clamped: trajectory.clamped })
}

/// Averages for one operating point; `em[k]` is the MSE after `k` iterations.
#[derive(Debug, Clone, PartialEq)]
struct CellSummary {
    ls: f64,
    em: Vec<f64>,
    kept: usize,
    clamped: usize,
    excluded: usize,
}

fn run_cell(spec: &ExperimentSpec, order: usize, data_len: usize, snr_db: f64) -> Result<CellSummary> {
    let scenario = Scenario::new(spec.config(order, data_len, snr_db)?)?;
    let trial = |k: usize| run_trial(&scenario, spec.seed, k, spec.em_iters);
    let outcomes: Vec<Option<TrialOutcome>> = if spec.parallel {
        (0..spec.trials).into_par_iter().map(trial).collect()
    } else {
        (0..spec.trials).map(trial).collect()
    };

    // Sequential reduction in trial order keeps the sums bit-identical.
    let mut ls = 0.0;
    let mut em = vec![0.0; spec.em_iters + 1];
    let (mut kept, mut clamped, mut excluded) = (0, 0, 0);
    for outcome in &outcomes {
        match outcome {
            Some(o) => {
                ls += o.ls_error;
                em.iter_mut().zip(&o.em_errors).for_each(|(acc, e)| *acc += e);
                kept += 1;
                clamped += o.clamped;
            }
            None => excluded += 1,
        }
    }
    let denom = kept.max(1) as f64;
    if kept == 0 {
        ls = f64::NAN;
        em.iter_mut().for_each(|v| *v = f64::NAN);
    } else {
        ls /= denom;
        em.iter_mut().for_each(|v| *v /= denom);
    }
    Ok(CellSummary { ls, em, kept, clamped, excluded })
}

/// Total MSE of LS and of EM after `em_iters` iterations for every
/// `(snr, M, N)` of the spec, in that nesting order.
pub fn run_mse_vs_snr(spec: &ExperimentSpec) -> Result<Vec<MseRecord>> {
    spec.validate()?;
    let mut records = Vec::new();
    for &snr_db in &spec.snr_grid_db {
        for &order in &spec.mod_orders {
            for &data_len in &spec.n_values {
                let cell = run_cell(spec, order, data_len, snr_db)?;
                records.push(MseRecord {
                    snr_db,
                    order,
                    data_len,
                    iteration: spec.em_iters,
                    mse_em: cell.em[spec.em_iters],
                    mse_ls: cell.ls,
                    trials: cell.kept,
                    clamp_flags: cell.clamped,
                    excluded: cell.excluded,
                });
            }
        }
    }
    Ok(records)
}

/// EM total MSE after every iteration `0..=em_iters` for each `(M, N)` (and
/// each SNR in the grid). Iteration 0 is the LS initializer.
pub fn run_mse_vs_iterations(spec: &ExperimentSpec) -> Result<Vec<MseRecord>> {
    spec.validate()?;
    let mut records = Vec::new();
    for &snr_db in &spec.snr_grid_db {
        for &order in &spec.mod_orders {
            for &data_len in &spec.n_values {
                let cell = run_cell(spec, order, data_len, snr_db)?;
                records.extend(cell.em.iter().enumerate().map(|(iteration, &mse_em)| MseRecord {
                    snr_db,
                    order,
                    data_len,
                    iteration,
                    mse_em,
                    mse_ls: cell.ls,
                    trials: cell.kept,
                    clamp_flags: cell.clamped,
                    excluded: cell.excluded,
                }));
            }
        }
    }
    Ok(records)
}
