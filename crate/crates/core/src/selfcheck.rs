//! Oracle-backed invariant checks, shared by the `selfcheck` command and the
//! test suites.
//!
//! The M-step rules under test are passed in as [`Rules`] so that deliberately
//! broken variants can be checked against the same oracles.

use crate::error::Result;
use crate::estimators::{
    b_given_a, e_step, em_estimate, ls_estimate, m_step_aggregates, magnitude_update, phase_update, wrap_phase,
    EmOptions, EstimateTrajectory, MStepAggregates, PosteriorTable, ThetaEstimate,
};
use crate::harness::snr_to_sigma2;
use crate::model::{trial_rng, Constellation, Noise, PilotPair, Realization, ReceivedFrame, Scenario, SystemConfig};
use crate::oracle::{
    finite_diff_grad, grid_maximize_q, incomplete_llf, q_value, theta_coords, theta_from_coords, GridSpec,
    DEFAULT_FD_STEP,
};
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::PI;
use std::fmt;

pub type BUpdate =
    fn(Complex64, &PosteriorTable, &ReceivedFrame, &PilotPair, &Constellation, &SystemConfig) -> Result<Complex64>;
pub type PhaseUpdate =
    fn(&MStepAggregates, &PosteriorTable, &ReceivedFrame, &PilotPair, &Constellation, &SystemConfig, f64) -> f64;

/// The M-step pieces a check exercises.
#[derive(Clone, Copy)]
pub struct Rules {
    pub b_given_a: BUpdate,
    pub phase_update: PhaseUpdate,
}

impl Default for Rules {
    fn default() -> Self {
        Self { b_given_a, phase_update }
    }
}

impl fmt::Debug for Rules {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Rules").finish_non_exhaustive()
    }
}

/// SNR points random instances are drawn from.
pub const SNR_POINTS_DB: [f64; 7] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];
const ORDERS: [usize; 3] = [4, 16, 64];

/// One random test case: a scenario and a noisy realization of it.
#[derive(Debug, Clone)]
pub struct Instance {
    pub scenario: Scenario,
    pub realization: Realization,
}

impl Instance {
    /// Instance `index` of a seeded family with L = 8 and N = 32. The SNR and
    /// modulation order cycle so every (SNR, M) pair is covered.
    pub fn random(seed: u64, index: u64) -> Result<Self> {
        let snr_db = SNR_POINTS_DB[(index % 7) as usize];
        let order = ORDERS[(index / 7 % 3) as usize];
        Self::at(seed, index, snr_db, order, Noise::Awgn)
    }

    pub fn at(seed: u64, index: u64, snr_db: f64, order: usize, noise: Noise) -> Result<Self> {
        let config = SystemConfig::new(8, 32, order, 1.0, 1.0, 1.0, snr_to_sigma2(snr_db, 1.0))?;
        let scenario = Scenario::new(config)?;
        let realization = scenario.realize(noise, &mut trial_rng(seed, index));
        Ok(Self { scenario, realization })
    }

    pub fn truth(&self) -> ThetaEstimate {
        ThetaEstimate::new(self.realization.channel.a, self.realization.channel.b)
    }

    fn parts(&self) -> (&ReceivedFrame, &PilotPair, &Constellation, &SystemConfig) {
        (
            &self.realization.frame,
            &self.scenario.pilots,
            &self.scenario.constellation,
            &self.scenario.config,
        )
    }
}

/// Result of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{status}] {}: {}", self.name, self.detail)
    }
}

/// One EM iteration assembled from `rules`.
pub fn iterate_with(rules: &Rules, theta: &ThetaEstimate, instance: &Instance) -> Result<ThetaEstimate> {
    let (frame, pilots, constellation, config) = instance.parts();
    let beta = e_step(frame, constellation, theta, config);
    let agg = m_step_aggregates(&beta, frame, pilots, constellation, config);
    let phase = (rules.phase_update)(&agg, &beta, frame, pilots, constellation, config, theta.a.arg());
    let a = Complex64::from_polar(magnitude_update(&agg, config).value, phase);
    let b = (rules.b_given_a)(a, &beta, frame, pilots, constellation, config)?;
    Ok(ThetaEstimate::new(a, b))
}

/// Posterior rows are probability vectors summing to 1 within 1e-12.
pub fn check_posterior_normalization(seed: u64, count: u64) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let mut in_range = true;
    let mut rng = trial_rng(seed, u64::MAX);
    for index in 0..count {
        let inst = Instance::random(seed, index)?;
        let (frame, _, constellation, config) = inst.parts();
        let scale: f64 = rng.random_range(0.2..3.0);
        let theta = ThetaEstimate::new(
            inst.truth().a * Complex64::from_polar(scale, rng.random_range(-PI..PI)),
            inst.truth().b * Complex64::from_polar(1.0 / scale, rng.random_range(-PI..PI)),
        );
        let beta = e_step(frame, constellation, &theta, config);
        for row in beta.iter_rows() {
            in_range &= row.iter().all(|p| (0.0..=1.0).contains(p));
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(CheckOutcome {
        name: "posterior normalization",
        passed: in_range && worst <= 1e-12,
        detail: format!("{count} instances, worst row-sum error {worst:.3e}"),
    })
}

/// Largest drop of the incomplete-data log-likelihood along a trajectory.
pub fn worst_llf_drop(trajectory: &EstimateTrajectory, instance: &Instance) -> f64 {
    let (frame, pilots, constellation, config) = instance.parts();
    let llf: Vec<f64> = trajectory
        .iterates
        .iter()
        .map(|t| incomplete_llf(t, frame, pilots, constellation, config))
        .collect();
    llf.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
}

/// The incomplete-data log-likelihood never decreases along EM trajectories
/// started from the LS estimate (tolerance 1e-9).
pub fn check_em_ascent(rules: &Rules, seed: u64, count: u64, iterations: usize) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for index in 0..count {
        let inst = Instance::random(seed, index)?;
        let (frame, pilots, _, config) = inst.parts();
        let mut trajectory = EstimateTrajectory::default();
        let mut theta = ls_estimate(frame, pilots, config)?;
        trajectory.iterates.push(theta);
        for _ in 0..iterations {
            theta = iterate_with(rules, &theta, &inst)?;
            trajectory.iterates.push(theta);
        }
        worst = worst.max(worst_llf_drop(&trajectory, &inst));
    }
    Ok(CheckOutcome {
        name: "EM ascent",
        passed: worst <= 1e-9,
        detail: format!("{count} instances × {iterations} iterations, worst log-likelihood drop {worst:.3e}"),
    })
}

/// Agreement between the closed-form M-step and an exhaustive grid search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridComparison {
    /// Circular phase distance in grid cells (0 when the modulus is clamped).
    pub phase_cells: f64,
    pub magnitude_cells: f64,
    /// `Q(grid best) − Q(closed form)`; non-positive up to rounding.
    pub q_shortfall: f64,
    /// Largest finite-difference partial of Q at the closed-form point.
    pub gradient: f64,
}

pub fn compare_with_grid(rules: &Rules, instance: &Instance, resolution: usize) -> Result<GridComparison> {
    let (frame, pilots, constellation, config) = instance.parts();
    let theta = ls_estimate(frame, pilots, config)?;
    let beta = e_step(frame, constellation, &theta, config);
    let agg = m_step_aggregates(&beta, frame, pilots, constellation, config);
    let phase = (rules.phase_update)(&agg, &beta, frame, pilots, constellation, config, theta.a.arg());
    let magnitude = magnitude_update(&agg, config);
    let a = Complex64::from_polar(magnitude.value, phase);
    let b = (rules.b_given_a)(a, &beta, frame, pilots, constellation, config)?;
    let closed = ThetaEstimate::new(a, b);

    let phase_grid = GridSpec::full_circle(resolution)?;
    let mag_grid = GridSpec::new(0.0, 2.0 * magnitude.value.max(theta.a.norm()) + 0.5, resolution)?;
    let best = grid_maximize_q(&beta, frame, pilots, constellation, config, &phase_grid, &mag_grid);

    let q = |x: &[f64]| q_value(&theta_from_coords(x), &beta, frame, pilots, constellation, config);
    let coords = theta_coords(&closed);
    let grad = finite_diff_grad(q, &coords, DEFAULT_FD_STEP)?;
    // At a clamped modulus the objective has a kink in `a`; only `b` is stationary there.
    let gradient = if magnitude.clamped { &grad[2..] } else { &grad[..] }
        .iter()
        .fold(0.0f64, |m, g| m.max(g.abs()));

    let phase_cells = if magnitude.clamped {
        0.0
    } else {
        wrap_phase(best.phase - phase).abs() / phase_grid.spacing()
    };
    Ok(GridComparison {
        phase_cells,
        magnitude_cells: (best.magnitude - magnitude.value).abs() / mag_grid.spacing(),
        q_shortfall: best.q - q(&coords),
        gradient,
    })
}

/// Cell tolerance for grid agreement; the extra 1e-6 absorbs rounding in
/// the cell-distance ratio itself.
const ONE_CELL: f64 = 1.0 + 1e-6;

/// Closed-form phase and modulus land within one cell of the grid argmax,
/// reach the grid maximum within 1e-6, and have vanishing gradient (< 1e-6).
pub fn check_mstep_grid(rules: &Rules, seed: u64, count: u64, resolution: usize) -> Result<CheckOutcome> {
    let mut worst = GridComparison { phase_cells: 0.0, magnitude_cells: 0.0, q_shortfall: f64::NEG_INFINITY, gradient: 0.0 };
    for index in 0..count {
        let inst = Instance::random(seed, index)?;
        let cmp = compare_with_grid(rules, &inst, resolution)?;
        worst.phase_cells = worst.phase_cells.max(cmp.phase_cells);
        worst.magnitude_cells = worst.magnitude_cells.max(cmp.magnitude_cells);
        worst.q_shortfall = worst.q_shortfall.max(cmp.q_shortfall);
        worst.gradient = worst.gradient.max(cmp.gradient);
    }
    let passed = worst.phase_cells <= ONE_CELL
        && worst.magnitude_cells <= ONE_CELL
        && worst.q_shortfall <= 1e-6
        && worst.gradient < 1e-6;
    Ok(CheckOutcome {
        name: "M-step grid agreement",
        passed,
        detail: format!(
            "{count} instances on a {resolution}×{resolution} grid: phase {:.3} cells, modulus {:.3} cells, Q shortfall {:.3e}, max |∇Q| {:.3e}",
            worst.phase_cells, worst.magnitude_cells, worst.q_shortfall, worst.gradient
        ),
    })
}

/// The `b` update is a stationary point of Q in `b` for off-optimum `a`.
pub fn check_b_stationarity(rules: &Rules, seed: u64, count: u64) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for index in 0..count {
        let inst = Instance::random(seed, index)?;
        let (frame, pilots, constellation, config) = inst.parts();
        let theta = ls_estimate(frame, pilots, config)?;
        let beta = e_step(frame, constellation, &theta, config);
        let a = theta.a * Complex64::from_polar(1.1, 0.05);
        let b = (rules.b_given_a)(a, &beta, frame, pilots, constellation, config)?;
        let q = |x: &[f64]| {
            q_value(&ThetaEstimate::new(a, Complex64::new(x[0], x[1])), &beta, frame, pilots, constellation, config)
        };
        let grad = finite_diff_grad(q, &[b.re, b.im], DEFAULT_FD_STEP)?;
        worst = grad.iter().fold(worst, |m, g| m.max(g.abs()));
    }
    Ok(CheckOutcome {
        name: "b-update stationarity",
        passed: worst < 1e-6,
        detail: format!("{count} instances, max |∂Q/∂b| {worst:.3e}"),
    })
}

/// Errors of LS and 4-iteration EM against the true channel on noiseless
/// frames, returned as `(ls, em)` Euclidean distances.
pub fn noiseless_errors(seed: u64, index: u64) -> Result<(f64, f64)> {
    // 120 dB: σ² = 1e-12 in the estimator's noise model, no noise in the frame.
    let order = ORDERS[(index % 3) as usize];
    let inst = Instance::at(seed, index, 120.0, order, Noise::Silent)?;
    let (frame, pilots, constellation, config) = inst.parts();
    let truth = inst.truth();
    let ls = ls_estimate(frame, pilots, config)?;
    let trajectory = em_estimate(frame, pilots, constellation, config, &EmOptions::fixed(4))?;
    let em = trajectory.iterates.iter().map(|t| t.squared_error(&truth).sqrt()).fold(0.0, f64::max);
    Ok((ls.squared_error(&truth).sqrt(), em))
}

/// LS recovers the channel within 1e-10 and EM stays within 1e-8 of it.
pub fn check_noiseless_recovery(seed: u64, count: u64) -> Result<CheckOutcome> {
    let (mut worst_ls, mut worst_em) = (0.0f64, 0.0f64);
    for index in 0..count {
        let (ls, em) = noiseless_errors(seed, index)?;
        worst_ls = worst_ls.max(ls);
        worst_em = worst_em.max(em);
    }
    Ok(CheckOutcome {
        name: "noiseless recovery",
        passed: worst_ls <= 1e-10 && worst_em <= 1e-8,
        detail: format!("{count} channels, worst LS error {worst_ls:.3e}, worst EM error {worst_em:.3e}"),
    })
}

/// The suite run by `twrn-em selfcheck`.
pub fn run_all(rules: &Rules, seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_posterior_normalization(seed, 100)?,
        check_em_ascent(rules, seed, 100, 8)?,
        check_mstep_grid(rules, seed, 10, 1000)?,
        check_b_stationarity(rules, seed, 21)?,
        check_noiseless_recovery(seed, 30)?,
    ])
}
