//! Training-based least squares and the semi-blind EM estimator.
//!
//! The EM loop treats T2's data block as hidden. Each iteration computes the
//! symbol posteriors (E-step), then maximizes the expected complete-data
//! log-likelihood in closed form: `b` is eliminated as a function of `a`, the
//! phase of `a` follows from one complex inner product and its modulus is the
//! positive root of a quadratic. Every step costs `O(N·M)`.

use crate::error::{Error, Result};
use crate::model::{inner, norm_sqr, Constellation, PilotPair, ReceivedFrame, SystemConfig};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Estimate of the cascaded coefficients `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaEstimate {
    pub a: Complex64,
    pub b: Complex64,
}

impl ThetaEstimate {
    pub fn new(a: Complex64, b: Complex64) -> Self {
        Self { a, b }
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite()
    }

    /// `|Δa|² + |Δb|²`.
    pub fn squared_error(&self, other: &ThetaEstimate) -> f64 {
        (self.a - other.a).norm_sqr() + (self.b - other.b).norm_sqr()
    }

    pub fn norm(&self) -> f64 {
        (self.a.norm_sqr() + self.b.norm_sqr()).sqrt()
    }
}

/// Posterior probabilities of T2's symbols, one row per data slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    order: usize,
    beta: Vec<f64>,
}

impl PosteriorTable {
    /// Build from row-major probabilities; rows are not renormalized.
    pub fn from_rows(order: usize, beta: Vec<f64>) -> Result<Self> {
        if order == 0 || beta.len() % order != 0 {
            return Err(Error::LengthMismatch(beta.len(), order));
        }
        Ok(Self { order, beta })
    }

    /// One-hot rows selecting `indices[i]` for slot `i`.
    pub fn indicator(order: usize, indices: &[usize]) -> Self {
        let mut beta = vec![0.0; order * indices.len()];
        for (i, &j) in indices.iter().enumerate() {
            beta[i * order + j] = 1.0;
        }
        Self { order, beta }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rows(&self) -> usize {
        self.beta.len() / self.order
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.beta[i * self.order..(i + 1) * self.order]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.beta.chunks_exact(self.order)
    }
}

/// Scalars the M-step needs once `b` has been eliminated.
///
/// `g`, `i_agg`, `x_agg` define `b(a) = (i_agg − A·a·x_agg) / g`; `u`, `v`,
/// `w` are the coefficients of the phase-optimized objective in `|a|`, and
/// `cross` is the complex inner product whose angle fixes the phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepAggregates {
    pub g: f64,
    pub i_agg: Complex64,
    pub x_agg: Complex64,
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub cross: Complex64,
}

/// Outcome of the modulus update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnitudeUpdate {
    pub value: f64,
    /// The stationary point fell at or below zero and was clamped.
    pub clamped: bool,
}

/// One EM iteration's new estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmUpdate {
    pub theta: ThetaEstimate,
    pub clamped: bool,
}

/// EM iterates, starting with the initializer at index 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EstimateTrajectory {
    pub iterates: Vec<ThetaEstimate>,
    /// Incomplete-data log-likelihood per iterate; empty unless filled by
    /// [`crate::oracle::trajectory_llf`].
    pub llf: Vec<f64>,
    /// Number of iterations whose modulus update was clamped.
    pub clamped: usize,
}

impl EstimateTrajectory {
    pub fn iterations(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }

    pub fn last(&self) -> &ThetaEstimate {
        self.iterates.last().expect("trajectory always holds the initializer")
    }
}

/// Least-squares fit of `(a, b)` to the pilot observations.
///
/// With orthogonal pilots the normal equations decouple into two
/// projections.
pub fn ls_estimate(frame: &ReceivedFrame, pilots: &PilotPair, config: &SystemConfig) -> Result<ThetaEstimate> {
    let e1 = norm_sqr(&pilots.t1);
    let e2 = norm_sqr(&pilots.t2);
    if e1 == 0.0 || e2 == 0.0 {
        return Err(Error::Degenerate("zero pilot energy"));
    }
    let amp = config.amp;
    Ok(ThetaEstimate {
        a: inner(&pilots.t1, &frame.y) / (amp * e1),
        b: inner(&pilots.t2, &frame.y) / (amp * e2),
    })
}

/// Posterior of every data symbol of T2 under the current estimate.
pub fn e_step(
    frame: &ReceivedFrame,
    constellation: &Constellation,
    theta: &ThetaEstimate,
    config: &SystemConfig,
) -> PosteriorTable {
    let order = constellation.order();
    let amp = config.amp;
    let inv_var = 1.0 / config.effective_noise_variance(theta.a);
    let mut beta = Vec::with_capacity(order * frame.z.len());
    let mut exps = vec![0.0; order];
    for (z, s1) in frame.z.iter().zip(&frame.s1) {
        let residual = z - amp * theta.a * s1;
        for (e, xi) in exps.iter_mut().zip(constellation.points()) {
            *e = -(residual - amp * theta.b * xi).norm_sqr() * inv_var;
        }
        let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = beta.len();
        beta.extend(exps.iter().map(|e| (e - max).exp()));
        let total: f64 = beta[start..].iter().sum();
        beta[start..].iter_mut().for_each(|p| *p /= total);
    }
    PosteriorTable { order, beta }
}

/// Posterior-weighted data sums: `ΣΣβ|ξ|²`, `ΣΣβξ*z`, `ΣΣβξ*s1`.
fn weighted_sums(
    beta: &PosteriorTable,
    frame: &ReceivedFrame,
    constellation: &Constellation,
) -> (f64, Complex64, Complex64) {
    let mut energy = 0.0;
    let mut with_z = Complex64::new(0.0, 0.0);
    let mut with_s1 = Complex64::new(0.0, 0.0);
    for ((row, z), s1) in beta.iter_rows().zip(&frame.z).zip(&frame.s1) {
        let mut mean = Complex64::new(0.0, 0.0);
        for (p, xi) in row.iter().zip(constellation.points()) {
            energy += p * xi.norm_sqr();
            mean += p * xi.conj();
        }
        with_z += mean * z;
        with_s1 += mean * s1;
    }
    (energy, with_z, with_s1)
}

/// Maximizer of the expected log-likelihood over `b` with `a` held fixed.
pub fn b_given_a(
    a: Complex64,
    beta: &PosteriorTable,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
) -> Result<Complex64> {
    let amp = config.amp;
    let (energy, with_z, with_s1) = weighted_sums(beta, frame, constellation);
    let numerator = with_z - amp * a * with_s1 + inner(&pilots.t2, &frame.y) - amp * a * inner(&pilots.t2, &pilots.t1);
    let denominator = amp * energy + amp * norm_sqr(&pilots.t2);
    if denominator <= 0.0 {
        return Err(Error::Degenerate("b update has zero denominator"));
    }
    Ok(numerator / denominator)
}

/// Compute `G`, `𝓘`, `𝓧` and the modulus-objective coefficients.
pub fn m_step_aggregates(
    beta: &PosteriorTable,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
) -> MStepAggregates {
    let amp = config.amp;
    let (energy, with_z, with_s1) = weighted_sums(beta, frame, constellation);
    let g = amp * (energy + norm_sqr(&pilots.t2));
    let i_agg = with_z + inner(&pilots.t2, &frame.y);
    let x_agg = with_s1 + inner(&pilots.t2, &pilots.t1);

    // Residual of b(a) substituted back is (c + a·d)/G per observation,
    // with c = G·w − A·𝓘·q and d = A²·𝓧·q − A·G·p.
    let offset = |w: Complex64, q: Complex64| g * w - amp * i_agg * q;
    let slope = |p: Complex64, q: Complex64| amp * amp * x_agg * q - amp * g * p;

    let mut u = 0.0;
    let mut v = 0.0;
    let mut cross = Complex64::new(0.0, 0.0);
    for ((row, z), s1) in beta.iter_rows().zip(&frame.z).zip(&frame.s1) {
        for (p, xi) in row.iter().zip(constellation.points()) {
            let c = offset(*z, *xi);
            let d = slope(*s1, *xi);
            u += p * c.norm_sqr();
            v += p * d.norm_sqr();
            cross += p * c.conj() * d;
        }
    }
    for ((y, t1), t2) in frame.y.iter().zip(&pilots.t1).zip(&pilots.t2) {
        let c = offset(*y, *t2);
        let d = slope(*t1, *t2);
        u += c.norm_sqr();
        v += d.norm_sqr();
        cross += c.conj() * d;
    }
    let g2 = g * g;
    MStepAggregates {
        g,
        i_agg,
        x_agg,
        u: u / g2,
        v: v / g2,
        w: cross.norm() / g2,
        cross,
    }
}

/// The inner product whose angle sets the phase of `a`, recomputed from the
/// posteriors and the aggregates `G`, `𝓘`, `𝓧`.
pub fn phase_cross_term(
    aggregates: &MStepAggregates,
    beta: &PosteriorTable,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
) -> Complex64 {
    let amp = config.amp;
    let MStepAggregates { g, i_agg, x_agg, .. } = *aggregates;
    let mut sum = Complex64::new(0.0, 0.0);
    for ((row, z), s1) in beta.iter_rows().zip(&frame.z).zip(&frame.s1) {
        for (p, xi) in row.iter().zip(constellation.points()) {
            sum += p * (g * z - amp * i_agg * xi).conj() * (amp * amp * x_agg * xi - amp * g * s1);
        }
    }
    for ((y, t1), t2) in frame.y.iter().zip(&pilots.t1).zip(&pilots.t2) {
        sum += (g * y - amp * i_agg * t2).conj() * (amp * amp * x_agg * t2 - amp * g * t1);
    }
    sum
}

/// Wrap an angle into `(−π, π]`.
pub fn wrap_phase(phi: f64) -> f64 {
    let mut wrapped = phi.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped -= 2.0 * PI;
    }
    if wrapped <= -PI {
        wrapped += 2.0 * PI;
    }
    wrapped
}

/// Phase of `a` that maximizes the objective, `π − ∠(cross)`.
///
/// When the cross term vanishes the phase is unidentifiable and `fallback`
/// (the previous iterate's phase) is returned.
pub fn phase_from_cross(cross: Complex64, fallback: f64) -> f64 {
    if cross.norm() == 0.0 {
        return wrap_phase(fallback);
    }
    wrap_phase(PI - cross.arg())
}

pub fn phase_update(
    aggregates: &MStepAggregates,
    beta: &PosteriorTable,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
    fallback: f64,
) -> f64 {
    phase_from_cross(phase_cross_term(aggregates, beta, frame, pilots, constellation, config), fallback)
}

/// Maximize `−K·log(πσ²(A²x+1)) − (V·x² − 2W·x + U)/(σ²(A²x+1))` over
/// `x ≥ 0`, where `K` is the number of observations sharing the noise
/// variance.
///
/// The stationarity condition is `A²V·x² + (2V + K·A⁴σ²)·x + K·A²σ² − A²U −
/// 2W = 0`. Its larger root is the maximizer when positive; otherwise the
/// objective decreases on `x ≥ 0` and the result is clamped to zero.
pub fn solve_magnitude(u: f64, v: f64, w: f64, amp: f64, sigma2: f64, weight: f64) -> MagnitudeUpdate {
    let a2 = amp * amp;
    let quad = a2 * v;
    let lin = 2.0 * v + weight * a2 * a2 * sigma2;
    let constant = weight * a2 * sigma2 - a2 * u - 2.0 * w;
    let root = if quad == 0.0 {
        -constant / lin
    } else {
        let disc = lin * lin - 4.0 * quad * constant;
        if disc < 0.0 {
            return MagnitudeUpdate { value: 0.0, clamped: true };
        }
        // Cancellation-free form of (−lin + √disc)/(2·quad).
        let sqrt_disc = disc.sqrt();
        if constant < 0.0 {
            -2.0 * constant / (lin + sqrt_disc)
        } else {
            (sqrt_disc - lin) / (2.0 * quad)
        }
    };
    if root > 0.0 {
        MagnitudeUpdate { value: root, clamped: false }
    } else {
        MagnitudeUpdate { value: 0.0, clamped: true }
    }
}

/// Modulus of `a` from the aggregates, using all `N + L` observations in the
/// log-determinant weight.
pub fn magnitude_update(aggregates: &MStepAggregates, config: &SystemConfig) -> MagnitudeUpdate {
    solve_magnitude(
        aggregates.u,
        aggregates.v,
        aggregates.w,
        config.amp,
        config.sigma2,
        config.observation_count() as f64,
    )
}

/// One full EM iteration from `theta`.
pub fn em_iterate(
    theta: &ThetaEstimate,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
) -> Result<EmUpdate> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("EM iterate"));
    }
    let beta = e_step(frame, constellation, theta, config);
    let aggregates = m_step_aggregates(&beta, frame, pilots, constellation, config);
    let phase = phase_from_cross(aggregates.cross, theta.a.arg());
    let magnitude = magnitude_update(&aggregates, config);
    let a = Complex64::from_polar(magnitude.value, phase);
    let b = b_given_a(a, &beta, frame, pilots, constellation, config)?;
    let next = ThetaEstimate { a, b };
    if !next.is_finite() {
        return Err(Error::NonFinite("EM update"));
    }
    Ok(EmUpdate { theta: next, clamped: magnitude.clamped })
}

/// Iteration controls for [`em_estimate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    /// Starting point; `None` uses the pilot-only LS estimate.
    pub init: Option<ThetaEstimate>,
    pub max_iters: usize,
    /// Stop early once `‖θ⁽ᵗ⁺¹⁾ − θ⁽ᵗ⁾‖ / ‖θ⁽ᵗ⁾‖` drops below this.
    pub rel_tol: Option<f64>,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { init: None, max_iters: 4, rel_tol: None }
    }
}

impl EmOptions {
    pub fn fixed(max_iters: usize) -> Self {
        Self { max_iters, ..Self::default() }
    }
}

/// Run EM and record every iterate.
pub fn em_estimate(
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
    options: &EmOptions,
) -> Result<EstimateTrajectory> {
    if options.max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    let init = match options.init {
        Some(theta) => theta,
        None => ls_estimate(frame, pilots, config)?,
    };
    let mut trajectory = EstimateTrajectory {
        iterates: Vec::with_capacity(options.max_iters + 1),
        llf: Vec::new(),
        clamped: 0,
    };
    trajectory.iterates.push(init);
    let mut current = init;
    for _ in 0..options.max_iters {
        let update = em_iterate(&current, frame, pilots, constellation, config)?;
        trajectory.clamped += usize::from(update.clamped);
        trajectory.iterates.push(update.theta);
        let step = (update.theta.a - current.a).norm_sqr() + (update.theta.b - current.b).norm_sqr();
        current = update.theta;
        if let Some(tol) = options.rel_tol {
            let scale = trajectory.iterates[trajectory.iterates.len() - 2].norm().max(f64::MIN_POSITIVE);
            if step.sqrt() / scale < tol {
                break;
            }
        }
    }
    Ok(trajectory)
}
