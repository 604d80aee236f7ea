//! Reference computations for verifying the estimators.
//!
//! Everything here evaluates likelihoods straight from their definitions
//! (residual sums, explicit marginalization, exhaustive grids) and shares no
//! algebra with the closed-form M-step in [`crate::estimators`].

use crate::error::{Error, Result};
use crate::estimators::{EstimateTrajectory, PosteriorTable, ThetaEstimate};
use crate::model::{Constellation, PilotPair, ReceivedFrame, SystemConfig};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Largest number of hidden sequences [`enumerated_llf`] will visit.
pub const MAX_ENUMERATION: usize = 4096;

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn pilot_residual(theta: &ThetaEstimate, frame: &ReceivedFrame, pilots: &PilotPair, amp: f64) -> f64 {
    frame
        .y
        .iter()
        .zip(&pilots.t1)
        .zip(&pilots.t2)
        .map(|((y, t1), t2)| (y - amp * theta.a * t1 - amp * theta.b * t2).norm_sqr())
        .sum()
}

/// Complete-data log-likelihood of `(y, z, s2)`, including `−N·log M`.
pub fn complete_llf(
    theta: &ThetaEstimate,
    frame: &ReceivedFrame,
    s2: &[Complex64],
    pilots: &PilotPair,
    config: &SystemConfig,
) -> f64 {
    let amp = config.amp;
    let var = config.effective_noise_variance(theta.a);
    let data: f64 = frame
        .z
        .iter()
        .zip(&frame.s1)
        .zip(s2)
        .map(|((z, s1), s2)| (z - amp * theta.a * s1 - amp * theta.b * s2).norm_sqr())
        .sum();
    let count = (frame.z.len() + frame.y.len()) as f64;
    -(frame.z.len() as f64) * (config.order as f64).ln()
        - count * (PI * var).ln()
        - (pilot_residual(theta, frame, pilots, amp) + data) / var
}

/// Log-likelihood of the observations with T2's symbols marginalized out.
pub fn incomplete_llf(
    theta: &ThetaEstimate,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
) -> f64 {
    let amp = config.amp;
    let var = config.effective_noise_variance(theta.a);
    let log_norm = (PI * var).ln();
    let log_m = (constellation.order() as f64).ln();
    let pilots_part = -(frame.y.len() as f64) * log_norm - pilot_residual(theta, frame, pilots, amp) / var;
    let data_part: f64 = frame
        .z
        .iter()
        .zip(&frame.s1)
        .map(|(z, s1)| {
            let residual = z - amp * theta.a * s1;
            let terms = constellation
                .points()
                .iter()
                .map(move |xi| -(residual - amp * theta.b * xi).norm_sqr() / var);
            log_sum_exp(terms) - log_m - log_norm
        })
        .sum();
    pilots_part + data_part
}

/// Incomplete-data log-likelihood by explicit enumeration of every hidden
/// sequence, `log Σ_{s2} exp(complete_llf)`.
pub fn enumerated_llf(
    theta: &ThetaEstimate,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
) -> Result<f64> {
    let order = constellation.order();
    let n = frame.z.len();
    let total = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(order)).filter(|&t| t <= MAX_ENUMERATION);
    let total = total.ok_or(Error::Degenerate("enumeration exceeds the sequence cap"))?;
    let mut s2 = vec![Complex64::new(0.0, 0.0); n];
    let mut values = Vec::with_capacity(total);
    for code in 0..total {
        let mut rest = code;
        for slot in s2.iter_mut() {
            *slot = constellation.points()[rest % order];
            rest /= order;
        }
        values.push(complete_llf(theta, frame, &s2, pilots, config));
    }
    Ok(log_sum_exp(values.iter().copied()))
}

/// Expected complete-data log-likelihood under the posteriors `beta`, with
/// the constant `−N·log M` dropped.
pub fn q_value(
    theta: &ThetaEstimate,
    beta: &PosteriorTable,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
) -> f64 {
    let amp = config.amp;
    let var = config.effective_noise_variance(theta.a);
    let mut data = 0.0;
    for ((row, z), s1) in beta.iter_rows().zip(&frame.z).zip(&frame.s1) {
        let residual = z - amp * theta.a * s1;
        for (p, xi) in row.iter().zip(constellation.points()) {
            data += p * (residual - amp * theta.b * xi).norm_sqr();
        }
    }
    let count = (frame.z.len() + frame.y.len()) as f64;
    -count * (PI * var).ln() - (pilot_residual(theta, frame, pilots, amp) + data) / var
}

/// Fill `trajectory.llf` with the incomplete-data log-likelihood of every
/// iterate.
pub fn trajectory_llf(
    trajectory: &mut EstimateTrajectory,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
) {
    trajectory.llf = trajectory
        .iterates
        .iter()
        .map(|theta| incomplete_llf(theta, frame, pilots, constellation, config))
        .collect();
}

/// Weighted second moments of the expected residual
/// `Σ wt·|w − A·a·p − A·b·q|²` over pilots (weight 1) and data hypotheses
/// (weight `β`), so the residual can be evaluated in O(1) for any `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualMoments {
    ww: f64,
    pp: f64,
    qq: f64,
    wp: Complex64,
    wq: Complex64,
    pq: Complex64,
    count: f64,
}

impl ResidualMoments {
    pub fn new(beta: &PosteriorTable, frame: &ReceivedFrame, pilots: &PilotPair, constellation: &Constellation) -> Self {
        let mut m = Self {
            ww: 0.0,
            pp: 0.0,
            qq: 0.0,
            wp: Complex64::new(0.0, 0.0),
            wq: Complex64::new(0.0, 0.0),
            pq: Complex64::new(0.0, 0.0),
            count: (frame.z.len() + frame.y.len()) as f64,
        };
        let mut add = |wt: f64, w: Complex64, p: Complex64, q: Complex64| {
            m.ww += wt * w.norm_sqr();
            m.pp += wt * p.norm_sqr();
            m.qq += wt * q.norm_sqr();
            m.wp += wt * w.conj() * p;
            m.wq += wt * w.conj() * q;
            m.pq += wt * p.conj() * q;
        };
        for ((y, t1), t2) in frame.y.iter().zip(&pilots.t1).zip(&pilots.t2) {
            add(1.0, *y, *t1, *t2);
        }
        for ((row, z), s1) in beta.iter_rows().zip(&frame.z).zip(&frame.s1) {
            for (p, xi) in row.iter().zip(constellation.points()) {
                add(*p, *z, *s1, *xi);
            }
        }
        m
    }

    pub fn residual(&self, a: Complex64, b: Complex64, amp: f64) -> f64 {
        self.ww + amp * amp * (a.norm_sqr() * self.pp + b.norm_sqr() * self.qq)
            - 2.0 * amp * ((a * self.wp).re + (b * self.wq).re)
            + 2.0 * amp * amp * (a.conj() * b * self.pq).re
    }

    /// Residual-minimizing `b` for fixed `a`.
    pub fn best_b(&self, a: Complex64, amp: f64) -> Complex64 {
        (self.wq.conj() - amp * a * self.pq.conj()) / (amp * self.qq)
    }

    pub fn q(&self, a: Complex64, b: Complex64, config: &SystemConfig) -> f64 {
        let var = config.effective_noise_variance(a);
        -self.count * (PI * var).ln() - self.residual(a, b, config.amp) / var
    }
}

/// Evenly spaced grid `lo, …, hi` with `count` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo < hi) || count < 2 {
            return Err(Error::Config(format!("grid needs lo < hi and count ≥ 2, got [{lo}, {hi}] × {count}")));
        }
        Ok(Self { lo, hi, count })
    }

    /// Degenerate one-point grid.
    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x, count: 1 }
    }

    /// `count` phases covering `(−π, π]`.
    pub fn full_circle(count: usize) -> Result<Self> {
        Self::new(-PI + 2.0 * PI / count as f64, PI, count)
    }

    pub fn spacing(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.hi - self.lo) / (self.count - 1) as f64
        }
    }

    pub fn value(&self, k: usize) -> f64 {
        if k + 1 == self.count {
            self.hi
        } else {
            self.lo + k as f64 * self.spacing()
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|k| self.value(k))
    }

    /// Grid with every cell halved; contains all points of `self`.
    pub fn refined(&self) -> Self {
        if self.count < 2 {
            return *self;
        }
        Self { count: 2 * self.count - 1, ..*self }
    }
}

/// Best grid point found by [`grid_maximize_q`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMaximum {
    pub a: Complex64,
    pub b: Complex64,
    pub q: f64,
    pub magnitude: f64,
    pub phase: f64,
}

/// Exhaustive maximization of the expected complete-data log-likelihood over
/// `a = x·e^{iφ}` on the product grid, with `b` profiled out exactly at each
/// point.
pub fn grid_maximize_q(
    beta: &PosteriorTable,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
    phase_grid: &GridSpec,
    mag_grid: &GridSpec,
) -> GridMaximum {
    let moments = ResidualMoments::new(beta, frame, pilots, constellation);
    let amp = config.amp;
    let mut best = GridMaximum {
        a: Complex64::new(0.0, 0.0),
        b: Complex64::new(0.0, 0.0),
        q: f64::NEG_INFINITY,
        magnitude: 0.0,
        phase: 0.0,
    };
    let phases: Vec<(f64, Complex64)> = phase_grid.values().map(|phi| (phi, Complex64::from_polar(1.0, phi))).collect();
    for magnitude in mag_grid.values() {
        for &(phase, unit) in &phases {
            let a = unit * magnitude;
            let b = moments.best_b(a, amp);
            let q = moments.q(a, b, config);
            if q > best.q {
                best = GridMaximum { a, b, q, magnitude, phase };
            }
        }
    }
    best
}

/// Step used by [`finite_diff_grad`] when callers have no better choice.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Central-difference gradient. Each coordinate is perturbed by
/// `step · max(1, |x_k|)`.
pub fn finite_diff_grad<F>(f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        let h = step * point[k].abs().max(1.0);
        x[k] = point[k] + h;
        let up = f(&x);
        x[k] = point[k] - h;
        let down = f(&x);
        x[k] = point[k];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `[Re a, Im a, Re b, Im b]`.
pub fn theta_coords(theta: &ThetaEstimate) -> [f64; 4] {
    [theta.a.re, theta.a.im, theta.b.re, theta.b.im]
}

pub fn theta_from_coords(x: &[f64]) -> ThetaEstimate {
    ThetaEstimate::new(Complex64::new(x[0], x[1]), Complex64::new(x[2], x[3]))
}
