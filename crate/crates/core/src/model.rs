//! System model: constellations, pilots, channel draws and the two-phase
//! AF relay transmission as observed at terminal T1.

use crate::error::{Error, Result};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::FRAC_1_SQRT_2;

/// Modulation orders the square-QAM builder supports.
pub const SUPPORTED_ORDERS: [usize; 3] = [4, 16, 64];

/// Scenario scalars plus the derived relay amplification factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemConfig {
    /// Pilot block length `L`.
    pub pilot_len: usize,
    /// Data block length `N`.
    pub data_len: usize,
    /// Modulation order `M` of the data symbols.
    pub order: usize,
    pub p1: f64,
    pub p2: f64,
    pub pr: f64,
    /// Noise variance per complex entry.
    pub sigma2: f64,
    /// Amplification factor `sqrt(Pr / (P1 + P2 + sigma2))`.
    pub amp: f64,
}

impl SystemConfig {
    pub fn new(
        pilot_len: usize,
        data_len: usize,
        order: usize,
        p1: f64,
        p2: f64,
        pr: f64,
        sigma2: f64,
    ) -> Result<Self> {
        if pilot_len == 0 {
            return Err(Error::Config("pilot length L must be positive".into()));
        }
        if data_len == 0 {
            return Err(Error::Config("data length N must be positive".into()));
        }
        if !SUPPORTED_ORDERS.contains(&order) {
            return Err(Error::UnsupportedOrder(order));
        }
        for (name, value) in [("P1", p1), ("P2", p2), ("Pr", pr), ("sigma2", sigma2)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and positive, got {value}")));
            }
        }
        Ok(Self {
            pilot_len,
            data_len,
            order,
            p1,
            p2,
            pr,
            sigma2,
            amp: amplification_factor(p1, p2, pr, sigma2),
        })
    }

    /// Noise variance of every entry of `y` and `z`: `σ²(A²|a| + 1)`.
    pub fn effective_noise_variance(&self, a: Complex64) -> f64 {
        self.sigma2 * (self.amp * self.amp * a.norm() + 1.0)
    }

    /// Number of observations sharing the effective noise variance, `N + L`.
    pub fn observation_count(&self) -> usize {
        self.data_len + self.pilot_len
    }
}

pub fn amplification_factor(p1: f64, p2: f64, pr: f64, sigma2: f64) -> f64 {
    (pr / (p1 + p2 + sigma2)).sqrt()
}

/// Symbol alphabet with the average power it was normalized to.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<Complex64>,
    avg_power: f64,
}

impl Constellation {
    /// Square QAM on odd integer levels, scaled to `avg_power`.
    pub fn qam(order: usize, avg_power: f64) -> Result<Self> {
        if !SUPPORTED_ORDERS.contains(&order) {
            return Err(Error::UnsupportedOrder(order));
        }
        if !(avg_power.is_finite() && avg_power > 0.0) {
            return Err(Error::Config(format!("constellation power must be positive, got {avg_power}")));
        }
        let side = (order as f64).sqrt().round() as usize;
        let levels: Vec<f64> = (0..side).map(|k| (2 * k) as f64 - (side - 1) as f64).collect();
        // Mean power of the unscaled grid: two axes, each averaging level².
        let raw_power = 2.0 * levels.iter().map(|l| l * l).sum::<f64>() / side as f64;
        let scale = (avg_power / raw_power).sqrt();
        let points = levels
            .iter()
            .flat_map(|&re| levels.iter().map(move |&im| Complex64::new(re * scale, im * scale)))
            .collect();
        Ok(Self { points, avg_power })
    }

    /// Arbitrary alphabet; the stored power is the empirical mean `|ξ|²`.
    pub fn from_points(points: Vec<Complex64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Degenerate("empty constellation"));
        }
        let avg_power = points.iter().map(|p| p.norm_sqr()).sum::<f64>() / points.len() as f64;
        Ok(Self { points, avg_power })
    }

    /// Same geometry rescaled to a new average power.
    pub fn rescaled(&self, avg_power: f64) -> Self {
        let scale = (avg_power / self.avg_power).sqrt();
        Self {
            points: self.points.iter().map(|p| p * scale).collect(),
            avg_power,
        }
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn avg_power(&self) -> f64 {
        self.avg_power
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Complex64 {
        self.points[rng.random_range(0..self.points.len())]
    }
}

/// Pilot sequences of T1 and T2.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotPair {
    pub t1: Vec<Complex64>,
    pub t2: Vec<Complex64>,
}

impl PilotPair {
    /// QPSK pilots built from two Hadamard rows: T1 sends a constant
    /// sequence, T2 an alternating-sign one, so `t1ᴴt2 = 0` for even `len`.
    pub fn orthogonal(len: usize, p1: f64, p2: f64) -> Result<Self> {
        if len == 0 || len % 2 != 0 {
            return Err(Error::OddPilotLength(len));
        }
        let qpsk = Complex64::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2);
        let t1 = vec![qpsk * p1.sqrt(); len];
        let t2 = (0..len)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                qpsk * (sign * p2.sqrt())
            })
            .collect();
        Ok(Self { t1, t2 })
    }

    pub fn len(&self) -> usize {
        self.t1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t1.is_empty()
    }
}

/// `xᴴy` for equal-length complex vectors.
pub fn inner(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).map(|(u, v)| u.conj() * v).sum()
}

pub fn norm_sqr(x: &[Complex64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum()
}

/// Terminal-relay channels of one realization and the cascaded coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelState {
    pub h: Complex64,
    pub g: Complex64,
    pub a: Complex64,
    pub b: Complex64,
}

impl ChannelState {
    pub fn new(h: Complex64, g: Complex64) -> Self {
        Self { h, g, a: h * h, b: h * g }
    }

    /// Independent unit-variance circularly-symmetric Gaussian `h` and `g`.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let h = complex_gaussian(rng, 1.0);
        let g = complex_gaussian(rng, 1.0);
        Self::new(h, g)
    }
}

/// Circularly-symmetric complex Gaussian sample with `E|x|² = variance`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let std = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * std, im * std)
}

/// Whether the simulator adds thermal noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Noise {
    #[default]
    Awgn,
    /// Noise vectors are drawn (keeping the random stream aligned) but
    /// scaled to zero.
    Silent,
}

/// Everything T1 observes in one transmission period, plus the hidden
/// partner data kept for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub y: Vec<Complex64>,
    pub z: Vec<Complex64>,
    pub s1: Vec<Complex64>,
    pub s2_true: Vec<Complex64>,
}

/// Simulate both relay phases for one realization.
///
/// `constellation` is the partner's alphabet (power `P2`); T1's own data uses
/// the same geometry rescaled to `P1`. Draw order is pilot noise, data
/// symbols, then data noise, so for a fixed stream the channel and the pilot
/// observations do not depend on the modulation order.
pub fn simulate_frame<R: Rng + ?Sized>(
    config: &SystemConfig,
    constellation: &Constellation,
    pilots: &PilotPair,
    channel: &ChannelState,
    noise: Noise,
    rng: &mut R,
) -> ReceivedFrame {
    let amp = config.amp;
    let variance = match noise {
        Noise::Awgn => config.sigma2,
        Noise::Silent => 0.0,
    };
    let own = constellation.rescaled(config.p1);
    let relay_gain = amp * channel.h;

    let received = |x1: Complex64, x2: Complex64, rng: &mut R| {
        let at_relay = complex_gaussian(rng, 1.0);
        let at_terminal = complex_gaussian(rng, 1.0);
        let scale = variance.sqrt();
        amp * channel.a * x1 + amp * channel.b * x2 + (relay_gain * at_relay + at_terminal) * scale
    };

    let y = pilots
        .t1
        .iter()
        .zip(&pilots.t2)
        .map(|(&t1, &t2)| received(t1, t2, rng))
        .collect();
    let s1: Vec<Complex64> = (0..config.data_len).map(|_| own.draw(rng)).collect();
    let s2_true: Vec<Complex64> = (0..config.data_len).map(|_| constellation.draw(rng)).collect();
    let z = s1.iter().zip(&s2_true).map(|(&x1, &x2)| received(x1, x2, rng)).collect();

    ReceivedFrame { y, z, s1, s2_true }
}

/// Random stream for one trial; a pure function of `(seed, trial)`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Fixed scenario pieces shared by every realization of one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: SystemConfig,
    /// Partner (T2) alphabet at power `P2`.
    pub constellation: Constellation,
    pub pilots: PilotPair,
}

/// One channel draw and the frame it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub channel: ChannelState,
    pub frame: ReceivedFrame,
}

impl Scenario {
    pub fn new(config: SystemConfig) -> Result<Self> {
        let constellation = Constellation::qam(config.order, config.p2)?;
        let pilots = PilotPair::orthogonal(config.pilot_len, config.p1, config.p2)?;
        Ok(Self { config, constellation, pilots })
    }

    pub fn realize<R: Rng + ?Sized>(&self, noise: Noise, rng: &mut R) -> Realization {
        let channel = ChannelState::draw(rng);
        let frame = simulate_frame(&self.config, &self.constellation, &self.pilots, &channel, noise, rng);
        Realization { channel, frame }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(x: f64, y: f64, tol: f64) -> bool {
        (x - y).abs() <= tol
    }

    #[test]
    fn amplification_factor_examples() {
        let cfg = SystemConfig::new(8, 32, 4, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(close(cfg.amp, 1.0 / 3f64.sqrt(), 1e-15));
        assert!(close(cfg.amp, 0.577350, 1e-6));

        let cfg = SystemConfig::new(8, 32, 4, 1.0, 1.0, 1.0, 1e-15).unwrap();
        assert!(close(cfg.amp, FRAC_1_SQRT_2, 1e-12));

        let cfg = SystemConfig::new(8, 32, 16, 2.0, 2.0, 4.0, 0.5).unwrap();
        assert!(close(cfg.amp, (4.0f64 / 4.5).sqrt(), 1e-15));
        assert!(close(cfg.amp, 0.942809, 1e-6));
        assert_eq!(cfg.amp, amplification_factor(cfg.p1, cfg.p2, cfg.pr, cfg.sigma2));
    }

    #[test]
    fn config_rejects_bad_inputs() {
        assert_eq!(
            SystemConfig::new(8, 32, 8, 1.0, 1.0, 1.0, 1.0),
            Err(Error::UnsupportedOrder(8))
        );
        assert!(matches!(SystemConfig::new(8, 32, 4, 0.0, 1.0, 1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(SystemConfig::new(8, 32, 4, 1.0, 1.0, 1.0, -1.0), Err(Error::Config(_))));
        assert!(matches!(SystemConfig::new(0, 32, 4, 1.0, 1.0, 1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(SystemConfig::new(8, 0, 4, 1.0, 1.0, 1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(SystemConfig::new(8, 32, 4, 1.0, f64::NAN, 1.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn qpsk_points() {
        let c = Constellation::qam(4, 1.0).unwrap();
        assert_eq!(c.order(), 4);
        for p in c.points() {
            assert!(close(p.re.abs(), FRAC_1_SQRT_2, 1e-15));
            assert!(close(p.im.abs(), FRAC_1_SQRT_2, 1e-15));
            assert!(close(p.norm(), 1.0, 1e-15));
        }
    }

    #[test]
    fn qam16_and_qam64_scaling() {
        let c = Constellation::qam(16, 1.0).unwrap();
        let unit = 1.0 / 10f64.sqrt();
        for p in c.points() {
            let (re, im) = (p.re / unit, p.im / unit);
            for v in [re, im] {
                let r = v.round();
                assert!(close(v, r, 1e-12) && [1.0, 3.0].contains(&r.abs()));
            }
        }

        let c = Constellation::qam(64, 2.0).unwrap();
        let unit = (2.0f64 / 42.0).sqrt();
        let mut seen = std::collections::BTreeSet::new();
        for p in c.points() {
            let r = (p.re / unit).round();
            assert!(close(p.re / unit, r, 1e-12));
            seen.insert(r as i64);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![-7, -5, -3, -1, 1, 3, 5, 7]);
        assert!(matches!(Constellation::qam(32, 1.0), Err(Error::UnsupportedOrder(32))));
    }

    #[test]
    fn pilot_examples() {
        let p = PilotPair::orthogonal(2, 1.0, 1.0).unwrap();
        assert!(inner(&p.t1, &p.t2).norm() < 1e-15);
        assert!(close(norm_sqr(&p.t1), 2.0, 1e-14));

        let p = PilotPair::orthogonal(8, 1.0, 1.0).unwrap();
        assert!(close(norm_sqr(&p.t1), 8.0, 1e-13));
        assert!(close(norm_sqr(&p.t2), 8.0, 1e-13));
        assert!(inner(&p.t1, &p.t2).norm() < 1e-15);

        let p = PilotPair::orthogonal(8, 2.0, 1.0).unwrap();
        assert!(close(norm_sqr(&p.t1), 16.0, 1e-13));
        assert!(close(norm_sqr(&p.t2), 8.0, 1e-13));

        assert_eq!(PilotPair::orthogonal(7, 1.0, 1.0), Err(Error::OddPilotLength(7)));
    }

    #[test]
    fn cascaded_coefficients() {
        let ch = ChannelState::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0));
        assert_eq!(ch.a, Complex64::new(1.0, 0.0));
        assert_eq!(ch.b, Complex64::new(0.0, 1.0));

        let ch = ChannelState::new(Complex64::i(), Complex64::new(0.3, 0.0));
        assert_eq!(ch.a, Complex64::new(-1.0, 0.0));
        assert_eq!(ch.a.norm(), ch.h.norm_sqr());
    }

    #[test]
    fn channel_power_is_unit() {
        let mut rng = trial_rng(7, 0);
        let draws = 100_000;
        let mean: f64 = (0..draws).map(|_| ChannelState::draw(&mut rng).h.norm_sqr()).sum::<f64>() / draws as f64;
        assert!((0.98..=1.02).contains(&mean), "mean |h|² = {mean}");
    }

    #[test]
    fn effective_noise_variance_examples() {
        let cfg = SystemConfig::new(8, 32, 4, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(cfg.effective_noise_variance(Complex64::new(0.0, 0.0)), cfg.sigma2);

        let unit = SystemConfig { amp: 1.0, sigma2: 1.0, ..cfg };
        assert!(close(unit.effective_noise_variance(Complex64::new(1.0, 0.0)), 2.0, 1e-15));

        let half = SystemConfig { amp: 0.5, sigma2: 2.0, ..cfg };
        assert!(close(half.effective_noise_variance(Complex64::new(-4.0, 0.0)), 4.0, 1e-15));
    }

    #[test]
    fn silent_frames_match_noiseless_model() {
        let cfg = SystemConfig::new(8, 32, 16, 1.0, 1.0, 1.0, 0.3).unwrap();
        let scenario = Scenario::new(cfg).unwrap();
        let mut rng = trial_rng(3, 11);
        let r = scenario.realize(Noise::Silent, &mut rng);
        let (a, b, amp) = (r.channel.a, r.channel.b, cfg.amp);
        for ((y, t1), t2) in r.frame.y.iter().zip(&scenario.pilots.t1).zip(&scenario.pilots.t2) {
            assert!((*y - amp * a * t1 - amp * b * t2).norm() < 1e-15 * (1.0 + y.norm()));
        }
        for ((z, s1), s2) in r.frame.z.iter().zip(&r.frame.s1).zip(&r.frame.s2_true) {
            assert!((*z - amp * a * s1 - amp * b * s2).norm() < 1e-15 * (1.0 + z.norm()));
        }
        // Bit-level reproducibility for a fixed stream.
        assert_eq!(scenario.realize(Noise::Silent, &mut trial_rng(3, 11)), r);

        // Same stream, noise switched on: identical symbols, different observations.
        let mut rng = trial_rng(3, 11);
        let noisy = scenario.realize(Noise::Awgn, &mut rng);
        assert_eq!(noisy.channel, r.channel);
        assert_eq!(noisy.frame.s1, r.frame.s1);
        assert_eq!(noisy.frame.s2_true, r.frame.s2_true);
        assert_ne!(noisy.frame.y, r.frame.y);
    }

    #[test]
    fn data_symbols_use_terminal_powers() {
        let cfg = SystemConfig::new(8, 4000, 64, 2.0, 0.5, 1.0, 0.1).unwrap();
        let scenario = Scenario::new(cfg).unwrap();
        let r = scenario.realize(Noise::Awgn, &mut trial_rng(5, 0));
        let n = cfg.data_len as f64;
        let own = norm_sqr(&r.frame.s1) / n;
        let partner = norm_sqr(&r.frame.s2_true) / n;
        assert!((own - 2.0).abs() < 0.1, "{own}");
        assert!((partner - 0.5).abs() < 0.025, "{partner}");
        let own_alphabet = scenario.constellation.rescaled(2.0);
        assert!(r.frame.s1.iter().all(|s| own_alphabet.points().contains(s)));
        assert!(r.frame.s2_true.iter().all(|s| scenario.constellation.points().contains(s)));
    }

    #[test]
    fn pilot_noise_variance_matches_effective_variance() {
        let cfg = SystemConfig::new(2, 1, 4, 1.0, 1.0, 1.0, 0.5).unwrap();
        let scenario = Scenario::new(cfg).unwrap();
        let channel = ChannelState::new(Complex64::new(0.8, -0.6), Complex64::new(0.2, 0.9));
        let expected = cfg.effective_noise_variance(channel.a);
        let mut rng = trial_rng(9, 0);
        let frames = 50_000;
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..frames {
            let f = simulate_frame(&cfg, &scenario.constellation, &scenario.pilots, &channel, Noise::Awgn, &mut rng);
            for ((y, t1), t2) in f.y.iter().zip(&scenario.pilots.t1).zip(&scenario.pilots.t2) {
                acc += (y - cfg.amp * channel.a * t1 - cfg.amp * channel.b * t2).norm_sqr();
                count += 1;
            }
        }
        let sample = acc / count as f64;
        assert!((sample / expected - 1.0).abs() < 0.02, "sample {sample} expected {expected}");
    }

    proptest! {
        #[test]
        fn pilots_orthogonal_for_every_even_length(half in 1usize..=512, p1 in 0.01f64..100.0, p2 in 0.01f64..100.0) {
            let len = 2 * half;
            let p = PilotPair::orthogonal(len, p1, p2).unwrap();
            let l = len as f64;
            prop_assert!((norm_sqr(&p.t1) / (l * p1) - 1.0).abs() < 1e-12);
            prop_assert!((norm_sqr(&p.t2) / (l * p2) - 1.0).abs() < 1e-12);
            prop_assert!(inner(&p.t1, &p.t2).norm() < 1e-10 * l * (p1 * p2).sqrt());
            let qpsk = Constellation::qam(4, 1.0).unwrap();
            for (t, pw) in p.t1.iter().map(|t| (t, p1)).chain(p.t2.iter().map(|t| (t, p2))) {
                let unit = t / pw.sqrt();
                prop_assert!(qpsk.points().iter().any(|q| (q - unit).norm() < 1e-12));
            }
        }

        #[test]
        fn constellation_normalized(idx in 0usize..3, power in 1e-3f64..1e3) {
            let c = Constellation::qam(SUPPORTED_ORDERS[idx], power).unwrap();
            let mean = c.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / c.order() as f64;
            prop_assert!((mean / power - 1.0).abs() < 1e-12);
            let sum: Complex64 = c.points().iter().sum();
            prop_assert!(sum.norm() < 1e-12 * power.sqrt() * c.order() as f64);
            for p in c.points() {
                prop_assert!(c.points().iter().any(|q| (q + p).norm() < 1e-12 * power.sqrt()));
            }
        }
    }
}
