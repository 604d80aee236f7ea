use proptest::prelude::*;
use twrn_em::estimators::{e_step, em_estimate, em_iterate, ls_estimate, EmOptions, ThetaEstimate};
use twrn_em::model::{trial_rng, Noise};
use twrn_em::oracle::{incomplete_llf, q_value, trajectory_llf};
use twrn_em::selfcheck::Instance;
use twrn_em::Complex64;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn likelihood_never_decreases(seed in any::<u64>(), snr in 0.0f64..30.0, idx in 0usize..3) {
        let order = [4usize, 16, 64][idx];
        let inst = Instance::at(seed, 0, snr, order, Noise::Awgn).unwrap();
        let (frame, pilots, constellation, config) = (
            &inst.realization.frame, &inst.scenario.pilots, &inst.scenario.constellation, &inst.scenario.config,
        );
        let mut traj = em_estimate(frame, pilots, constellation, config, &EmOptions::fixed(10)).unwrap();
        trajectory_llf(&mut traj, frame, pilots, constellation, config);
        prop_assert_eq!(traj.llf.len(), 11);
        for w in traj.llf.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn arbitrary_start_still_ascends(seed in any::<u64>(), ar in -2.0f64..2.0, ai in -2.0f64..2.0, br in -2.0f64..2.0, bi in -2.0f64..2.0) {
        let inst = Instance::random(seed, seed % 21).unwrap();
        let (frame, pilots, constellation, config) = (
            &inst.realization.frame, &inst.scenario.pilots, &inst.scenario.constellation, &inst.scenario.config,
        );
        let start = ThetaEstimate::new(Complex64::new(ar, ai), Complex64::new(br, bi));
        let next = em_iterate(&start, frame, pilots, constellation, config).unwrap().theta;
        let before = incomplete_llf(&start, frame, pilots, constellation, config);
        let after = incomplete_llf(&next, frame, pilots, constellation, config);
        prop_assert!(after >= before - 1e-9);
    }
}

#[test]
fn m_step_beats_random_perturbations() {
    let mut rng = trial_rng(99, 0);
    for index in 0..21 {
        let inst = Instance::random(17, index).unwrap();
        let (frame, pilots, constellation, config) = (
            &inst.realization.frame,
            &inst.scenario.pilots,
            &inst.scenario.constellation,
            &inst.scenario.config,
        );
        let theta = ls_estimate(frame, pilots, config).unwrap();
        let beta = e_step(frame, constellation, &theta, config);
        let next = em_iterate(&theta, frame, pilots, constellation, config).unwrap().theta;
        let best = q_value(&next, &beta, frame, pilots, constellation, config);
        for _ in 0..1000 {
            let scale: f64 = 10f64.powf(rng.random_range(-6.0..-1.0));
            let mut nudge = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
            let other = ThetaEstimate::new(next.a + nudge(), next.b + nudge());
            let q = q_value(&other, &beta, frame, pilots, constellation, config);
            assert!(best >= q - 1e-9, "instance {index}: {best} < {q}");
        }
    }
}
