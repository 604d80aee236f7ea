use std::path::Path;
use std::process::Command;
use twrn_em::cli::{cmd_selfcheck, ITERS_HEADER, SNR_HEADER};
use twrn_em::estimators::{phase_cross_term, wrap_phase, MStepAggregates, PosteriorTable};
use twrn_em::model::{inner, norm_sqr, Constellation, PilotPair, ReceivedFrame, SystemConfig};
use twrn_em::selfcheck::{check_b_stationarity, check_em_ascent, check_mstep_grid, Rules};
use twrn_em::{Complex64, Result};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twrn-em"))
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn mse_vs_snr_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("snr.csv");
    let status = bin().args(["mse-vs-snr", "--trials", "10", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    let table = rows(&out);
    assert_eq!(table[0].join(","), SNR_HEADER);
    assert_eq!(table.len(), 1 + 7 * 3);
    let manifest = std::fs::read_to_string(dir.path().join("snr.manifest.toml")).unwrap();
    let manifest = twrn_em::cli::RunManifest::from_text(&manifest).unwrap();
    assert_eq!(manifest.spec.trials, 10);
    assert_eq!(manifest.csv_path, out);

    // EM beats LS for QPSK at 15 dB.
    let row = table.iter().find(|r| r[0] == "1.50000000000e1" && r[1] == "4").unwrap();
    let (em, ls): (f64, f64) = (row[4].parse().unwrap(), row[5].parse().unwrap());
    assert!(em < ls, "em {em} ls {ls}");
}

#[test]
fn mse_vs_iters_grid_and_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let iters = dir.path().join("iters.csv");
    let status = bin()
        .args(["mse-vs-iters", "--trials", "10", "--em-iters", "12", "--out"])
        .arg(&iters)
        .status()
        .unwrap();
    assert!(status.success());
    let table = rows(&iters);
    assert_eq!(table[0].join(","), ITERS_HEADER);
    assert_eq!(table.len(), 1 + 13 * 3 * 2);

    // Iteration 0 is the LS initializer: compare with the LS column of an
    // SNR sweep over the same seed and operating points.
    let snr = dir.path().join("snr.csv");
    let status = bin()
        .args(["mse-vs-snr", "--trials", "10", "--snr", "15", "--n-data", "32,100", "--out"])
        .arg(&snr)
        .status()
        .unwrap();
    assert!(status.success());
    let snr_rows = rows(&snr);
    for r in table.iter().skip(1).filter(|r| r[0] == "0") {
        let ls = snr_rows.iter().find(|s| s[1] == r[1] && s[2] == r[2]).unwrap();
        assert_eq!(r[4], ls[5]);
    }
}

#[test]
fn config_file_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "trials = 3\nsnr = [20]\nmod_orders = [16]\n").unwrap();
    let out = dir.path().join("x.csv");
    let status = bin().args(["mse-vs-snr", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let table = rows(&out);
    assert_eq!(table.len(), 2);
    assert_eq!(table[1][6], "3");

    let output = bin().args(["mse-vs-snr", "--mod-orders", "8", "--out"]).arg(&out).output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("unsupported modulation order 8"));

    let output = bin()
        .args(["mse-vs-snr", "--trials", "2", "--out"])
        .arg(dir.path().join("missing/dir/x.csv"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("cannot write"));
}

#[test]
fn selfcheck_passes_on_release_rules() {
    let output = bin().arg("selfcheck").output().unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(output.status.success(), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("[PASS]")).count(), 5);
}

fn flipped_phase(
    agg: &MStepAggregates,
    beta: &PosteriorTable,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
    _fallback: f64,
) -> f64 {
    let cross = phase_cross_term(agg, beta, frame, pilots, constellation, config);
    wrap_phase(std::f64::consts::PI + cross.arg())
}

/// b update with the unweighted posterior sum in the denominator.
fn unweighted_b(
    a: Complex64,
    beta: &PosteriorTable,
    frame: &ReceivedFrame,
    pilots: &PilotPair,
    constellation: &Constellation,
    config: &SystemConfig,
) -> Result<Complex64> {
    let amp = config.amp;
    let mut numerator = inner(&pilots.t2, &frame.y) - amp * a * inner(&pilots.t2, &pilots.t1);
    let mut mass = 0.0;
    for ((row, z), s1) in beta.iter_rows().zip(&frame.z).zip(&frame.s1) {
        for (p, xi) in row.iter().zip(constellation.points()) {
            numerator += p * xi.conj() * (z - amp * a * s1);
            mass += p;
        }
    }
    Ok(numerator / (amp * mass + amp * norm_sqr(&pilots.t2)))
}

#[test]
fn phase_sign_flip_is_caught() {
    let mutant = Rules { phase_update: flipped_phase, ..Rules::default() };
    assert!(!check_mstep_grid(&mutant, 1, 10, 200).unwrap().passed);
    assert!(check_mstep_grid(&Rules::default(), 1, 10, 200).unwrap().passed);
    assert!(!check_em_ascent(&mutant, 1, 20, 4).unwrap().passed);
}

#[test]
fn unweighted_b_denominator_is_caught() {
    let mutant = Rules { b_given_a: unweighted_b, ..Rules::default() };
    let outcome = check_b_stationarity(&mutant, 1, 21).unwrap();
    assert!(!outcome.passed, "{outcome}");
    assert!(check_b_stationarity(&Rules::default(), 1, 21).unwrap().passed);
}

#[test]
fn selfcheck_reports_mutant_failure() {
    let mutant = Rules { b_given_a: unweighted_b, ..Rules::default() };
    let (outcomes, passed) = cmd_selfcheck(&mutant, 1).unwrap();
    assert!(!passed);
    assert!(outcomes.iter().any(|o| o.name == "b-update stationarity" && !o.passed));
}
