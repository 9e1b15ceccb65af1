//! Subspace-recovery quality under noise, pinned against a Monte-Carlo
//! calibrated bound.
//!
//! `record_theta_star` (ignored) replays the calibration: 100 seeded draws
//! of a planted factor model at signal-to-noise 10 (latent scale 1.0, noise
//! scale 0.1), each fitted from 500 sample pairs in ambient dimension 64
//! with 2 nuisance and 2 planted directions. The 99th of the 100 sorted
//! worst-case principal angles is frozen into `fixtures/theta_star.json`,
//! and the regular test checks a fresh draw stays within that bound.

use std::path::PathBuf;

use nullu_core::data::{generate_factor_pairs, random_subspace, FactorModelSpec};
use nullu_core::linalg::{principal_angles, DenseMatrix};
use nullu_core::pipeline::fit_halluspace;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const D: usize = 64;
const K_HAT: usize = 2;
const K_TILDE: usize = 2;
const N_PAIRS: usize = 500;
const LATENT_SCALE: f64 = 1.0;
const NOISE_SCALE: f64 = 0.1;
const CALIBRATION_SEEDS: u64 = 100;
const FRESH_SEED: u64 = 1234;

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join("theta_star.json")
}

/// Jointly orthonormal nuisance/planted loadings plus a decoupled feature
/// seed, all derived from one generation seed.
fn planted_spec(seed: u64, noise_scale: f64) -> (FactorModelSpec, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joint = random_subspace(D, K_HAT + K_TILDE, &mut rng).unwrap();
    let basis = joint.basis();
    let b_hat = DenseMatrix::from_fn(K_HAT, D, |r, c| basis.get(c, r)).unwrap();
    let b_tilde = DenseMatrix::from_fn(K_TILDE, D, |r, c| basis.get(c, r + K_HAT)).unwrap();
    let spec = FactorModelSpec::new(b_hat, b_tilde, LATENT_SCALE, noise_scale).unwrap();
    let feature_seed: u64 = rng.random();
    (spec, feature_seed)
}

/// Worst-case principal angle (radians) between the planted and fitted
/// subspaces for one seeded draw.
fn max_recovery_angle(seed: u64, noise_scale: f64) -> f64 {
    let (spec, feature_seed) = planted_spec(seed, noise_scale);
    let features = generate_factor_pairs(&spec, N_PAIRS, feature_seed).unwrap();
    let fitted = fit_halluspace(&features, K_TILDE).unwrap();
    let truth = spec.true_subspace().unwrap();
    principal_angles(&truth, &fitted)
        .unwrap()
        .into_iter()
        .fold(0.0_f64, f64::max)
}

#[test]
fn noiseless_recovery_is_exact() {
    let angle = max_recovery_angle(FRESH_SEED, 0.0);
    assert!(angle < 1e-6, "noiseless angle {angle:.3e} exceeds 1e-6");
}

#[test]
fn noisy_recovery_stays_within_calibrated_bound() {
    let raw = std::fs::read_to_string(fixture_path()).expect("fixture present");
    let fixture: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert_eq!(fixture["ambient_dim"].as_u64(), Some(D as u64));
    assert_eq!(fixture["n_pairs"].as_u64(), Some(N_PAIRS as u64));
    let theta_star = fixture["theta_star"].as_f64().unwrap();
    assert!(theta_star.is_finite() && theta_star > 0.0);

    let angle = max_recovery_angle(FRESH_SEED, NOISE_SCALE);
    assert!(
        angle <= theta_star,
        "fresh-draw angle {angle:.6} exceeds calibrated bound {theta_star:.6}"
    );
}

#[test]
#[ignore = "regenerates the calibrated recovery bound"]
fn record_theta_star() {
    let mut angles: Vec<f64> = (0..CALIBRATION_SEEDS)
        .map(|seed| max_recovery_angle(seed, NOISE_SCALE))
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let theta_star = angles[98];
    let value = serde_json::json!({
        "ambient_dim": D,
        "k_hat": K_HAT,
        "k_tilde": K_TILDE,
        "n_pairs": N_PAIRS,
        "latent_scale": LATENT_SCALE,
        "noise_scale": NOISE_SCALE,
        "calibration_seeds": CALIBRATION_SEEDS,
        "quantile_index": 98,
        "theta_star": theta_star,
        "median_angle": angles[49],
    });
    let rendered = serde_json::to_string_pretty(&value).unwrap();
    std::fs::create_dir_all(fixture_path().parent().unwrap()).unwrap();
    std::fs::write(fixture_path(), rendered).unwrap();
}
