//! Self-check suite: fast, deterministic spot checks of the crate's core
//! invariants, runnable from the CLI (`nullu verify`) or embedded in other
//! tooling.

use std::collections::BTreeSet;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::{
    decode_direction, dpo_gradient, dpo_loss, logistic_prob, projected_components, DpoConfig,
    DpoPair,
};
use crate::data::container::{Blob, Container};
use crate::data::factor::{generate_factor_pairs, random_subspace, FactorModelSpec};
use crate::error::Result;
use crate::linalg::{
    build_projector, principal_angles, svd, top_k_subspace, DenseMatrix, Subspace,
};
use crate::pipeline::{difference_matrix, fit_halluspace};
use crate::toymodel::{ModelDims, TokenSequence, ToyModel};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

fn run_check(name: &str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match body() {
        Ok((passed, detail)) => CheckResult::new(name, passed, detail),
        Err(e) => CheckResult::new(name, false, format!("errored: {e}")),
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<DenseMatrix> {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Validates that a matrix is a well-formed orthogonal projector:
/// square, symmetric, idempotent, with singular values near zero or one.
pub fn check_projector(p: &DenseMatrix) -> CheckResult {
    run_check("projector_spectrum", || {
        if p.rows() != p.cols() {
            return Ok((false, format!("not square: {}x{}", p.rows(), p.cols())));
        }
        let sym = p.max_abs_diff(&p.transpose())?;
        let idem = p.matmul(p)?.max_abs_diff(p)?;
        let spectrum = svd(p)?.sigma;
        let spectral_dev = spectrum
            .iter()
            .map(|s| (s - 1.0).abs().min(s.abs()))
            .fold(0.0_f64, f64::max);
        let passed = sym <= 1e-10 && idem <= 1e-10 && spectral_dev <= 1e-8;
        Ok((
            passed,
            format!("symmetry {sym:.2e}, idempotence {idem:.2e}, spectrum deviation {spectral_dev:.2e}"),
        ))
    })
}

/// Loads a container and reports its integrity (checksum, format, and a
/// canonical re-serialization roundtrip).
pub fn check_container_file(path: &Path) -> CheckResult {
    run_check("container_integrity", || {
        let c = Container::load(path)?;
        let again = Container::from_bytes(&c.to_bytes())?;
        let stable = again == c;
        Ok((
            stable,
            format!("{} entries, canonical roundtrip {}", c.len(), if stable { "stable" } else { "unstable" }),
        ))
    })
}

/// Runs the full standard suite with deterministic inputs derived from
/// `seed`. Every check is independent; all results are returned.
pub fn run_standard_suite(seed: u64) -> Vec<CheckResult> {
    let mut results = Vec::new();

    results.push(run_check("nullspace_annihilation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub = random_subspace(24, 3, &mut rng)?;
        let p = build_projector(&sub)?;
        let vtp = sub.basis().transpose().matmul(&p)?.max_abs();
        let w = gaussian_matrix(&mut rng, 24, 10)?;
        let edited = p.matmul(&w)?;
        let vtw = sub.basis().transpose().matmul(&edited)?.max_abs();
        Ok((
            vtp <= 1e-10 && vtw <= 1e-10,
            format!("|V^T P| {vtp:.2e}, |V^T P W| {vtw:.2e}"),
        ))
    }));

    results.push({
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let p = gaussian_matrix(&mut rng, 5, 18)
            .and_then(|raw| top_k_subspace(&svd(&raw)?, 4))
            .and_then(|sub| build_projector(&sub));
        match p {
            Ok(p) => check_projector(&p),
            Err(e) => CheckResult::new("projector_spectrum", false, format!("errored: {e}")),
        }
    });

    results.push(run_check("eckart_young_tail", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let a = gaussian_matrix(&mut rng, 20, 12)?;
        let d = svd(&a)?;
        let mut worst = 0.0_f64;
        for k in 1..=d.len() {
            let mut approx = DenseMatrix::zeros(20, 12)?;
            for c in 0..k {
                for i in 0..20 {
                    for j in 0..12 {
                        let v = approx.get(i, j) + d.sigma[c] * d.u.get(i, c) * d.vt.get(c, j);
                        approx.set(i, j, v);
                    }
                }
            }
            let err = a.sub(&approx)?.frobenius_norm();
            let tail: f64 = d.sigma[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
            worst = worst.max((err - tail).abs() / a.frobenius_norm());
        }
        Ok((worst <= 1e-8, format!("worst relative tail gap {worst:.2e}")))
    }));

    results.push(run_check("svd_determinism", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        let a = gaussian_matrix(&mut rng, 16, 9)?;
        let d1 = svd(&a)?;
        let d2 = svd(&a)?;
        let same = d1.u.data() == d2.u.data() && d1.sigma == d2.sigma && d1.vt.data() == d2.vt.data();
        Ok((same, "two decompositions bitwise equal".into()))
    }));

    results.push(run_check("factor_difference_consistency", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
        let b_hat = gaussian_matrix(&mut rng, 2, 14)?;
        let b_tilde = gaussian_matrix(&mut rng, 3, 14)?;
        let spec = FactorModelSpec::new(b_hat, b_tilde.clone(), 1.0, 0.0)?;
        let fs = generate_factor_pairs(&spec, 25, seed.wrapping_add(5))?;
        let truth = spec.true_subspace()?;
        let p = build_projector(&truth)?;
        let diff = difference_matrix(&fs)?;
        let residual = diff.matmul(&p)?.max_abs();
        let scale = diff.max_abs().max(1.0);
        Ok((
            residual <= 1e-10 * scale,
            format!("null-component residual {residual:.2e} at scale {scale:.2e}"),
        ))
    }));

    results.push(run_check("noiseless_recovery", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(6));
        let b_hat = gaussian_matrix(&mut rng, 2, 16)?;
        let b_tilde = gaussian_matrix(&mut rng, 2, 16)?;
        let spec = FactorModelSpec::new(b_hat, b_tilde, 1.0, 0.0)?;
        let fs = generate_factor_pairs(&spec, 30, seed.wrapping_add(7))?;
        let fitted = fit_halluspace(&fs, 2)?;
        let angles = principal_angles(&spec.true_subspace()?, &fitted)?;
        let worst = angles.last().copied().unwrap_or(0.0);
        Ok((worst <= 1e-8, format!("largest principal angle {worst:.2e} rad")))
    }));

    results.push(run_check("capture_noninterference", || {
        let model = ToyModel::init(
            ModelDims {
                vocab_size: 20,
                hidden_dim: 10,
                mlp_dim: 14,
                num_layers: 3,
            },
            seed.wrapping_add(8),
        )?;
        let seq = TokenSequence::new(vec![1, 7, 3, 7])?;
        let plain = model.forward(&seq, &[])?;
        let captured = model.forward(&seq, &[0, 1, 2])?;
        Ok((
            plain.logits.data() == captured.logits.data(),
            "logits bitwise equal with and without captures".into(),
        ))
    }));

    results.push(run_check("edit_single_matrix", || {
        let model = ToyModel::init(
            ModelDims {
                vocab_size: 20,
                hidden_dim: 10,
                mlp_dim: 14,
                num_layers: 3,
            },
            seed.wrapping_add(9),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(10));
        let sub = random_subspace(10, 2, &mut rng)?;
        let edited = model.edit_layer(1, &sub)?;
        let untouched = edited.embed() == model.embed()
            && edited.unembed() == model.unembed()
            && edited.layer(0)? == model.layer(0)?
            && edited.layer(2)? == model.layer(2)?
            && edited.layer(1)?.w2 == model.layer(1)?.w2;
        let annihilated = sub
            .basis()
            .transpose()
            .matmul(&edited.layer(1)?.w1)?
            .max_abs();
        Ok((
            untouched && annihilated <= 1e-12,
            format!("other weights bitwise intact, |V^T W1_ed| {annihilated:.2e}"),
        ))
    }));

    results.push(run_check("one_layer_equivalence", || {
        let model = ToyModel::init(
            ModelDims {
                vocab_size: 24,
                hidden_dim: 12,
                mlp_dim: 16,
                num_layers: 4,
            },
            seed.wrapping_add(11),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(12));
        let sub = random_subspace(12, 3, &mut rng)?;
        let layer = 2usize;
        let edited = model.edit_layer(layer, &sub)?;
        let seq = TokenSequence::new(vec![3, 11, 0, 19, 5])?;
        let direct = edited.forward(&seq, &[])?.logits;
        let substituted = forward_with_projected_input(&model, &seq, layer, &sub)?;
        let gap = direct.max_abs_diff(&substituted)?;
        Ok((gap <= 1e-12, format!("max |logit gap| {gap:.2e}")))
    }));

    results.push(run_check("dpo_split_identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(13));
        let unembed = gaussian_matrix(&mut rng, 6, 5)?;
        let cfg = DpoConfig::new(unembed, 0.3)?;
        let pairs: Vec<DpoPair> = (0..8)
            .map(|_| DpoPair {
                x_plus: (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                x_minus: (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                y_plus: rng.random_range(0..6),
                y_minus: rng.random_range(0..6),
            })
            .collect();
        let g = dpo_gradient(&pairs, &cfg)?;
        let gap = g
            .total
            .max_abs_diff(&g.feature_term.add(&g.output_term)?)?;
        let scale = g.total.max_abs().max(1.0);
        Ok((
            gap <= 1e-12 * scale,
            format!("identity gap {gap:.2e} at scale {scale:.2e}"),
        ))
    }));

    results.push(run_check("loss_reference_value", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(14));
        let unembed = gaussian_matrix(&mut rng, 5, 4)?;
        let cfg = DpoConfig::new(unembed, 0.7)?;
        let pairs: Vec<DpoPair> = (0..5)
            .map(|_| DpoPair {
                x_plus: (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                x_minus: (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                y_plus: rng.random_range(0..5),
                y_minus: rng.random_range(0..5),
            })
            .collect();
        let w = gaussian_matrix(&mut rng, 4, 3)?;
        let loss = dpo_loss(&pairs, &w, &w, &cfg)?;
        Ok((
            loss == std::f64::consts::LN_2,
            format!("loss at reference {loss:.17} vs ln 2"),
        ))
    }));

    results.push(run_check("probability_normalization", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(15));
        let unembed = gaussian_matrix(&mut rng, 9, 5)?;
        let w = gaussian_matrix(&mut rng, 5, 4)?;
        let mut worst = 0.0_f64;
        for _ in 0..5 {
            let x: Vec<f64> = (0..4)
                .map(|_| 50.0 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let probs = logistic_prob(&unembed, &w, &x)?;
            worst = worst.max((probs.iter().sum::<f64>() - 1.0).abs());
        }
        Ok((worst <= 1e-12, format!("worst |sum - 1| {worst:.2e}")))
    }));

    results.push(run_check("decode_tie_rule", || {
        let unembed = DenseMatrix::new(3, 2, vec![1.0, 0.0, 1.0, 5.0, 0.5, 0.0])?;
        let order = decode_direction(&unembed, &[1.0, 0.0], 3)?;
        Ok((order == vec![0, 1, 2], format!("order {order:?}")))
    }));

    results.push(run_check("projection_bound", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(16));
        let sub = random_subspace(11, 3, &mut rng)?;
        let vectors = gaussian_matrix(&mut rng, 15, 11)?;
        let stats = projected_components(&vectors, &sub, true)?;
        let worst = stats.norms.iter().fold(0.0_f64, |m, n| m.max(*n));
        Ok((worst <= 1.0 + 1e-12, format!("largest unit-row component norm {worst:.12}")))
    }));

    results.push(run_check("container_roundtrip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
        let mut c = Container::new();
        c.insert("m", Blob::Matrix(gaussian_matrix(&mut rng, 4, 7)?))?;
        c.insert("ids", Blob::IntList(vec![-3, 0, 9000]))?;
        c.insert("tag", Blob::Text("suite".into()))?;
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes)?;
        if back != c {
            return Ok((false, "roundtrip mismatch".into()));
        }
        let mut corrupted = bytes.clone();
        corrupted[10] ^= 0xFF;
        let detected = Container::from_bytes(&corrupted).is_err();
        Ok((detected, "roundtrip bitwise stable, corruption detected".into()))
    }));

    results.push(run_check("scale_equivariance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(18));
        let b_hat = gaussian_matrix(&mut rng, 2, 10)?;
        let b_tilde = gaussian_matrix(&mut rng, 2, 10)?;
        let spec = FactorModelSpec::new(b_hat, b_tilde, 1.0, 0.2)?;
        let fs = generate_factor_pairs(&spec, 20, seed.wrapping_add(19))?;
        let scaled = crate::data::factor::PairedFeatureSet::new(
            fs.layer,
            fs.x_plus.scale(4.0),
            fs.x_minus.scale(4.0),
        )?;
        let a = fit_halluspace(&fs, 2)?;
        let b = fit_halluspace(&scaled, 2)?;
        let worst = principal_angles(&a, &b)?.last().copied().unwrap_or(0.0);
        Ok((worst <= 1e-10, format!("largest angle under scaling {worst:.2e}")))
    }));

    results
}

/// Independent dual-path oracle: runs the *original* model but substitutes
/// the projected state `s - V V^T s` as the MLP input at `layer`, leaving
/// the residual stream itself untouched.
fn forward_with_projected_input(
    model: &ToyModel,
    seq: &TokenSequence,
    layer: usize,
    sub: &Subspace,
) -> Result<DenseMatrix> {
    let mut logits = DenseMatrix::zeros(seq.len(), model.vocab_size())?;
    for (t, &id) in seq.ids().iter().enumerate() {
        let mut s = model.embed().row(id).to_vec();
        for l in 0..model.num_layers() {
            let block = model.layer(l)?;
            let input = if l == layer {
                let coeffs = sub.basis().transpose().mat_vec(&s)?;
                let projected_out = sub.basis().mat_vec(&coeffs)?;
                s.iter().zip(&projected_out).map(|(a, b)| a - b).collect()
            } else {
                s.clone()
            };
            let mut h = block.w1.vec_mat(&input)?;
            for v in &mut h {
                *v = v.tanh();
            }
            let m = block.w2.vec_mat(&h)?;
            for (sv, mv) in s.iter_mut().zip(&m) {
                *sv += mv;
            }
        }
        let row = model.unembed().mat_vec(&s)?;
        for (y, v) in row.iter().enumerate() {
            logits.set(t, y, *v);
        }
    }
    Ok(logits)
}

/// Convenience: true when every check in a result set passed.
pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Watched-token helper shared by CLI evaluation paths.
pub fn incidence_of(seqs: &[Vec<usize>], watched: &BTreeSet<usize>) -> f64 {
    crate::analysis::token_frequency_report(seqs, watched).incidence
}
