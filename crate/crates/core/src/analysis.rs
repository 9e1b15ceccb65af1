//! Interpretation tools: decoding subspace directions to vocabulary
//! tokens, projected-component statistics, token-frequency reports, and
//! the decomposition of a one-step DPO-style gradient into feature and
//! output terms.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, DenseMatrix, Subspace};

/// Token ids ranked by the alignment of their unembedding rows with a
/// direction, descending; ties resolve to the lowest id. Returns at most
/// `top` ids (clamped to the vocabulary size).
pub fn decode_direction(unembed: &DenseMatrix, direction: &[f64], top: usize) -> Result<Vec<usize>> {
    if top == 0 {
        return Err(Error::InvalidArgument("top must be at least 1".into()));
    }
    if direction.len() != unembed.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("direction of length {}", unembed.cols()),
            got: format!("length {}", direction.len()),
        });
    }
    if !direction.iter().all(|v| v.is_finite()) || !unembed.is_finite() {
        return Err(Error::InvalidMatrix);
    }
    let scores = unembed.mat_vec(direction)?;
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    // Stable sort by descending score keeps ties in ascending-id order.
    ids.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).expect("finite scores"));
    ids.truncate(top.min(scores.len()));
    Ok(ids)
}

/// Per-row components of a set of vectors inside a subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStats {
    /// `N x k`: row `i` holds the basis coefficients of vector `i`.
    pub components: DenseMatrix,
    /// Euclidean norm of each component row.
    pub norms: Vec<f64>,
    /// Mean of `norms`.
    pub mean_norm: f64,
}

impl ProjectionStats {
    /// Stable JSON summary (keys `rows`, `rank`, `norms`, `mean_norm`).
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Json<'a> {
            rows: usize,
            rank: usize,
            norms: &'a [f64],
            mean_norm: f64,
        }
        serde_json::to_string(&Json {
            rows: self.components.rows(),
            rank: self.components.cols(),
            norms: &self.norms,
            mean_norm: self.mean_norm,
        })
        .expect("stats serialize")
    }

    /// Plot-ready CSV: one line per row with its norm and components.
    pub fn to_csv(&self) -> String {
        let k = self.components.cols();
        let mut out = String::from("row,norm");
        for j in 0..k {
            out.push_str(&format!(",c{j}"));
        }
        out.push('\n');
        for i in 0..self.components.rows() {
            out.push_str(&format!("{i},{}", self.norms[i]));
            for j in 0..k {
                out.push_str(&format!(",{}", self.components.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Components of each row of `vectors` in the subspace basis. With
/// `normalize` set, rows are scaled to unit norm first; a zero row then
/// fails with [`Error::DegenerateVector`] carrying its index.
pub fn projected_components(
    vectors: &DenseMatrix,
    sub: &Subspace,
    normalize: bool,
) -> Result<ProjectionStats> {
    if vectors.cols() != sub.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("vectors of dimension {}", sub.dim()),
            got: format!("dimension {}", vectors.cols()),
        });
    }
    if !vectors.is_finite() {
        return Err(Error::InvalidMatrix);
    }
    let k = sub.rank();
    let mut components = DenseMatrix::zeros(vectors.rows(), k)?;
    let mut norms = Vec::with_capacity(vectors.rows());
    for i in 0..vectors.rows() {
        let mut row = vectors.row(i).to_vec();
        if normalize {
            let n = norm(&row);
            if n == 0.0 {
                return Err(Error::DegenerateVector(i));
            }
            for v in &mut row {
                *v /= n;
            }
        }
        for j in 0..k {
            let basis_col = sub.basis().column(j);
            components.set(i, j, dot(&row, &basis_col));
        }
        norms.push(norm(components.row(i)));
    }
    let mean_norm = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
    Ok(ProjectionStats {
        components,
        norms,
        mean_norm,
    })
}

/// Occurrence statistics of watched tokens over a set of sequences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenFrequencyReport {
    /// Number of sequences inspected.
    pub sequences: usize,
    /// Total occurrences per watched token.
    pub counts: BTreeMap<usize, usize>,
    /// Number of sequences containing each watched token at least once.
    pub sequence_hits: BTreeMap<usize, usize>,
    /// Fraction of sequences containing at least one watched token.
    pub incidence: f64,
}

impl TokenFrequencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// CSV with one line per watched token, ascending by id.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token,count,sequence_hits,sequence_rate\n");
        for (token, count) in &self.counts {
            let hits = self.sequence_hits.get(token).copied().unwrap_or(0);
            let rate = if self.sequences == 0 {
                0.0
            } else {
                hits as f64 / self.sequences as f64
            };
            out.push_str(&format!("{token},{count},{hits},{rate}\n"));
        }
        out
    }
}

/// Counts watched-token occurrences across sequences.
pub fn token_frequency_report(
    sequences: &[Vec<usize>],
    watched: &BTreeSet<usize>,
) -> TokenFrequencyReport {
    let mut counts: BTreeMap<usize, usize> = watched.iter().map(|t| (*t, 0)).collect();
    let mut sequence_hits: BTreeMap<usize, usize> = watched.iter().map(|t| (*t, 0)).collect();
    let mut hit_sequences = 0usize;
    for seq in sequences {
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for tok in seq {
            if watched.contains(tok) {
                *counts.get_mut(tok).expect("watched token") += 1;
                seen.insert(*tok);
            }
        }
        if !seen.is_empty() {
            hit_sequences += 1;
        }
        for tok in seen {
            *sequence_hits.get_mut(&tok).expect("watched token") += 1;
        }
    }
    let incidence = if sequences.is_empty() {
        0.0
    } else {
        hit_sequences as f64 / sequences.len() as f64
    };
    TokenFrequencyReport {
        sequences: sequences.len(),
        counts,
        sequence_hits,
        incidence,
    }
}

/// Shared inputs of the DPO-style computations: the vocabulary decoder
/// rows `o_y` and the preference temperature `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    pub unembed: DenseMatrix,
    pub beta: f64,
}

impl DpoConfig {
    pub fn new(unembed: DenseMatrix, beta: f64) -> Result<Self> {
        if !beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be finite".into()));
        }
        Ok(Self { unembed, beta })
    }

    fn check_token(&self, y: usize) -> Result<()> {
        if y >= self.unembed.rows() {
            return Err(Error::InvalidToken {
                id: y,
                vocab: self.unembed.rows(),
            });
        }
        Ok(())
    }
}

/// One preference pair: a preferred `(x_plus, y_plus)` and a dispreferred
/// `(x_minus, y_minus)` input/output combination.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoPair {
    pub x_plus: Vec<f64>,
    pub x_minus: Vec<f64>,
    pub y_plus: usize,
    pub y_minus: usize,
}

/// The one-step preference gradient and its exact two-term split.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoGradient {
    /// `G = -(beta/N) sum_i (o_{y+} x+^T - o_{y-} x-^T)`.
    pub total: DenseMatrix,
    /// Feature term: `-(beta/N) sum_i o_{y-} (x+ - x-)^T`.
    pub feature_term: DenseMatrix,
    /// Output term: `-(beta/N) sum_i (o_{y+} - o_{y-}) x+^T`.
    pub output_term: DenseMatrix,
}

fn check_pairs(pairs: &[DpoPair], cfg: &DpoConfig) -> Result<usize> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one preference pair".into(),
        ));
    }
    let d_x = pairs[0].x_plus.len();
    for pair in pairs {
        if pair.x_plus.len() != d_x || pair.x_minus.len() != d_x {
            return Err(Error::ShapeMismatch {
                expected: format!("inputs of dimension {d_x}"),
                got: format!(
                    "dimensions {} and {}",
                    pair.x_plus.len(),
                    pair.x_minus.len()
                ),
            });
        }
        if !pair.x_plus.iter().chain(&pair.x_minus).all(|v| v.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        cfg.check_token(pair.y_plus)?;
        cfg.check_token(pair.y_minus)?;
    }
    Ok(d_x)
}

fn add_outer(target: &mut DenseMatrix, scale: f64, o_row: &[f64], x: &[f64]) {
    for (i, ov) in o_row.iter().enumerate() {
        for (j, xv) in x.iter().enumerate() {
            let cur = target.get(i, j);
            target.set(i, j, cur + scale * ov * xv);
        }
    }
}

/// Computes the one-step preference gradient under the linear surrogate
/// (normalization terms dropped) together with its exact decomposition
/// `G = feature_term + output_term`.
pub fn dpo_gradient(pairs: &[DpoPair], cfg: &DpoConfig) -> Result<DpoGradient> {
    let d_x = check_pairs(pairs, cfg)?;
    let d_o = cfg.unembed.cols();
    let n = pairs.len() as f64;
    let scale = -cfg.beta / n;
    let mut total = DenseMatrix::zeros(d_o, d_x)?;
    let mut feature_term = DenseMatrix::zeros(d_o, d_x)?;
    let mut output_term = DenseMatrix::zeros(d_o, d_x)?;
    for pair in pairs {
        let o_plus = cfg.unembed.row(pair.y_plus);
        let o_minus = cfg.unembed.row(pair.y_minus);
        add_outer(&mut total, scale, o_plus, &pair.x_plus);
        add_outer(&mut total, -scale, o_minus, &pair.x_minus);

        let x_diff: Vec<f64> = pair
            .x_plus
            .iter()
            .zip(&pair.x_minus)
            .map(|(p, m)| p - m)
            .collect();
        add_outer(&mut feature_term, scale, o_minus, &x_diff);

        let o_diff: Vec<f64> = o_plus.iter().zip(o_minus).map(|(p, m)| p - m).collect();
        add_outer(&mut output_term, scale, &o_diff, &pair.x_plus);
    }
    Ok(DpoGradient {
        total,
        feature_term,
        output_term,
    })
}

/// Log-sum-exp of the logistic scores `o_y . (W x)` over the vocabulary,
/// max-subtracted for stability. Also returns the raw scores.
fn scores_and_lse(unembed: &DenseMatrix, w: &DenseMatrix, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let wx = w.mat_vec(x)?;
    let scores = unembed.mat_vec(&wx)?;
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok((scores, max + sum.ln()))
}

/// Probabilities of the bilinear logistic model `p(y|x) ~ exp(o_y . W x)`,
/// max-subtracted before exponentiation; the result sums to one.
pub fn logistic_prob(unembed: &DenseMatrix, w: &DenseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if !unembed.is_finite() || !w.is_finite() || !x.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidMatrix);
    }
    let (scores, _) = scores_and_lse(unembed, w, x)?;
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let expd: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = expd.iter().sum();
    Ok(expd.into_iter().map(|e| e / sum).collect())
}

/// `-log sigmoid(z)` evaluated stably.
fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `sigmoid(-z)` evaluated stably.
fn sigmoid_neg(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

fn check_policy_shapes(cfg: &DpoConfig, w_theta: &DenseMatrix, w_ref: &DenseMatrix, d_x: usize) -> Result<()> {
    let d_o = cfg.unembed.cols();
    for (name, w) in [("w_theta", w_theta), ("w_ref", w_ref)] {
        if w.rows() != d_o || w.cols() != d_x {
            return Err(Error::ShapeMismatch {
                expected: format!("{name} of {d_o}x{d_x}"),
                got: format!("{}x{}", w.rows(), w.cols()),
            });
        }
        if !w.is_finite() {
            return Err(Error::InvalidMatrix);
        }
    }
    Ok(())
}

/// Per-pair preference margin `z_i` of the full (normalized) logistic
/// policy against the reference policy.
fn margin(
    cfg: &DpoConfig,
    w_theta: &DenseMatrix,
    w_ref: &DenseMatrix,
    pair: &DpoPair,
) -> Result<f64> {
    let (s_tp, lse_tp) = scores_and_lse(&cfg.unembed, w_theta, &pair.x_plus)?;
    let (s_tm, lse_tm) = scores_and_lse(&cfg.unembed, w_theta, &pair.x_minus)?;
    let (s_rp, lse_rp) = scores_and_lse(&cfg.unembed, w_ref, &pair.x_plus)?;
    let (s_rm, lse_rm) = scores_and_lse(&cfg.unembed, w_ref, &pair.x_minus)?;
    let theta_ratio = (s_tp[pair.y_plus] - lse_tp) - (s_tm[pair.y_minus] - lse_tm);
    let ref_ratio = (s_rp[pair.y_plus] - lse_rp) - (s_rm[pair.y_minus] - lse_rm);
    Ok(cfg.beta * (theta_ratio - ref_ratio))
}

/// The full preference loss `mean_i -log sigmoid(z_i)` of the normalized
/// logistic policy `w_theta` against `w_ref`. Equal policies give exactly
/// `ln 2`.
pub fn dpo_loss(
    pairs: &[DpoPair],
    w_theta: &DenseMatrix,
    w_ref: &DenseMatrix,
    cfg: &DpoConfig,
) -> Result<f64> {
    let d_x = check_pairs(pairs, cfg)?;
    check_policy_shapes(cfg, w_theta, w_ref, d_x)?;
    let mut total = 0.0;
    for pair in pairs {
        total += neg_log_sigmoid(margin(cfg, w_theta, w_ref, pair)?);
    }
    Ok(total / pairs.len() as f64)
}

/// Analytic gradient of [`dpo_loss`] with respect to `w_theta`, including
/// the normalization (softmax-expectation) terms the one-step surrogate
/// drops. At `w_theta = w_ref` the per-pair weight is exactly `1/2`.
pub fn dpo_loss_gradient(
    pairs: &[DpoPair],
    w_theta: &DenseMatrix,
    w_ref: &DenseMatrix,
    cfg: &DpoConfig,
) -> Result<DenseMatrix> {
    let d_x = check_pairs(pairs, cfg)?;
    check_policy_shapes(cfg, w_theta, w_ref, d_x)?;
    let d_o = cfg.unembed.cols();
    let n = pairs.len() as f64;
    let mut grad = DenseMatrix::zeros(d_o, d_x)?;
    for pair in pairs {
        let z = margin(cfg, w_theta, w_ref, pair)?;
        let weight = -sigmoid_neg(z) * cfg.beta / n;

        let probs_plus = logistic_prob(&cfg.unembed, w_theta, &pair.x_plus)?;
        let probs_minus = logistic_prob(&cfg.unembed, w_theta, &pair.x_minus)?;
        let mean_o_plus = mean_decoder(&cfg.unembed, &probs_plus);
        let mean_o_minus = mean_decoder(&cfg.unembed, &probs_minus);

        add_outer(&mut grad, weight, cfg.unembed.row(pair.y_plus), &pair.x_plus);
        add_outer(&mut grad, -weight, &mean_o_plus, &pair.x_plus);
        add_outer(&mut grad, -weight, cfg.unembed.row(pair.y_minus), &pair.x_minus);
        add_outer(&mut grad, weight, &mean_o_minus, &pair.x_minus);
    }
    Ok(grad)
}

/// Probability-weighted mean decoder row `sum_y p_y o_y`.
fn mean_decoder(unembed: &DenseMatrix, probs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; unembed.cols()];
    for (y, p) in probs.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(unembed.row(y)) {
            *o += p * v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal)).unwrap()
    }

    #[test]
    fn decode_ranks_by_score_with_lowest_id_ties() {
        let unembed = DenseMatrix::new(
            4,
            3,
            vec![
                0.5, 0.0, 0.0, // id 0: score 0.5
                2.0, 0.0, 0.0, // id 1: score 2.0
                2.0, 9.0, 0.0, // id 2: score 2.0 (tie with 1)
                -1.0, 0.0, 0.0, // id 3: score -1.0
            ],
        )
        .unwrap();
        let v = vec![1.0, 0.0, 0.0];
        let top = decode_direction(&unembed, &v, 10).unwrap();
        assert_eq!(top, vec![1, 2, 0, 3]);
        let top2 = decode_direction(&unembed, &v, 2).unwrap();
        assert_eq!(top2, vec![1, 2]);
        // Negated direction reverses the ranking (up to tie ordering).
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let bottom = decode_direction(&unembed, &neg, 4).unwrap();
        assert_eq!(bottom, vec![3, 0, 1, 2]);
    }

    #[test]
    fn projected_components_match_hand_values() {
        let basis = DenseMatrix::new(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let sub = Subspace::new(basis, vec![1.0]).unwrap();
        let vectors = DenseMatrix::new(2, 3, vec![3.0, 4.0, 0.0, 0.0, 5.0, 0.0]).unwrap();
        let raw = projected_components(&vectors, &sub, false).unwrap();
        assert_eq!(raw.components.data(), &[3.0, 0.0]);
        assert_eq!(raw.norms, vec![3.0, 0.0]);
        assert!((raw.mean_norm - 1.5).abs() <= 1e-15);
        let unit = projected_components(&vectors, &sub, true).unwrap();
        assert!((unit.components.get(0, 0) - 0.6).abs() <= 1e-15);
        assert_eq!(unit.components.get(1, 0), 0.0);
    }

    #[test]
    fn normalized_projection_rejects_zero_rows() {
        let basis = DenseMatrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let sub = Subspace::new(basis, vec![1.0]).unwrap();
        let vectors = DenseMatrix::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            projected_components(&vectors, &sub, true),
            Err(Error::DegenerateVector(1))
        ));
        assert!(projected_components(&vectors, &sub, false).is_ok());
    }

    #[test]
    fn projection_norm_is_bounded_by_vector_norm() {
        let raw = gaussian_matrix(4, 10, 3);
        let sub = crate::linalg::top_k_subspace(&crate::linalg::svd(&raw).unwrap(), 3).unwrap();
        let vectors = gaussian_matrix(20, 10, 4);
        let stats = projected_components(&vectors, &sub, false).unwrap();
        for i in 0..20 {
            assert!(stats.norms[i] <= norm(vectors.row(i)) + 1e-12);
        }
        let unit = projected_components(&vectors, &sub, true).unwrap();
        assert!(unit.norms.iter().all(|n| *n <= 1.0 + 1e-12));
    }

    #[test]
    fn frequency_report_counts_and_incidence() {
        let seqs = vec![vec![1, 2, 2, 3], vec![4, 5], vec![2, 2, 2]];
        let watched: BTreeSet<usize> = [2, 5].into_iter().collect();
        let report = token_frequency_report(&seqs, &watched);
        assert_eq!(report.sequences, 3);
        assert_eq!(report.counts[&2], 5);
        assert_eq!(report.counts[&5], 1);
        assert_eq!(report.sequence_hits[&2], 2);
        assert_eq!(report.sequence_hits[&5], 1);
        assert!((report.incidence - 1.0).abs() <= 1e-15);
        let none = token_frequency_report(&[], &watched);
        assert_eq!(none.incidence, 0.0);
        let csv = report.to_csv();
        assert!(csv.starts_with("token,count,sequence_hits,sequence_rate\n"));
        assert!(csv.contains("2,5,2,"));
    }

    #[test]
    fn logistic_probs_sum_to_one_and_order_by_score() {
        let unembed = gaussian_matrix(7, 4, 5);
        let w = gaussian_matrix(4, 3, 6);
        let x = vec![0.3, -1.2, 0.7];
        let probs = logistic_prob(&unembed, &w, &x).unwrap();
        assert_eq!(probs.len(), 7);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        assert!(probs.iter().all(|p| *p >= 0.0));
        // Invariance to large common score shifts comes from max
        // subtraction: scale the direction hard and stay finite.
        let big: Vec<f64> = x.iter().map(|v| v * 200.0).collect();
        let probs_big = logistic_prob(&unembed, &w, &big).unwrap();
        assert!(probs_big.iter().all(|p| p.is_finite()));
    }

    fn sample_pairs(n: usize, d_x: usize, vocab: usize, seed: u64) -> Vec<DpoPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x_plus: Vec<f64> =
                    (0..d_x).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let x_minus: Vec<f64> =
                    (0..d_x).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let y_plus = rng.random_range(0..vocab);
                let mut y_minus = rng.random_range(0..vocab);
                if y_minus == y_plus {
                    y_minus = (y_minus + 1) % vocab;
                }
                DpoPair {
                    x_plus,
                    x_minus,
                    y_plus,
                    y_minus,
                }
            })
            .collect()
    }

    #[test]
    fn gradient_split_is_an_exact_identity() {
        let cfg = DpoConfig::new(gaussian_matrix(6, 4, 8), 0.25).unwrap();
        let pairs = sample_pairs(12, 5, 6, 9);
        let g = dpo_gradient(&pairs, &cfg).unwrap();
        let recombined = g.feature_term.add(&g.output_term).unwrap();
        let scale = g.total.max_abs().max(1.0);
        assert!(g.total.max_abs_diff(&recombined).unwrap() <= 1e-12 * scale);
    }

    #[test]
    fn equal_policies_give_exactly_ln_two() {
        let cfg = DpoConfig::new(gaussian_matrix(5, 3, 10), 0.5).unwrap();
        let pairs = sample_pairs(6, 4, 5, 11);
        let w = gaussian_matrix(3, 4, 12);
        let loss = dpo_loss(&pairs, &w, &w, &cfg).unwrap();
        assert_eq!(loss, std::f64::consts::LN_2);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = DpoConfig::new(gaussian_matrix(5, 3, 20), 0.4).unwrap();
        let pairs = sample_pairs(5, 4, 5, 21);
        let w_ref = gaussian_matrix(3, 4, 22);
        let w_theta = gaussian_matrix(3, 4, 23);
        let grad = dpo_loss_gradient(&pairs, &w_theta, &w_ref, &cfg).unwrap();
        let h = 1e-6;
        for (i, j) in [(0, 0), (1, 2), (2, 3), (0, 3)] {
            let mut up = w_theta.clone();
            up.set(i, j, up.get(i, j) + h);
            let mut down = w_theta.clone();
            down.set(i, j, down.get(i, j) - h);
            let fd = (dpo_loss(&pairs, &up, &w_ref, &cfg).unwrap()
                - dpo_loss(&pairs, &down, &w_ref, &cfg).unwrap())
                / (2.0 * h);
            assert!(
                (fd - grad.get(i, j)).abs() <= 1e-6 * grad.max_abs().max(1.0),
                "fd {fd} vs analytic {}",
                grad.get(i, j)
            );
        }
    }

    #[test]
    fn shared_input_surrogate_is_twice_the_loss_gradient_at_reference() {
        // With x_plus == x_minus the softmax expectation terms cancel and
        // the surrogate equals exactly twice the true gradient at
        // w_theta = w_ref (the sigmoid-prime factor of 1/2).
        let cfg = DpoConfig::new(gaussian_matrix(6, 4, 30), 0.3).unwrap();
        let mut pairs = sample_pairs(8, 5, 6, 31);
        for pair in &mut pairs {
            pair.x_minus = pair.x_plus.clone();
        }
        let w_ref = gaussian_matrix(4, 5, 32);
        let surrogate = dpo_gradient(&pairs, &cfg).unwrap();
        let true_grad = dpo_loss_gradient(&pairs, &w_ref, &w_ref, &cfg).unwrap();
        let doubled = true_grad.scale(2.0);
        let scale = surrogate.total.max_abs().max(1.0);
        assert!(surrogate.total.max_abs_diff(&doubled).unwrap() <= 1e-9 * scale);
    }

    #[test]
    fn dpo_inputs_are_validated() {
        let cfg = DpoConfig::new(gaussian_matrix(4, 3, 40), 0.5).unwrap();
        assert!(matches!(
            dpo_gradient(&[], &cfg),
            Err(Error::InvalidArgument(_))
        ));
        let pairs = vec![DpoPair {
            x_plus: vec![1.0, 2.0],
            x_minus: vec![1.0, 2.0],
            y_plus: 9,
            y_minus: 0,
        }];
        assert!(matches!(
            dpo_gradient(&pairs, &cfg),
            Err(Error::InvalidToken { id: 9, vocab: 4 })
        ));
        let ragged = vec![DpoPair {
            x_plus: vec![1.0, 2.0],
            x_minus: vec![1.0],
            y_plus: 0,
            y_minus: 1,
        }];
        assert!(matches!(
            dpo_gradient(&ragged, &cfg),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
