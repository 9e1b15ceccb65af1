//! The end-to-end editing pipeline: capture paired features, form the
//! paired difference matrix, fit the top-k right singular subspace (the
//! "halluspace"), and project it out of the input-facing MLP weights of
//! the selected layers.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::corpus::PairedCorpus;
use crate::data::factor::PairedFeatureSet;
use crate::error::{Error, Result};
use crate::linalg::{svd, top_k_subspace, DenseMatrix, Subspace};
use crate::toymodel::{TokenSequence, ToyModel};

/// How multi-layer edits are sequenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditMode {
    /// Fit every layer's subspace from the original model, then apply all
    /// edits. The default.
    OneShot,
    /// Edit layers in ascending order, re-extracting features from the
    /// partially edited model before each fit. Requires a corpus input
    /// when more than one layer is edited.
    Sequential,
}

/// Which positions contribute to pooled captures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Pool every position (prompt and continuation). The default.
    AllPositions,
    /// Pool only continuation positions.
    ContinuationOnly,
}

/// Configuration of one editing run. Layers are kept sorted and
/// deduplicated; edits always apply in ascending layer order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditConfig {
    layers: Vec<usize>,
    pub rank: usize,
    pub mode: EditMode,
    pub mask_policy: MaskPolicy,
}

impl EditConfig {
    pub fn new(layers: &[usize], rank: usize) -> Self {
        let mut layers = layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        Self {
            layers,
            rank,
            mode: EditMode::OneShot,
            mask_policy: MaskPolicy::AllPositions,
        }
    }

    /// Preset for the bundled toy models: layers 4-7 at rank 4.
    pub fn toy_default() -> Self {
        Self::new(&[4, 5, 6, 7], 4)
    }

    /// Preset matching the published vision-language recipe: layers 16-31
    /// at rank 4.
    pub fn llava_chair() -> Self {
        let layers: Vec<usize> = (16..=31).collect();
        Self::new(&layers, 4)
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn with_mode(mut self, mode: EditMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_mask_policy(mut self, mask_policy: MaskPolicy) -> Self {
        self.mask_policy = mask_policy;
        self
    }
}

/// Per-layer outcome of an edit.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    /// Full singular spectrum of the paired difference matrix.
    pub sigma: Vec<f64>,
    /// Fraction of squared spectral energy captured by the retained rank.
    pub energy_ratio: f64,
    /// Frobenius norm of the change to the layer's `w1`.
    pub w_delta_frobenius: f64,
    /// The fitted subspace that was projected out.
    pub subspace: Subspace,
}

/// Report over all edited layers, in ascending layer order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EditReport {
    pub layers: Vec<LayerReport>,
}

#[derive(Serialize)]
struct LayerReportJson<'a> {
    layer: usize,
    sigma: &'a [f64],
    energy_ratio: f64,
    w_delta_frobenius: f64,
}

impl EditReport {
    /// Stable JSON rendering; per-layer keys appear in the order `layer`,
    /// `sigma`, `energy_ratio`, `w_delta_frobenius`.
    pub fn to_json(&self) -> String {
        let rows: Vec<LayerReportJson> = self
            .layers
            .iter()
            .map(|l| LayerReportJson {
                layer: l.layer,
                sigma: &l.sigma,
                energy_ratio: l.energy_ratio,
                w_delta_frobenius: l.w_delta_frobenius,
            })
            .collect();
        let mut out = String::from("{\"layers\":");
        out.push_str(&serde_json::to_string(&rows).expect("report serializes"));
        out.push('}');
        out
    }

    /// The fitted subspaces as `(layer, subspace)` pairs.
    pub fn subspaces(&self) -> Vec<(usize, Subspace)> {
        self.layers
            .iter()
            .map(|l| (l.layer, l.subspace.clone()))
            .collect()
    }
}

/// Source of paired features for an editing run.
#[derive(Debug, Clone, Copy)]
pub enum PipelineInput<'a> {
    /// Extract features from the model being edited over this corpus.
    Corpus(&'a PairedCorpus),
    /// Use precomputed per-layer features.
    Features(&'a [PairedFeatureSet]),
}

/// The paired difference matrix `X_plus - X_minus`.
pub fn difference_matrix(fs: &PairedFeatureSet) -> Result<DenseMatrix> {
    fs.x_plus.sub(&fs.x_minus)
}

/// Fits the rank-`k` halluspace: the span of the top-k right singular
/// vectors of the paired difference matrix.
pub fn fit_halluspace(fs: &PairedFeatureSet, k: usize) -> Result<Subspace> {
    Ok(fit_full(fs, k)?.0)
}

/// Fit that also returns the full singular spectrum for reporting.
fn fit_full(fs: &PairedFeatureSet, k: usize) -> Result<(Subspace, Vec<f64>)> {
    let diff = difference_matrix(fs)?;
    let decomp = svd(&diff)?;
    let sub = top_k_subspace(&decomp, k)?;
    Ok((sub, decomp.sigma))
}

/// Runs the model over every corpus pair and pools capture states at the
/// requested layers, producing one feature row per pair (positive side
/// from the hallucinated continuation, negative from the truthful one).
pub fn extract_features(
    model: &ToyModel,
    corpus: &PairedCorpus,
    layers: &[usize],
    mask_policy: MaskPolicy,
) -> Result<Vec<PairedFeatureSet>> {
    let mut wanted = layers.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    if wanted.is_empty() {
        return Ok(Vec::new());
    }
    if corpus.pairs.is_empty() {
        return Err(Error::DegenerateCorpus("corpus has no pairs".into()));
    }
    for &l in &wanted {
        if l >= model.num_layers() {
            return Err(Error::InvalidLayer {
                layer: l,
                layers: model.num_layers(),
            });
        }
    }

    let rows: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = corpus
        .pairs
        .par_iter()
        .map(|pair| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
            let plus_seq = pooled_sequence(&pair.prompt, &pair.hallucinated, mask_policy)?;
            let minus_seq = pooled_sequence(&pair.prompt, &pair.truthful, mask_policy)?;
            let plus = model.forward(&plus_seq, &wanted)?;
            let minus = model.forward(&minus_seq, &wanted)?;
            let plus_states = plus.captures.into_iter().map(|c| c.state).collect();
            let minus_states = minus.captures.into_iter().map(|c| c.state).collect();
            Ok((plus_states, minus_states))
        })
        .collect::<Result<_>>()?;

    let d = model.hidden_dim();
    let n = corpus.pairs.len();
    let mut out = Vec::with_capacity(wanted.len());
    for (idx, &layer) in wanted.iter().enumerate() {
        let mut x_plus = DenseMatrix::zeros(n, d)?;
        let mut x_minus = DenseMatrix::zeros(n, d)?;
        for (i, (plus_states, minus_states)) in rows.iter().enumerate() {
            for j in 0..d {
                x_plus.set(i, j, plus_states[idx][j]);
                x_minus.set(i, j, minus_states[idx][j]);
            }
        }
        out.push(PairedFeatureSet::new(layer, x_plus, x_minus)?);
    }
    Ok(out)
}

fn pooled_sequence(
    prompt: &[usize],
    continuation: &[usize],
    mask_policy: MaskPolicy,
) -> Result<TokenSequence> {
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(continuation);
    match mask_policy {
        MaskPolicy::AllPositions => TokenSequence::new(ids),
        MaskPolicy::ContinuationOnly => {
            let mut mask = vec![false; prompt.len()];
            mask.extend(std::iter::repeat(true).take(continuation.len()));
            TokenSequence::with_mask(ids, mask)
        }
    }
}

fn stage_err(layer: usize, e: Error) -> Error {
    match e {
        already @ Error::PipelineStage { .. } => already,
        other => Error::PipelineStage {
            layer,
            source: Box::new(other),
        },
    }
}

/// Runs the full editing pipeline and returns the edited model plus a
/// per-layer report. A rank of zero or an empty layer list disables the
/// edit and returns the model unchanged with an empty report.
pub fn run_nullu(
    model: &ToyModel,
    input: PipelineInput<'_>,
    config: &EditConfig,
) -> Result<(ToyModel, EditReport)> {
    let layers = config.layers();
    if layers.is_empty() || config.rank == 0 {
        return Ok((model.clone(), EditReport::default()));
    }
    for &l in layers {
        if l >= model.num_layers() {
            return Err(Error::InvalidLayer {
                layer: l,
                layers: model.num_layers(),
            });
        }
    }

    match (config.mode, input) {
        (EditMode::OneShot, input) => {
            let feature_sets: Vec<PairedFeatureSet> = match input {
                PipelineInput::Corpus(corpus) => {
                    extract_features(model, corpus, layers, config.mask_policy)?
                }
                PipelineInput::Features(sets) => layers
                    .iter()
                    .map(|&l| find_features(sets, l).cloned())
                    .collect::<Result<_>>()?,
            };
            let fits: Vec<(Subspace, Vec<f64>)> = feature_sets
                .par_iter()
                .map(|fs| fit_full(fs, config.rank).map_err(|e| stage_err(fs.layer, e)))
                .collect::<Result<_>>()?;
            let mut edited = model.clone();
            let mut report = EditReport::default();
            for (fs, (sub, sigma)) in feature_sets.iter().zip(fits) {
                edited = apply_one(&edited, fs.layer, sub, sigma, config.rank, &mut report)?;
            }
            Ok((edited, report))
        }
        (EditMode::Sequential, PipelineInput::Features(sets)) => {
            if layers.len() > 1 {
                return Err(Error::InvalidArgument(
                    "sequential mode over multiple layers needs a corpus input so features \
                     can be re-extracted after each edit"
                        .into(),
                ));
            }
            let l = layers[0];
            let fs = find_features(sets, l)?;
            let (sub, sigma) = fit_full(fs, config.rank).map_err(|e| stage_err(l, e))?;
            let mut report = EditReport::default();
            let edited = apply_one(model, l, sub, sigma, config.rank, &mut report)?;
            Ok((edited, report))
        }
        (EditMode::Sequential, PipelineInput::Corpus(corpus)) => {
            let mut current = model.clone();
            let mut report = EditReport::default();
            for &l in layers {
                let fs = extract_features(&current, corpus, &[l], config.mask_policy)?
                    .pop()
                    .expect("one layer requested");
                let (sub, sigma) = fit_full(&fs, config.rank).map_err(|e| stage_err(l, e))?;
                current = apply_one(&current, l, sub, sigma, config.rank, &mut report)?;
            }
            Ok((current, report))
        }
    }
}

fn find_features(sets: &[PairedFeatureSet], layer: usize) -> Result<&PairedFeatureSet> {
    sets.iter()
        .find(|fs| fs.layer == layer)
        .ok_or_else(|| Error::InvalidArgument(format!("no features provided for layer {layer}")))
}

fn apply_one(
    model: &ToyModel,
    layer: usize,
    sub: Subspace,
    sigma: Vec<f64>,
    rank: usize,
    report: &mut EditReport,
) -> Result<ToyModel> {
    let before = model.layer(layer)?.w1.clone();
    let edited = model.edit_layer(layer, &sub).map_err(|e| stage_err(layer, e))?;
    let w_delta = edited
        .layer(layer)?
        .w1
        .sub(&before)?
        .frobenius_norm();
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let kept: f64 = sigma.iter().take(rank).map(|s| s * s).sum();
    report.layers.push(LayerReport {
        layer,
        sigma,
        energy_ratio: kept / total,
        w_delta_frobenius: w_delta,
        subspace: sub,
    });
    Ok(edited)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{build_planted_bias_corpus, PlantedBiasSpec};
    use crate::data::factor::{generate_factor_pairs, FactorModelSpec};
    use crate::linalg::principal_angles;
    use crate::toymodel::ModelDims;

    fn axis_spec(d: usize, k_tilde: usize, noise: f64) -> FactorModelSpec {
        let b_hat = DenseMatrix::from_fn(2, d, |i, j| if j == i { 1.0 } else { 0.0 }).unwrap();
        let b_tilde =
            DenseMatrix::from_fn(k_tilde, d, |i, j| if j == 2 + i { 1.0 } else { 0.0 }).unwrap();
        FactorModelSpec::new(b_hat, b_tilde, 1.0, noise).unwrap()
    }

    fn toy(seed: u64) -> ToyModel {
        ToyModel::init(
            ModelDims {
                vocab_size: 40,
                hidden_dim: 12,
                mlp_dim: 20,
                num_layers: 5,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn difference_matrix_subtracts_pairwise() {
        let x_plus = DenseMatrix::new(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let x_minus = DenseMatrix::new(2, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let fs = PairedFeatureSet::new(0, x_plus, x_minus).unwrap();
        let e = difference_matrix(&fs).unwrap();
        assert_eq!(e.data(), &[2.0, 3.0, 3.0, 4.0]);
    }

    #[test]
    fn noiseless_fit_recovers_the_planted_subspace() {
        let spec = axis_spec(16, 3, 0.0);
        let fs = generate_factor_pairs(&spec, 60, 4).unwrap();
        let fitted = fit_halluspace(&fs, 3).unwrap();
        let truth = spec.true_subspace().unwrap();
        let angles = principal_angles(&truth, &fitted).unwrap();
        assert!(angles.iter().all(|t| *t <= 1e-8), "angles: {angles:?}");
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let spec = axis_spec(10, 2, 0.3);
        let fs = generate_factor_pairs(&spec, 30, 6).unwrap();
        let base = fit_full(&fs, 2).unwrap();
        let scaled_fs = PairedFeatureSet::new(0, fs.x_plus.scale(3.0), fs.x_minus.scale(3.0)).unwrap();
        let scaled = fit_full(&scaled_fs, 2).unwrap();
        let angles = principal_angles(&base.0, &scaled.0).unwrap();
        assert!(angles.iter().all(|t| *t <= 1e-10));
        for (a, b) in base.1.iter().zip(&scaled.1) {
            assert!((b / a - 3.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn energy_ratio_is_monotone_in_rank() {
        let spec = axis_spec(12, 4, 0.5);
        let fs = generate_factor_pairs(&spec, 40, 8).unwrap();
        let diff = difference_matrix(&fs).unwrap();
        let sigma = svd(&diff).unwrap().sigma;
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        let mut prev = 0.0;
        for k in 1..=sigma.len() {
            let kept: f64 = sigma.iter().take(k).map(|s| s * s).sum();
            let ratio = kept / total;
            assert!(ratio >= prev);
            prev = ratio;
        }
        assert!((prev - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_rank_or_no_layers_skips_the_edit() {
        let model = toy(3);
        let spec = PlantedBiasSpec::recommended(model.dims(), 2);
        let bundle = build_planted_bias_corpus(&spec, 2).unwrap();
        let cfg = EditConfig::new(&[2], 0);
        let (edited, report) = run_nullu(
            &bundle.biased_model,
            PipelineInput::Corpus(&bundle.corpus),
            &cfg,
        )
        .unwrap();
        assert_eq!(edited, bundle.biased_model);
        assert!(report.layers.is_empty());

        let cfg = EditConfig::new(&[], 2);
        let (edited, report) = run_nullu(
            &bundle.biased_model,
            PipelineInput::Corpus(&bundle.corpus),
            &cfg,
        )
        .unwrap();
        assert_eq!(edited, bundle.biased_model);
        assert!(report.layers.is_empty());
    }

    #[test]
    fn extract_features_is_deterministic_and_mask_sensitive() {
        let spec = PlantedBiasSpec::recommended(
            ModelDims {
                vocab_size: 64,
                hidden_dim: 16,
                mlp_dim: 32,
                num_layers: 4,
            },
            1,
        );
        let bundle = build_planted_bias_corpus(&spec, 9).unwrap();
        let a = extract_features(
            &bundle.biased_model,
            &bundle.corpus,
            &[1, 2],
            MaskPolicy::AllPositions,
        )
        .unwrap();
        let b = extract_features(
            &bundle.biased_model,
            &bundle.corpus,
            &[2, 1, 1],
            MaskPolicy::AllPositions,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].layer, 1);
        assert_eq!(a[1].layer, 2);
        let c = extract_features(
            &bundle.biased_model,
            &bundle.corpus,
            &[1, 2],
            MaskPolicy::ContinuationOnly,
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sequential_single_layer_matches_one_shot() {
        let spec = PlantedBiasSpec::recommended(
            ModelDims {
                vocab_size: 64,
                hidden_dim: 16,
                mlp_dim: 32,
                num_layers: 4,
            },
            2,
        );
        let bundle = build_planted_bias_corpus(&spec, 14).unwrap();
        let one_shot = EditConfig::new(&[2], 2);
        let sequential = EditConfig::new(&[2], 2).with_mode(EditMode::Sequential);
        let (m1, r1) = run_nullu(
            &bundle.biased_model,
            PipelineInput::Corpus(&bundle.corpus),
            &one_shot,
        )
        .unwrap();
        let (m2, r2) = run_nullu(
            &bundle.biased_model,
            PipelineInput::Corpus(&bundle.corpus),
            &sequential,
        )
        .unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn sequential_multi_layer_needs_a_corpus() {
        let model = toy(5);
        let spec = axis_spec(12, 2, 0.1);
        let mut fs = generate_factor_pairs(&spec, 20, 3).unwrap();
        fs.layer = 1;
        let mut fs2 = fs.clone();
        fs2.layer = 2;
        let sets = vec![fs, fs2];
        let cfg = EditConfig::new(&[1, 2], 2).with_mode(EditMode::Sequential);
        assert!(matches!(
            run_nullu(&model, PipelineInput::Features(&sets), &cfg),
            Err(Error::InvalidArgument(_))
        ));
        // A single layer is fine: there is nothing to re-extract.
        let cfg = EditConfig::new(&[1], 2).with_mode(EditMode::Sequential);
        assert!(run_nullu(&model, PipelineInput::Features(&sets), &cfg).is_ok());
    }

    #[test]
    fn missing_feature_layer_is_invalid() {
        let model = toy(6);
        let spec = axis_spec(12, 2, 0.1);
        let fs = generate_factor_pairs(&spec, 20, 3).unwrap();
        let sets = vec![fs];
        let cfg = EditConfig::new(&[3], 2);
        assert!(matches!(
            run_nullu(&model, PipelineInput::Features(&sets), &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rank_overflow_is_wrapped_with_the_layer() {
        let model = toy(7);
        // Rank-1 difference: all rows identical.
        let x_plus = DenseMatrix::from_fn(6, 12, |_, j| (j as f64).cos()).unwrap();
        let x_minus = DenseMatrix::zeros(6, 12).unwrap();
        let mut fs = PairedFeatureSet::new(0, x_plus, x_minus).unwrap();
        fs.layer = 2;
        let cfg = EditConfig::new(&[2], 5);
        let err = run_nullu(&model, PipelineInput::Features(&[fs]), &cfg).unwrap_err();
        match err {
            Error::PipelineStage { layer, source } => {
                assert_eq!(layer, 2);
                assert!(matches!(
                    *source,
                    Error::RankDeficient { requested: 5, admissible: 1 }
                ));
            }
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn report_json_has_stable_key_order() {
        let spec = axis_spec(10, 2, 0.0);
        let fs = generate_factor_pairs(&spec, 12, 2).unwrap();
        let model = ToyModel::init(
            ModelDims {
                vocab_size: 20,
                hidden_dim: 10,
                mlp_dim: 14,
                num_layers: 2,
            },
            1,
        )
        .unwrap();
        let cfg = EditConfig::new(&[0], 2);
        let (_, report) = run_nullu(&model, PipelineInput::Features(&[fs]), &cfg).unwrap();
        let json = report.to_json();
        let layer_pos = json.find("\"layer\"").unwrap();
        let sigma_pos = json.find("\"sigma\"").unwrap();
        let energy_pos = json.find("\"energy_ratio\"").unwrap();
        let delta_pos = json.find("\"w_delta_frobenius\"").unwrap();
        assert!(layer_pos < sigma_pos && sigma_pos < energy_pos && energy_pos < delta_pos);
        // Parses as JSON and has one entry for the one edited layer.
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["layers"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn presets_cover_the_documented_layer_ranges() {
        let toy_cfg = EditConfig::toy_default();
        assert_eq!(toy_cfg.layers(), &[4, 5, 6, 7]);
        assert_eq!(toy_cfg.rank, 4);
        let llava = EditConfig::llava_chair();
        assert_eq!(llava.layers().len(), 16);
        assert_eq!(llava.layers()[0], 16);
        assert_eq!(*llava.layers().last().unwrap(), 31);
        assert_eq!(llava.rank, 4);
    }
}
