//! Named-entry conventions for storing domain objects in [`Container`]s.
//!
//! Layouts (entry names, with `{p}` a caller-chosen prefix such as
//! `model` or `reference`):
//!
//! - model: `{p}.dims` (int list `[vocab, hidden, mlp, layers]`),
//!   `{p}.embed`, `{p}.layers.{i}.w1`, `{p}.layers.{i}.w2`, `{p}.unembed`
//! - corpus: `corpus.n`, `corpus.designated_layer`, `corpus.accepted_seed`
//!   (u64 seed bit-cast to i64), `corpus.bias_tokens`, and per pair
//!   `corpus.{i}.prompt` / `.truthful` / `.hallucinated`
//! - features: `features.layers` plus `features.{l}.x_plus` / `.x_minus`
//! - subspaces: `halluspace.layers` plus `halluspace.{l}.basis` (`D x k`)
//!   and `halluspace.{l}.sigma` (`1 x k`)
//! - planted bundle: biased model under `model`, clean model under
//!   `reference`, the corpus, and `corpus.true_basis` / `corpus.true_sigma`
//!
//! Semantic violations found while reading (negative counts, inconsistent
//! shapes) surface as [`Error::CorruptContainer`].

use std::collections::BTreeSet;

use crate::data::container::{Blob, Container};
use crate::data::corpus::{CorpusPair, PairedCorpus, PlantedCorpusBundle};
use crate::data::factor::PairedFeatureSet;
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Subspace};
use crate::toymodel::{MlpLayer, ModelDims, ToyModel};

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::CorruptContainer(msg.to_string())
}

fn to_usize(v: i64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| corrupt(format!("negative {what}: {v}")))
}

fn usize_list(values: &[i64], what: &str) -> Result<Vec<usize>> {
    values.iter().map(|v| to_usize(*v, what)).collect()
}

/// Writes a model under the given prefix.
pub fn write_model(c: &mut Container, prefix: &str, model: &ToyModel) -> Result<()> {
    let dims = model.dims();
    c.insert(
        &format!("{prefix}.dims"),
        Blob::IntList(vec![
            dims.vocab_size as i64,
            dims.hidden_dim as i64,
            dims.mlp_dim as i64,
            dims.num_layers as i64,
        ]),
    )?;
    c.insert(&format!("{prefix}.embed"), Blob::Matrix(model.embed().clone()))?;
    for i in 0..dims.num_layers {
        let layer = model.layer(i)?;
        c.insert(
            &format!("{prefix}.layers.{i}.w1"),
            Blob::Matrix(layer.w1.clone()),
        )?;
        c.insert(
            &format!("{prefix}.layers.{i}.w2"),
            Blob::Matrix(layer.w2.clone()),
        )?;
    }
    c.insert(
        &format!("{prefix}.unembed"),
        Blob::Matrix(model.unembed().clone()),
    )?;
    Ok(())
}

/// Reads a model stored under the given prefix.
pub fn read_model(c: &Container, prefix: &str) -> Result<ToyModel> {
    let dims_raw = c.int_list(&format!("{prefix}.dims"))?;
    if dims_raw.len() != 4 {
        return Err(corrupt(format!(
            "{prefix}.dims must have 4 entries, got {}",
            dims_raw.len()
        )));
    }
    let dims = ModelDims {
        vocab_size: to_usize(dims_raw[0], "vocab_size")?,
        hidden_dim: to_usize(dims_raw[1], "hidden_dim")?,
        mlp_dim: to_usize(dims_raw[2], "mlp_dim")?,
        num_layers: to_usize(dims_raw[3], "num_layers")?,
    };
    let embed = c.matrix(&format!("{prefix}.embed"))?.clone();
    let mut layers = Vec::with_capacity(dims.num_layers);
    for i in 0..dims.num_layers {
        layers.push(MlpLayer {
            w1: c.matrix(&format!("{prefix}.layers.{i}.w1"))?.clone(),
            w2: c.matrix(&format!("{prefix}.layers.{i}.w2"))?.clone(),
        });
    }
    let unembed = c.matrix(&format!("{prefix}.unembed"))?.clone();
    let model = ToyModel::new(embed, layers, unembed)
        .map_err(|e| corrupt(format!("stored model under {prefix:?} is inconsistent: {e}")))?;
    let got = model.dims();
    if got != dims {
        return Err(corrupt(format!(
            "{prefix}.dims disagrees with stored matrices"
        )));
    }
    Ok(model)
}

fn ids_blob(ids: &[usize]) -> Blob {
    Blob::IntList(ids.iter().map(|v| *v as i64).collect())
}

/// Writes a corpus under the `corpus` prefix.
pub fn write_corpus(c: &mut Container, corpus: &PairedCorpus) -> Result<()> {
    c.insert("corpus.n", Blob::IntList(vec![corpus.pairs.len() as i64]))?;
    c.insert(
        "corpus.designated_layer",
        Blob::IntList(vec![corpus.designated_layer as i64]),
    )?;
    c.insert(
        "corpus.accepted_seed",
        Blob::IntList(vec![corpus.accepted_seed as i64]),
    )?;
    c.insert(
        "corpus.bias_tokens",
        Blob::IntList(corpus.bias_tokens.iter().map(|v| *v as i64).collect()),
    )?;
    for (i, pair) in corpus.pairs.iter().enumerate() {
        c.insert(&format!("corpus.{i}.prompt"), ids_blob(&pair.prompt))?;
        c.insert(&format!("corpus.{i}.truthful"), ids_blob(&pair.truthful))?;
        c.insert(
            &format!("corpus.{i}.hallucinated"),
            ids_blob(&pair.hallucinated),
        )?;
    }
    Ok(())
}

/// Reads a corpus stored under the `corpus` prefix.
pub fn read_corpus(c: &Container) -> Result<PairedCorpus> {
    let n_list = c.int_list("corpus.n")?;
    if n_list.len() != 1 {
        return Err(corrupt("corpus.n must hold exactly one value"));
    }
    let n = to_usize(n_list[0], "pair count")?;
    if n == 0 {
        return Err(corrupt("corpus has no pairs"));
    }
    let designated_layer = to_usize(
        *c.int_list("corpus.designated_layer")?
            .first()
            .ok_or_else(|| corrupt("corpus.designated_layer is empty"))?,
        "designated layer",
    )?;
    let accepted_seed = *c
        .int_list("corpus.accepted_seed")?
        .first()
        .ok_or_else(|| corrupt("corpus.accepted_seed is empty"))? as u64;
    let bias_tokens: BTreeSet<usize> =
        usize_list(c.int_list("corpus.bias_tokens")?, "bias token")?
            .into_iter()
            .collect();
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let prompt = usize_list(c.int_list(&format!("corpus.{i}.prompt"))?, "token id")?;
        let truthful = usize_list(c.int_list(&format!("corpus.{i}.truthful"))?, "token id")?;
        let hallucinated =
            usize_list(c.int_list(&format!("corpus.{i}.hallucinated"))?, "token id")?;
        if prompt.is_empty() || truthful.is_empty() || hallucinated.is_empty() {
            return Err(corrupt(format!("corpus pair {i} has an empty sequence")));
        }
        pairs.push(CorpusPair {
            prompt,
            truthful,
            hallucinated,
        });
    }
    Ok(PairedCorpus {
        pairs,
        bias_tokens,
        designated_layer,
        accepted_seed,
    })
}

/// Writes feature sets under the `features` prefix, ascending by layer.
pub fn write_features(c: &mut Container, features: &[PairedFeatureSet]) -> Result<()> {
    let mut sorted: Vec<&PairedFeatureSet> = features.iter().collect();
    sorted.sort_by_key(|f| f.layer);
    c.insert(
        "features.layers",
        Blob::IntList(sorted.iter().map(|f| f.layer as i64).collect()),
    )?;
    for f in sorted {
        c.insert(
            &format!("features.{}.x_plus", f.layer),
            Blob::Matrix(f.x_plus.clone()),
        )?;
        c.insert(
            &format!("features.{}.x_minus", f.layer),
            Blob::Matrix(f.x_minus.clone()),
        )?;
    }
    Ok(())
}

/// Reads every feature set stored under the `features` prefix.
pub fn read_features(c: &Container) -> Result<Vec<PairedFeatureSet>> {
    let layers = usize_list(c.int_list("features.layers")?, "layer index")?;
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let x_plus = c.matrix(&format!("features.{l}.x_plus"))?.clone();
        let x_minus = c.matrix(&format!("features.{l}.x_minus"))?.clone();
        let fs = PairedFeatureSet::new(l, x_plus, x_minus)
            .map_err(|e| corrupt(format!("stored features at layer {l} are inconsistent: {e}")))?;
        out.push(fs);
    }
    Ok(out)
}

/// Writes per-layer subspaces under the `halluspace` prefix.
pub fn write_subspaces(c: &mut Container, subspaces: &[(usize, Subspace)]) -> Result<()> {
    let mut sorted: Vec<&(usize, Subspace)> = subspaces.iter().collect();
    sorted.sort_by_key(|(l, _)| *l);
    c.insert(
        "halluspace.layers",
        Blob::IntList(sorted.iter().map(|(l, _)| *l as i64).collect()),
    )?;
    for (l, sub) in sorted {
        c.insert(
            &format!("halluspace.{l}.basis"),
            Blob::Matrix(sub.basis().clone()),
        )?;
        let sigma = DenseMatrix::new(1, sub.rank(), sub.sigma().to_vec())?;
        c.insert(&format!("halluspace.{l}.sigma"), Blob::Matrix(sigma))?;
    }
    Ok(())
}

/// Reads every per-layer subspace stored under the `halluspace` prefix.
pub fn read_subspaces(c: &Container) -> Result<Vec<(usize, Subspace)>> {
    let layers = usize_list(c.int_list("halluspace.layers")?, "layer index")?;
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let basis = c.matrix(&format!("halluspace.{l}.basis"))?.clone();
        let sigma = c.matrix(&format!("halluspace.{l}.sigma"))?;
        let sub = Subspace::new(basis, sigma.data().to_vec())
            .map_err(|e| corrupt(format!("stored subspace at layer {l} is invalid: {e}")))?;
        out.push((l, sub));
    }
    Ok(out)
}

/// Writes a full planted bundle: biased model, clean reference model,
/// corpus, and the planted ground-truth subspace.
pub fn write_bundle(c: &mut Container, bundle: &PlantedCorpusBundle) -> Result<()> {
    write_model(c, "model", &bundle.biased_model)?;
    write_model(c, "reference", &bundle.base_model)?;
    write_corpus(c, &bundle.corpus)?;
    c.insert(
        "corpus.true_basis",
        Blob::Matrix(bundle.true_subspace.basis().clone()),
    )?;
    let sigma = DenseMatrix::new(
        1,
        bundle.true_subspace.rank(),
        bundle.true_subspace.sigma().to_vec(),
    )?;
    c.insert("corpus.true_sigma", Blob::Matrix(sigma))?;
    Ok(())
}

/// Reads a full planted bundle.
pub fn read_bundle(c: &Container) -> Result<PlantedCorpusBundle> {
    let biased_model = read_model(c, "model")?;
    let base_model = read_model(c, "reference")?;
    let corpus = read_corpus(c)?;
    let basis = c.matrix("corpus.true_basis")?.clone();
    let sigma = c.matrix("corpus.true_sigma")?;
    let true_subspace = Subspace::new(basis, sigma.data().to_vec())
        .map_err(|e| corrupt(format!("stored true subspace is invalid: {e}")))?;
    Ok(PlantedCorpusBundle {
        base_model,
        biased_model,
        corpus,
        true_subspace,
    })
}
