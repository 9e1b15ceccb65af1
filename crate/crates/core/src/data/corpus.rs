//! Planted-bias corpus generation.
//!
//! The generator starts from a clean seeded [`ToyModel`] and plants a
//! rank-`k_true` spurious subspace into a copy of it, in three coupled
//! places:
//!
//! 1. **Embedding**: every token's embedding row gains a component inside
//!    the planted subspace — weak for normal tokens (so there is always
//!    something to read) and strong for the designated bias tokens (so
//!    their presence in context dominates paired feature differences).
//! 2. **Designated-layer amplifier**: `k_true` hidden units of one layer
//!    become dedicated read/write channels. Each read column of `w1` is an
//!    exact multiple of a planted direction, and the matching `w2` row
//!    writes that direction back amplified. The unit fires only on the
//!    planted component of its input, so projecting the subspace out of
//!    that layer's `w1` silences the amplifier.
//! 3. **Unembedding**: bias-token logits align with the planted subspace
//!    (and their pre-existing rows shrink), so amplified states — and only
//!    amplified states — steer greedy decoding into the bias tokens.
//!
//! Truthful continuations come from the clean model, hallucinated ones
//! from the planted model, over the same prompts. The generator verifies
//! the planted pathology (bias tokens in at least 80% of hallucinated
//! continuations, in no truthful continuation, and every pair differing)
//! and retries derived seeds until a draw passes, recording the accepted
//! seed; exhausting the attempt budget is a [`Error::DegenerateCorpus`].

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::factor::{random_subspace, random_unit_vector};
use crate::error::{Error, Result};
use crate::linalg::Subspace;
use crate::toymodel::{ModelDims, ToyModel};

/// One prompt with its clean and planted continuations (continuations
/// exclude the prompt tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPair {
    pub prompt: Vec<usize>,
    pub truthful: Vec<usize>,
    pub hallucinated: Vec<usize>,
}

/// A verified planted-bias corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedCorpus {
    pub pairs: Vec<CorpusPair>,
    pub bias_tokens: BTreeSet<usize>,
    /// Layer whose `w1` mediates the planted amplifier.
    pub designated_layer: usize,
    /// Derived seed of the attempt that passed verification.
    pub accepted_seed: u64,
}

impl PairedCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Fraction of the given continuations containing at least one watched
    /// token.
    pub fn incidence(continuations: &[Vec<usize>], watched: &BTreeSet<usize>) -> f64 {
        if continuations.is_empty() {
            return 0.0;
        }
        let hits = continuations
            .iter()
            .filter(|c| c.iter().any(|t| watched.contains(t)))
            .count();
        hits as f64 / continuations.len() as f64
    }
}

/// Parameters of the planted-bias construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBiasSpec {
    pub dims: ModelDims,
    /// Layer carrying the amplifier; editing this layer's `w1` disables it.
    pub designated_layer: usize,
    /// Number of bias tokens, taken from the top of the id range.
    pub bias_token_count: usize,
    /// Rank of the planted subspace.
    pub k_true: usize,
    pub n_pairs: usize,
    pub prompt_len: usize,
    pub continuation_len: usize,
    /// Strength of the planted component in bias-token embeddings.
    pub embed_gain: f64,
    /// Strength of the planted component in every other embedding; this is
    /// what the amplifier reads from safe prompts.
    pub seed_gain: f64,
    /// Scale of the dedicated read columns in the designated layer's `w1`.
    pub read_gain: f64,
    /// Strength of the designated-layer write-back amplifier.
    pub amp_gain: f64,
    /// Strength of the bias-token logit alignment.
    pub unembed_gain: f64,
    /// Factor scaling down the pre-existing unembedding rows of bias
    /// tokens, making the planted alignment their dominant logit pathway.
    pub unembed_dampen: f64,
    /// Seed-retry budget for the verification loop.
    pub max_attempts: u32,
}

impl PlantedBiasSpec {
    /// A spec with gains tuned for the given shape.
    pub fn recommended(dims: ModelDims, designated_layer: usize) -> Self {
        Self {
            dims,
            designated_layer,
            bias_token_count: (dims.vocab_size / 8).max(6),
            k_true: 2,
            n_pairs: 48,
            prompt_len: 4,
            continuation_len: 8,
            embed_gain: 96.0,
            seed_gain: 0.25,
            read_gain: 1.2,
            amp_gain: 14.0,
            unembed_gain: 0.6,
            unembed_dampen: 0.35,
            max_attempts: 32,
        }
    }

    /// The bias-token id set: the top `bias_token_count` ids.
    pub fn bias_tokens(&self) -> BTreeSet<usize> {
        (self.dims.vocab_size - self.bias_token_count..self.dims.vocab_size).collect()
    }

    fn validate(&self) -> Result<()> {
        let v = self.dims.vocab_size;
        if self.bias_token_count == 0 {
            return Err(Error::InvalidSpec("need at least one bias token".into()));
        }
        if v < 4 * self.bias_token_count || v - self.bias_token_count < 8 {
            return Err(Error::InvalidSpec(format!(
                "vocabulary of {v} is too small for {} bias tokens",
                self.bias_token_count
            )));
        }
        if self.k_true == 0 || self.k_true > self.dims.hidden_dim {
            return Err(Error::InvalidSpec(format!(
                "k_true must be in 1..={}, got {}",
                self.dims.hidden_dim, self.k_true
            )));
        }
        if self.dims.mlp_dim < 4 * self.k_true {
            return Err(Error::InvalidSpec(format!(
                "mlp_dim of {} is too small to reserve {} read units",
                self.dims.mlp_dim, self.k_true
            )));
        }
        if self.designated_layer >= self.dims.num_layers {
            return Err(Error::InvalidLayer {
                layer: self.designated_layer,
                layers: self.dims.num_layers,
            });
        }
        if self.n_pairs == 0 || self.prompt_len == 0 || self.continuation_len == 0 {
            return Err(Error::InvalidSpec(
                "n_pairs, prompt_len, and continuation_len must be positive".into(),
            ));
        }
        let gains = [
            self.embed_gain,
            self.seed_gain,
            self.read_gain,
            self.amp_gain,
            self.unembed_gain,
        ];
        if gains.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::InvalidSpec(
                "gains must be finite and non-negative".into(),
            ));
        }
        if !self.unembed_dampen.is_finite()
            || !(0.0..=1.0).contains(&self.unembed_dampen)
        {
            return Err(Error::InvalidSpec(
                "unembed_dampen must lie in [0, 1]".into(),
            ));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidSpec("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Everything produced by one successful generation: the clean reference
/// model, the planted (bias-afflicted) model, the verified corpus, and the
/// planted ground-truth subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCorpusBundle {
    pub base_model: ToyModel,
    pub biased_model: ToyModel,
    pub corpus: PairedCorpus,
    pub true_subspace: Subspace,
}

/// Greedy next-token map of a position-wise model: entry `v` is the token
/// the model emits after `v`.
pub(crate) fn walk_map(model: &ToyModel) -> Result<Vec<usize>> {
    let mut map = Vec::with_capacity(model.vocab_size());
    for v in 0..model.vocab_size() {
        let seq = crate::toymodel::TokenSequence::new(vec![v])?;
        let out = model.forward(&seq, &[])?;
        map.push(crate::toymodel::argmax_lowest(out.logits.row(0)));
    }
    Ok(map)
}

fn walk_from(map: &[usize], start: usize, steps: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(steps);
    let mut cur = start;
    for _ in 0..steps {
        cur = map[cur];
        out.push(cur);
    }
    out
}

/// Builds and verifies a planted-bias corpus. Deterministic in
/// `(spec, seed)`: the accepted attempt always reproduces bitwise.
pub fn build_planted_bias_corpus(spec: &PlantedBiasSpec, seed: u64) -> Result<PlantedCorpusBundle> {
    spec.validate()?;
    let bias_tokens = spec.bias_tokens();
    let mut last_reason = String::from("no attempts run");

    for attempt in 0..spec.max_attempts {
        let attempt_seed = seed.wrapping_add(attempt as u64);
        match try_attempt(spec, attempt_seed, &bias_tokens) {
            Ok(bundle) => return Ok(bundle),
            Err(AttemptFailure(reason)) => last_reason = reason,
        }
    }
    Err(Error::DegenerateCorpus(format!(
        "no attempt passed verification within {} tries (last failure: {last_reason})",
        spec.max_attempts
    )))
}

struct AttemptFailure(String);

fn try_attempt(
    spec: &PlantedBiasSpec,
    attempt_seed: u64,
    bias_tokens: &BTreeSet<usize>,
) -> std::result::Result<PlantedCorpusBundle, AttemptFailure> {
    build_attempt(spec, attempt_seed, bias_tokens).map_err(|e| match e {
        AttemptError::Failure(f) => f,
        AttemptError::Fatal(err) => AttemptFailure(format!("internal error: {err}")),
    })
}

enum AttemptError {
    Failure(AttemptFailure),
    Fatal(Error),
}

impl From<Error> for AttemptError {
    fn from(e: Error) -> Self {
        AttemptError::Fatal(e)
    }
}

fn fail(reason: impl Into<String>) -> AttemptError {
    AttemptError::Failure(AttemptFailure(reason.into()))
}

fn build_attempt(
    spec: &PlantedBiasSpec,
    attempt_seed: u64,
    bias_tokens: &BTreeSet<usize>,
) -> std::result::Result<PlantedCorpusBundle, AttemptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);
    let base_seed: u64 = rng.random();
    let base = ToyModel::init(spec.dims, base_seed)?;
    let true_subspace = random_subspace(spec.dims.hidden_dim, spec.k_true, &mut rng)?;
    let biased = plant(spec, &base, &true_subspace, bias_tokens, &mut rng)?;

    let base_map = walk_map(&base)?;
    let biased_map = walk_map(&biased)?;
    let t = spec.continuation_len;

    // Prompt-start pool: normal tokens whose clean continuation stays
    // outside the bias region for the full horizon.
    let normal_pool: Vec<usize> = (0..spec.dims.vocab_size - spec.bias_token_count).collect();
    let safe_starts: Vec<usize> = normal_pool
        .iter()
        .copied()
        .filter(|&v| {
            walk_from(&base_map, v, t)
                .iter()
                .all(|tok| !bias_tokens.contains(tok))
        })
        .collect();
    if safe_starts.len() < 4 {
        return Err(fail(format!(
            "only {} clean walk starts available",
            safe_starts.len()
        )));
    }

    let mut pairs = Vec::with_capacity(spec.n_pairs);
    for _ in 0..spec.n_pairs {
        let mut prompt: Vec<usize> = (0..spec.prompt_len - 1)
            .map(|_| normal_pool[rng.random_range(0..normal_pool.len())])
            .collect();
        prompt.push(safe_starts[rng.random_range(0..safe_starts.len())]);
        let last = *prompt.last().expect("prompt is non-empty");
        let truthful = walk_from(&base_map, last, t);
        let hallucinated = walk_from(&biased_map, last, t);
        pairs.push(CorpusPair {
            prompt,
            truthful,
            hallucinated,
        });
    }

    // Verification of the planted pathology.
    let truth_conts: Vec<Vec<usize>> = pairs.iter().map(|p| p.truthful.clone()).collect();
    let hall_conts: Vec<Vec<usize>> = pairs.iter().map(|p| p.hallucinated.clone()).collect();
    let truth_incidence = PairedCorpus::incidence(&truth_conts, bias_tokens);
    if truth_incidence > 0.0 {
        return Err(fail(format!(
            "truthful incidence {truth_incidence:.2} is non-zero"
        )));
    }
    if pairs.iter().any(|p| p.truthful == p.hallucinated) {
        return Err(fail("some pairs have identical continuations"));
    }
    let hall_incidence = PairedCorpus::incidence(&hall_conts, bias_tokens);
    if hall_incidence < 0.8 {
        return Err(fail(format!(
            "hallucinated incidence {hall_incidence:.2} below 0.80"
        )));
    }

    Ok(PlantedCorpusBundle {
        base_model: base,
        biased_model: biased,
        corpus: PairedCorpus {
            pairs,
            bias_tokens: bias_tokens.clone(),
            designated_layer: spec.designated_layer,
            accepted_seed: attempt_seed,
        },
        true_subspace,
    })
}

/// Installs the three planted components into a copy of the clean model.
fn plant(
    spec: &PlantedBiasSpec,
    base: &ToyModel,
    sub: &Subspace,
    bias_tokens: &BTreeSet<usize>,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<ToyModel, AttemptError> {
    let k = spec.k_true;
    let mlp_dim = spec.dims.mlp_dim;
    let mut model = base.clone();

    // 1. Embedding alignment: every row gains a planted-subspace component
    // along a per-token coefficient vector — weak for normal tokens, strong
    // for bias tokens. Bias tokens reuse their coefficients in step 3 so a
    // state carrying a bias token's pattern boosts that token's own logit.
    let mut bias_coeffs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(bias_tokens.len());
    for t in 0..spec.dims.vocab_size {
        let c = random_unit_vector(k, rng);
        let gain = if bias_tokens.contains(&t) {
            bias_coeffs.push((t, c.clone()));
            spec.embed_gain
        } else {
            spec.seed_gain
        };
        let dir = sub.basis().mat_vec(&c)?;
        for (e, v) in model.embed_row_mut(t).iter_mut().zip(&dir) {
            *e += gain * v;
        }
    }

    // 2. Designated-layer amplifier: the last k hidden units become
    // dedicated channels. Read column j of `w1` is read_gain * v_j, so the
    // unit's pre-activation is exactly read_gain * <state, v_j> and dies
    // when the planted subspace is projected out of `w1`; its `w2` row
    // writes the direction back at amp_gain.
    let layer = model.layer_mut(spec.designated_layer);
    for j in 0..k {
        let unit = mlp_dim - k + j;
        for i in 0..spec.dims.hidden_dim {
            layer.w1.set(i, unit, spec.read_gain * sub.basis().get(i, j));
            layer.w2.set(unit, i, spec.amp_gain * sub.basis().get(i, j));
        }
    }

    // 3. Unembedding alignment: bias-token logits read the planted
    // subspace along the same per-token coefficients as their embeddings,
    // while their pre-existing rows shrink so the planted pathway is their
    // dominant route to the top of the logit ranking.
    for (b, c) in &bias_coeffs {
        let dir = sub.basis().mat_vec(c)?;
        for (o, v) in model.unembed_row_mut(*b).iter_mut().zip(&dir) {
            *o = spec.unembed_dampen * *o + spec.unembed_gain * v;
        }
    }
    Ok(model)
}
