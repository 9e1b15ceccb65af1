//! A deterministic toy language model: an embedding table, a stack of
//! position-wise residual MLP blocks (no attention), and an unembedding
//! matrix that produces per-position logits.
//!
//! Each position is processed independently:
//!
//! ```text
//! s_0   = embed[token]
//! s_l+1 = s_l + tanh(s_l W1_l) W2_l      (residual MLP block l)
//! logit = unembed s_L
//! ```
//!
//! The state `s_l` entering block `l`'s MLP is the capture point used for
//! feature extraction, so an edit of `W1_l` acts on exactly the captured
//! representation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{apply_null_projection, build_projector, DenseMatrix, Subspace};

/// Fixed nonlinearity of every MLP block.
fn activation(x: f64) -> f64 {
    x.tanh()
}

/// Shape of a [`ToyModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub num_layers: usize,
}

/// One residual MLP block: `w1` is `hidden_dim x mlp_dim` (input-facing),
/// `w2` is `mlp_dim x hidden_dim` (output-facing).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
}

/// A token sequence with an optional pooling mask. When a mask is present
/// it has one flag per token and selects at least one position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    mask: Option<Vec<bool>>,
}

impl TokenSequence {
    /// A sequence with no mask (all positions pooled).
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        Ok(Self { ids, mask: None })
    }

    /// A sequence with an explicit pooling mask.
    pub fn with_mask(ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if mask.len() != ids.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("mask of length {}", ids.len()),
                got: format!("length {}", mask.len()),
            });
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::InvalidArgument(
                "mask must select at least one position".into(),
            ));
        }
        Ok(Self {
            ids,
            mask: Some(mask),
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True when position `t` participates in pooling.
    pub fn pooled(&self, t: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[t])
    }
}

/// Mean state entering layer `layer`'s MLP, pooled over masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureRecord {
    pub layer: usize,
    pub state: Vec<f64>,
}

/// Result of a forward pass: per-position logits (`T x vocab`) and pooled
/// capture states in ascending layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: DenseMatrix,
    pub captures: Vec<CaptureRecord>,
}

/// The toy model. All weight matrices are finite and mutually consistent
/// in shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    embed: DenseMatrix,
    layers: Vec<MlpLayer>,
    unembed: DenseMatrix,
}

impl ToyModel {
    /// Assembles a model from its weights, validating shape consistency
    /// and finiteness.
    pub fn new(embed: DenseMatrix, layers: Vec<MlpLayer>, unembed: DenseMatrix) -> Result<Self> {
        let d = embed.cols();
        if layers.is_empty() {
            return Err(Error::InvalidSpec("model needs at least one layer".into()));
        }
        if unembed.cols() != d || unembed.rows() != embed.rows() {
            return Err(Error::ShapeMismatch {
                expected: format!("unembed of {}x{}", embed.rows(), d),
                got: format!("{}x{}", unembed.rows(), unembed.cols()),
            });
        }
        let mlp_dim = layers[0].w1.cols();
        for (i, layer) in layers.iter().enumerate() {
            let ok = layer.w1.rows() == d
                && layer.w1.cols() == mlp_dim
                && layer.w2.rows() == mlp_dim
                && layer.w2.cols() == d;
            if !ok {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {i} with w1 {d}x{mlp_dim}, w2 {mlp_dim}x{d}"),
                    got: format!(
                        "w1 {}x{}, w2 {}x{}",
                        layer.w1.rows(),
                        layer.w1.cols(),
                        layer.w2.rows(),
                        layer.w2.cols()
                    ),
                });
            }
            if !layer.w1.is_finite() || !layer.w2.is_finite() {
                return Err(Error::InvalidMatrix);
            }
        }
        if !embed.is_finite() || !unembed.is_finite() {
            return Err(Error::InvalidMatrix);
        }
        Ok(Self {
            embed,
            layers,
            unembed,
        })
    }

    /// Draws a fresh model with i.i.d. Gaussian weights scaled by
    /// `1/sqrt(hidden_dim)` from a seeded generator. The draw order is
    /// fixed (embed, then w1/w2 per layer in depth order, then unembed),
    /// row-major within each matrix, so a given `(dims, seed)` pair always
    /// produces bitwise-identical weights.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.vocab_size == 0 || dims.hidden_dim == 0 || dims.mlp_dim == 0 || dims.num_layers == 0
        {
            return Err(Error::InvalidSpec(
                "all model dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dims.hidden_dim as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| -> Result<DenseMatrix> {
            DenseMatrix::from_fn(rows, cols, |_, _| {
                scale * rng.sample::<f64, _>(StandardNormal)
            })
        };
        let embed = draw(dims.vocab_size, dims.hidden_dim)?;
        let mut layers = Vec::with_capacity(dims.num_layers);
        for _ in 0..dims.num_layers {
            let w1 = draw(dims.hidden_dim, dims.mlp_dim)?;
            let w2 = draw(dims.mlp_dim, dims.hidden_dim)?;
            layers.push(MlpLayer { w1, w2 });
        }
        let unembed = draw(dims.vocab_size, dims.hidden_dim)?;
        Self::new(embed, layers, unembed)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab_size: self.embed.rows(),
            hidden_dim: self.embed.cols(),
            mlp_dim: self.layers[0].w1.cols(),
            num_layers: self.layers.len(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn embed(&self) -> &DenseMatrix {
        &self.embed
    }

    pub fn unembed(&self) -> &DenseMatrix {
        &self.unembed
    }

    pub fn layer(&self, l: usize) -> Result<&MlpLayer> {
        self.layers.get(l).ok_or(Error::InvalidLayer {
            layer: l,
            layers: self.layers.len(),
        })
    }

    pub(crate) fn embed_row_mut(&mut self, id: usize) -> &mut [f64] {
        let d = self.embed.cols();
        &mut self.embed.data_mut()[id * d..(id + 1) * d]
    }

    pub(crate) fn unembed_row_mut(&mut self, id: usize) -> &mut [f64] {
        let d = self.unembed.cols();
        &mut self.unembed.data_mut()[id * d..(id + 1) * d]
    }

    pub(crate) fn layer_mut(&mut self, l: usize) -> &mut MlpLayer {
        &mut self.layers[l]
    }

    fn check_tokens(&self, seq: &TokenSequence) -> Result<()> {
        let vocab = self.vocab_size();
        for &id in seq.ids() {
            if id >= vocab {
                return Err(Error::InvalidToken { id, vocab });
            }
        }
        Ok(())
    }

    /// Runs the model over a sequence, producing per-position logits and
    /// pooled capture states for the requested layers. Capturing never
    /// perturbs the forward computation: logits are bitwise identical with
    /// and without captures.
    pub fn forward(&self, seq: &TokenSequence, capture_layers: &[usize]) -> Result<ForwardOutput> {
        self.check_tokens(seq)?;
        let mut wanted: Vec<usize> = capture_layers.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        if let Some(&bad) = wanted.iter().find(|l| **l >= self.num_layers()) {
            return Err(Error::InvalidLayer {
                layer: bad,
                layers: self.num_layers(),
            });
        }

        let d = self.hidden_dim();
        let t_len = seq.len();
        let mut acc: Vec<Vec<f64>> = wanted.iter().map(|_| vec![0.0; d]).collect();
        let pooled_count = (0..t_len).filter(|t| seq.pooled(*t)).count();
        let mut logits = DenseMatrix::zeros(t_len, self.vocab_size())?;

        for (t, &id) in seq.ids().iter().enumerate() {
            let mut s = self.embed.row(id).to_vec();
            for (l, layer) in self.layers.iter().enumerate() {
                if seq.pooled(t) {
                    if let Ok(pos) = wanted.binary_search(&l) {
                        for (a, v) in acc[pos].iter_mut().zip(&s) {
                            *a += v;
                        }
                    }
                }
                let mut h = layer.w1.vec_mat(&s)?;
                for v in &mut h {
                    *v = activation(*v);
                }
                let m = layer.w2.vec_mat(&h)?;
                for (sv, mv) in s.iter_mut().zip(&m) {
                    *sv += mv;
                }
            }
            let row = self.unembed.mat_vec(&s)?;
            for (y, v) in row.iter().enumerate() {
                logits.set(t, y, *v);
            }
        }

        let captures = wanted
            .into_iter()
            .zip(acc)
            .map(|(layer, mut state)| {
                for v in &mut state {
                    *v /= pooled_count as f64;
                }
                CaptureRecord { layer, state }
            })
            .collect();
        Ok(ForwardOutput { logits, captures })
    }

    /// Returns a copy of the model with layer `l`'s input-facing matrix
    /// replaced by `(I - V V^T) W1`. Only `w1` of that single layer
    /// changes; every other weight is bitwise identical to the original.
    pub fn edit_layer(&self, l: usize, sub: &Subspace) -> Result<ToyModel> {
        if l >= self.num_layers() {
            return Err(Error::InvalidLayer {
                layer: l,
                layers: self.num_layers(),
            });
        }
        if sub.dim() != self.hidden_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("subspace in dimension {}", self.hidden_dim()),
                got: format!("dimension {}", sub.dim()),
            });
        }
        let projector = build_projector(sub)?;
        let mut edited = self.clone();
        edited.layers[l].w1 = apply_null_projection(&projector, &self.layers[l].w1)?;
        Ok(edited)
    }

    /// Greedy decoding: appends the argmax-logit token after the current
    /// last position, `max_new_tokens` times. Ties resolve to the lowest
    /// token id. A pooling mask, if present, is extended with `true` for
    /// generated positions.
    ///
    /// Positions are independent in this architecture, so the next token
    /// depends only on the current last token; decoding is a deterministic
    /// walk on the vocabulary.
    pub fn greedy_decode(&self, prompt: &TokenSequence, max_new_tokens: usize) -> Result<TokenSequence> {
        self.check_tokens(prompt)?;
        let mut ids = prompt.ids().to_vec();
        for _ in 0..max_new_tokens {
            let last = *ids.last().expect("sequence is non-empty");
            let step = TokenSequence::new(vec![last])?;
            let out = self.forward(&step, &[])?;
            ids.push(argmax_lowest(out.logits.row(0)));
        }
        match prompt.mask() {
            Some(mask) => {
                let mut extended = mask.to_vec();
                extended.resize(ids.len(), true);
                TokenSequence::with_mask(ids, extended)
            }
            None => TokenSequence::new(ids),
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
