//! A toy transformer-block language model with per-block activation capture
//! and hand-written analytic gradients.
//!
//! Blocks are pre-norm: `x + attn(ln1(x))` then `r + ffn(ln2(r))`. The model
//! ties the unembedding to the embedding table, and every forward pass is
//! deterministic for a given seed.

mod block;
mod bundle;
mod grad;

pub use block::{BlockCache, LayerNorm, ToyBlock, LN_EPSILON};
pub use bundle::{
    bundle_manifest_path, load_bundle, save_bundle, BundleManifest, BundleModel, ModelBundle,
};
pub use grad::{
    pooled_activation, watermark_loss, watermark_loss_and_grads, watermark_projection, BlockGrads,
    LossParts,
};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, SeededRng};
use serde::{Deserialize, Serialize};

/// Architecture of a toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 {
            return Err(Error::invalid("model needs at least 2 blocks"));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::invalid(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab == 0 || self.ffn == 0 || self.hidden == 0 {
            return Err(Error::invalid("zero-sized model dimension"));
        }
        Ok(())
    }

    /// Flops of one block forward over `tokens` positions (multiply-adds
    /// counted as two ops). Used by the attestation cost model.
    pub fn block_forward_flops(&self, tokens: usize) -> f64 {
        let t = tokens as f64;
        let h = self.hidden as f64;
        let f = self.ffn as f64;
        let qkvo = 4.0 * 2.0 * t * h * h;
        let attn_mix = 2.0 * 2.0 * t * t * h;
        let ffn = 2.0 * 2.0 * t * h * f;
        qkvo + attn_mix + ffn
    }

    /// Per-token inference flops proxy for the whole model (unit context).
    pub fn token_flops(&self) -> f64 {
        let unembed = 2.0 * self.hidden as f64 * self.vocab as f64;
        self.blocks as f64 * self.block_forward_flops(1) + unembed
    }
}

/// Per-block activation outputs of one forward pass.
///
/// `blocks[i]` is the output of block `i`; the checkpoint feeding block `i`
/// is `blocks[i-1]`, or `embedded` for the first block.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub embedded: Matrix,
    pub blocks: Vec<Matrix>,
}

impl ActivationTrace {
    /// Activation consumed by block `i`.
    pub fn input_of(&self, i: usize) -> &Matrix {
        if i == 0 {
            &self.embedded
        } else {
            &self.blocks[i - 1]
        }
    }
}

/// Toy transformer language model.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub shape: ModelShape,
    pub embedding: Matrix,
    pub blocks: Vec<ToyBlock>,
}

impl ToyModel {
    /// Randomly initialized model; fully determined by `(shape, rng)`.
    pub fn random(shape: ModelShape, rng: &mut SeededRng) -> Result<Self> {
        shape.validate()?;
        let embedding = Matrix::random_normal(shape.vocab, shape.hidden, 1.0, rng);
        let blocks = (0..shape.blocks)
            .map(|_| ToyBlock::random(shape.hidden, shape.ffn, shape.heads, rng))
            .collect();
        Ok(ToyModel {
            shape,
            embedding,
            blocks,
        })
    }

    /// Look up embeddings for a token sequence.
    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Matrix> {
        let mut x = Matrix::zeros(tokens.len(), self.shape.hidden);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.shape.vocab {
                return Err(Error::OutOfVocab {
                    token: tok,
                    vocab: self.shape.vocab,
                });
            }
            x.row_mut(t)
                .copy_from_slice(self.embedding.row(tok as usize));
        }
        Ok(x)
    }

    /// Full forward pass; logits are `tokens x vocab` against the tied
    /// embedding. With `capture` the per-block activation trace is returned.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture: bool,
    ) -> Result<(Matrix, Option<ActivationTrace>)> {
        let embedded = self.embed_tokens(tokens)?;
        let mut x = embedded.clone();
        let mut outs = Vec::new();
        for block in &self.blocks {
            x = block.forward(&x)?;
            if capture {
                outs.push(x.clone());
            }
        }
        let logits = x.matmul(&self.embedding.transpose())?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("model forward".into()));
        }
        let trace = capture.then_some(ActivationTrace {
            embedded,
            blocks: outs,
        });
        Ok((logits, trace))
    }
}
