//! Pre-norm transformer block: causal multi-head attention and a GELU FFN.

use crate::error::{Error, Result};
use crate::numkit::{Matrix, SeededRng};

pub const LN_EPSILON: f64 = 1e-5;

/// Per-channel layer normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn unit(width: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; width],
            bias: vec![0.0; width],
        }
    }

    /// Normalize each row to zero mean / unit variance, then scale and shift.
    /// Returns `(output, xhat, inv_std)` so the backward pass can reuse the
    /// normalized values.
    pub fn forward(&self, x: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = Matrix::zeros(rows, cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPSILON).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, self.gain[c] * h + self.bias[c]);
            }
        }
        (out, xhat, inv_std)
    }
}

/// tanh-approximate GELU; smooth everywhere, which keeps finite-difference
/// gradient checks honest.
pub(crate) fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_derivative(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let w = C * (u + 0.044715 * u * u * u);
    let t = w.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// One transformer block. All projection weights are `hidden x hidden`
/// except the FFN pair (`hidden x ffn` and `ffn x hidden`).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock {
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub heads: usize,
    pub residual: bool,
}

/// Intermediate values of one cached forward pass, consumed by backward.
pub struct BlockCache {
    pub x: Matrix,
    pub xhat1: Matrix,
    pub inv1: Vec<f64>,
    pub y1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub ctx: Matrix,
    pub r1: Matrix,
    pub xhat2: Matrix,
    pub inv2: Vec<f64>,
    pub y2: Matrix,
    pub ffn_pre: Matrix,
    pub ffn_act: Matrix,
}

impl ToyBlock {
    pub fn random(hidden: usize, ffn: usize, heads: usize, rng: &mut SeededRng) -> Self {
        let proj_std = 1.0 / (hidden as f64).sqrt();
        let ffn_std = 1.0 / (ffn as f64).sqrt();
        ToyBlock {
            ln1: LayerNorm::unit(hidden),
            ln2: LayerNorm::unit(hidden),
            wq: Matrix::random_normal(hidden, hidden, proj_std, rng),
            wk: Matrix::random_normal(hidden, hidden, proj_std, rng),
            wv: Matrix::random_normal(hidden, hidden, proj_std, rng),
            wo: Matrix::random_normal(hidden, hidden, proj_std, rng),
            w1: Matrix::random_normal(hidden, ffn, proj_std, rng),
            w2: Matrix::random_normal(ffn, hidden, ffn_std, rng),
            heads,
            residual: true,
        }
    }

    /// Zero attention/FFN weights with unit layer norm; the identity map
    /// when residuals are on.
    pub fn zeroed(hidden: usize, ffn: usize, heads: usize) -> Self {
        ToyBlock {
            ln1: LayerNorm::unit(hidden),
            ln2: LayerNorm::unit(hidden),
            wq: Matrix::zeros(hidden, hidden),
            wk: Matrix::zeros(hidden, hidden),
            wv: Matrix::zeros(hidden, hidden),
            wo: Matrix::zeros(hidden, hidden),
            w1: Matrix::zeros(hidden, ffn),
            w2: Matrix::zeros(ffn, hidden),
            heads,
            residual: true,
        }
    }

    pub fn hidden(&self) -> usize {
        self.wq.rows()
    }

    pub fn ffn(&self) -> usize {
        self.w1.cols()
    }

    /// Forward pass from the previous block's activation.
    pub fn forward(&self, prev: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(prev)?.0)
    }

    /// Forward pass that keeps intermediates for the backward pass.
    pub fn forward_cached(&self, prev: &Matrix) -> Result<(Matrix, BlockCache)> {
        let hidden = self.hidden();
        if prev.cols() != hidden {
            return Err(Error::dim(format!(
                "block expects width {hidden}, got {}",
                prev.cols()
            )));
        }
        if hidden % self.heads != 0 {
            return Err(Error::dim(format!(
                "hidden {hidden} not divisible by {} heads",
                self.heads
            )));
        }
        let (y1, xhat1, inv1) = self.ln1.forward(prev);
        let q = y1.matmul(&self.wq)?;
        let k = y1.matmul(&self.wk)?;
        let v = y1.matmul(&self.wv)?;
        let (ctx, probs) = causal_attention(&q, &k, &v, self.heads);
        let attn_out = ctx.matmul(&self.wo)?;
        let r1 = if self.residual {
            prev.add(&attn_out)?
        } else {
            attn_out
        };
        let (y2, xhat2, inv2) = self.ln2.forward(&r1);
        let ffn_pre = y2.matmul(&self.w1)?;
        let ffn_act = ffn_pre.map_entries(gelu);
        let ffn_out = ffn_act.matmul(&self.w2)?;
        let out = if self.residual {
            r1.add(&ffn_out)?
        } else {
            ffn_out
        };
        if !out.is_finite() {
            return Err(Error::NonFinite("block forward".into()));
        }
        let cache = BlockCache {
            x: prev.clone(),
            xhat1,
            inv1,
            y1,
            q,
            k,
            v,
            probs,
            ctx,
            r1,
            xhat2,
            inv2,
            y2,
            ffn_pre,
            ffn_act,
        };
        Ok((out, cache))
    }
}

/// Causal softmax attention; returns the mixed context and the per-head
/// probability matrices for the backward pass.
fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> (Matrix, Vec<Matrix>) {
    let tokens = q.rows();
    let hidden = q.cols();
    let dh = hidden / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(tokens, hidden);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * dh;
        let mut p = Matrix::zeros(tokens, tokens);
        for t in 0..tokens {
            // scores over positions u <= t, with a running max for stability
            let mut scores = Vec::with_capacity(t + 1);
            let mut max = f64::NEG_INFINITY;
            for u in 0..=t {
                let mut s = 0.0;
                for d in 0..dh {
                    s += q.get(t, lo + d) * k.get(u, lo + d);
                }
                s *= scale;
                max = max.max(s);
                scores.push(s);
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for (u, &e) in scores.iter().enumerate() {
                p.set(t, u, e / denom);
            }
            for d in 0..dh {
                let mut acc = 0.0;
                for (u, &pu) in scores.iter().enumerate() {
                    acc += pu / denom * v.get(u, lo + d);
                }
                ctx.set(t, lo + d, acc);
            }
        }
        probs.push(p);
    }
    (ctx, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroed_block_with_residual_is_identity() {
        let block = ToyBlock::zeroed(8, 16, 2);
        let mut rng = SeededRng::new(2);
        let x = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let out = block.forward(&x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn output_finite_for_large_inputs() {
        let mut rng = SeededRng::new(3);
        let block = ToyBlock::random(8, 16, 2, &mut rng);
        let x = Matrix::random_normal(4, 8, 1e3, &mut rng);
        let out = block.forward(&x).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = SeededRng::new(4);
        let block = ToyBlock::random(8, 16, 2, &mut rng);
        let x = Matrix::zeros(4, 9);
        assert!(block.forward(&x).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = SeededRng::new(5);
        let block = ToyBlock::random(8, 16, 2, &mut rng);
        let x = Matrix::random_normal(6, 8, 1.0, &mut rng);
        let (_, cache) = block.forward_cached(&x).unwrap();
        for p in &cache.probs {
            for t in 0..p.rows() {
                let sum: f64 = p.row(t).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                // causal: nothing above the diagonal
                for u in (t + 1)..p.cols() {
                    assert_eq!(p.get(t, u), 0.0);
                }
            }
        }
    }
}
