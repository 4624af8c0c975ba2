//! Reverse-mode gradients through a block, and the watermark embedding loss.
//!
//! The loss for one block is
//!
//! ```text
//!   L = mean_j |proj_j - target_j| + alpha * sum (w - w_ref)^2
//! ```
//!
//! where `proj = WM * pooled[channels]` and `pooled` is the mean activation
//! over trigger samples and token positions. Gradients flow to every block
//! parameter and to the projection matrix; correctness is certified against
//! central finite differences rather than an autodiff framework.

use crate::error::{Error, Result};
use crate::model::block::{gelu_derivative, BlockCache, ToyBlock};
use crate::numkit::Matrix;

/// Loss split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub watermark: f64,
    pub drift: f64,
}

/// Gradients for every trainable parameter of a block.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

impl BlockGrads {
    pub fn zeros(block: &ToyBlock) -> Self {
        let h = block.hidden();
        let f = block.ffn();
        BlockGrads {
            wq: Matrix::zeros(h, h),
            wk: Matrix::zeros(h, h),
            wv: Matrix::zeros(h, h),
            wo: Matrix::zeros(h, h),
            w1: Matrix::zeros(h, f),
            w2: Matrix::zeros(f, h),
            ln1_gain: vec![0.0; h],
            ln1_bias: vec![0.0; h],
            ln2_gain: vec![0.0; h],
            ln2_bias: vec![0.0; h],
        }
    }

    fn accumulate(&mut self, other: &BlockGrads) {
        fn add_m(a: &mut Matrix, b: &Matrix) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        fn add_v(a: &mut [f64], b: &[f64]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        add_m(&mut self.wq, &other.wq);
        add_m(&mut self.wk, &other.wk);
        add_m(&mut self.wv, &other.wv);
        add_m(&mut self.wo, &other.wo);
        add_m(&mut self.w1, &other.w1);
        add_m(&mut self.w2, &other.w2);
        add_v(&mut self.ln1_gain, &other.ln1_gain);
        add_v(&mut self.ln1_bias, &other.ln1_bias);
        add_v(&mut self.ln2_gain, &other.ln2_gain);
        add_v(&mut self.ln2_bias, &other.ln2_bias);
    }
}

impl ToyBlock {
    /// Number of scalar parameters, flattened in canonical order
    /// (wq, wk, wv, wo, w1, w2, ln1 gain/bias, ln2 gain/bias).
    pub fn param_count(&self) -> usize {
        let h = self.hidden();
        let f = self.ffn();
        4 * h * h + 2 * h * f + 4 * h
    }

    pub fn get_param(&self, idx: usize) -> f64 {
        let (tensor, offset) = self.locate(idx);
        match tensor {
            0 => self.wq.data()[offset],
            1 => self.wk.data()[offset],
            2 => self.wv.data()[offset],
            3 => self.wo.data()[offset],
            4 => self.w1.data()[offset],
            5 => self.w2.data()[offset],
            6 => self.ln1.gain[offset],
            7 => self.ln1.bias[offset],
            8 => self.ln2.gain[offset],
            _ => self.ln2.bias[offset],
        }
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        let (tensor, offset) = self.locate(idx);
        match tensor {
            0 => self.wq.data_mut()[offset] = v,
            1 => self.wk.data_mut()[offset] = v,
            2 => self.wv.data_mut()[offset] = v,
            3 => self.wo.data_mut()[offset] = v,
            4 => self.w1.data_mut()[offset] = v,
            5 => self.w2.data_mut()[offset] = v,
            6 => self.ln1.gain[offset] = v,
            7 => self.ln1.bias[offset] = v,
            8 => self.ln2.gain[offset] = v,
            _ => self.ln2.bias[offset] = v,
        }
    }

    fn locate(&self, idx: usize) -> (usize, usize) {
        let h = self.hidden();
        let f = self.ffn();
        let sizes = [h * h, h * h, h * h, h * h, h * f, f * h, h, h, h, h];
        let mut rem = idx;
        for (tensor, &size) in sizes.iter().enumerate() {
            if rem < size {
                return (tensor, rem);
            }
            rem -= size;
        }
        panic!("parameter index {idx} out of range");
    }

    /// Squared parameter distance to `other` over all trainable parameters.
    pub fn drift_sq(&self, other: &ToyBlock) -> f64 {
        fn m(a: &Matrix, b: &Matrix) -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum()
        }
        fn v(a: &[f64], b: &[f64]) -> f64 {
            a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
        }
        m(&self.wq, &other.wq)
            + m(&self.wk, &other.wk)
            + m(&self.wv, &other.wv)
            + m(&self.wo, &other.wo)
            + m(&self.w1, &other.w1)
            + m(&self.w2, &other.w2)
            + v(&self.ln1.gain, &other.ln1.gain)
            + v(&self.ln1.bias, &other.ln1.bias)
            + v(&self.ln2.gain, &other.ln2.gain)
            + v(&self.ln2.bias, &other.ln2.bias)
    }

    /// In-place `w += scale * g` over all parameters.
    pub fn apply_scaled(&mut self, grads: &BlockGrads, scale: f64) {
        fn ap_m(w: &mut Matrix, g: &Matrix, s: f64) {
            for (x, y) in w.data_mut().iter_mut().zip(g.data()) {
                *x += s * y;
            }
        }
        fn ap_v(w: &mut [f64], g: &[f64], s: f64) {
            for (x, y) in w.iter_mut().zip(g) {
                *x += s * y;
            }
        }
        ap_m(&mut self.wq, &grads.wq, scale);
        ap_m(&mut self.wk, &grads.wk, scale);
        ap_m(&mut self.wv, &grads.wv, scale);
        ap_m(&mut self.wo, &grads.wo, scale);
        ap_m(&mut self.w1, &grads.w1, scale);
        ap_m(&mut self.w2, &grads.w2, scale);
        ap_v(&mut self.ln1.gain, &grads.ln1_gain, scale);
        ap_v(&mut self.ln1.bias, &grads.ln1_bias, scale);
        ap_v(&mut self.ln2.gain, &grads.ln2_gain, scale);
        ap_v(&mut self.ln2.bias, &grads.ln2_bias, scale);
    }

    /// Backward pass for one sample. `d_out` is dL/d(block output); returns
    /// parameter gradients (input gradients are not needed: embedding uses
    /// frozen upstream checkpoints).
    pub fn backward(&self, cache: &BlockCache, d_out: &Matrix) -> BlockGrads {
        let tokens = cache.x.rows();
        let hidden = self.hidden();
        let heads = self.heads;
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = BlockGrads::zeros(self);

        // out = r1 + ffn_out
        let d_ffn_out = d_out;
        let mut d_r1 = if self.residual {
            d_out.clone()
        } else {
            Matrix::zeros(tokens, hidden)
        };

        // ffn_out = gelu(y2 w1) w2
        let ffn_act_t = cache.ffn_act.transpose();
        grads.w2 = ffn_act_t.matmul(d_ffn_out).expect("shape");
        let d_ffn_act = d_ffn_out.matmul(&self.w2.transpose()).expect("shape");
        let mut d_ffn_pre = d_ffn_act;
        for (g, &pre) in d_ffn_pre.data_mut().iter_mut().zip(cache.ffn_pre.data()) {
            *g *= gelu_derivative(pre);
        }
        grads.w1 = cache.y2.transpose().matmul(&d_ffn_pre).expect("shape");
        let d_y2 = d_ffn_pre.matmul(&self.w1.transpose()).expect("shape");

        // ln2
        let d_r1_ln = layer_norm_backward(
            &d_y2,
            &cache.xhat2,
            &cache.inv2,
            &self.ln2.gain,
            &mut grads.ln2_gain,
            &mut grads.ln2_bias,
        );
        d_r1 = d_r1.add(&d_r1_ln).expect("shape");

        // r1 = x + ctx wo
        let d_attn_out = &d_r1;
        grads.wo = cache.ctx.transpose().matmul(d_attn_out).expect("shape");
        let d_ctx = d_attn_out.matmul(&self.wo.transpose()).expect("shape");

        // attention backward per head
        let mut d_q = Matrix::zeros(tokens, hidden);
        let mut d_k = Matrix::zeros(tokens, hidden);
        let mut d_v = Matrix::zeros(tokens, hidden);
        for h in 0..heads {
            let lo = h * dh;
            let p = &cache.probs[h];
            // d_p[t,u] = sum_d d_ctx[t, lo+d] * v[u, lo+d]
            // d_v[u]  += sum_t p[t,u] * d_ctx[t]
            let mut d_p = Matrix::zeros(tokens, tokens);
            for t in 0..tokens {
                for u in 0..=t {
                    let mut acc = 0.0;
                    for d in 0..dh {
                        acc += d_ctx.get(t, lo + d) * cache.v.get(u, lo + d);
                    }
                    d_p.set(t, u, acc);
                    let pu = p.get(t, u);
                    for d in 0..dh {
                        let dv = d_v.get(u, lo + d) + pu * d_ctx.get(t, lo + d);
                        d_v.set(u, lo + d, dv);
                    }
                }
            }
            // softmax backward: d_s = p .* (d_p - rowdot(d_p, p))
            for t in 0..tokens {
                let mut rowdot = 0.0;
                for u in 0..=t {
                    rowdot += d_p.get(t, u) * p.get(t, u);
                }
                for u in 0..=t {
                    let ds = p.get(t, u) * (d_p.get(t, u) - rowdot) * scale;
                    // scores s[t,u] = q[t].k[u] * scale
                    for d in 0..dh {
                        let dq = d_q.get(t, lo + d) + ds * cache.k.get(u, lo + d);
                        d_q.set(t, lo + d, dq);
                        let dk = d_k.get(u, lo + d) + ds * cache.q.get(t, lo + d);
                        d_k.set(u, lo + d, dk);
                    }
                }
            }
        }

        let y1_t = cache.y1.transpose();
        grads.wq = y1_t.matmul(&d_q).expect("shape");
        grads.wk = y1_t.matmul(&d_k).expect("shape");
        grads.wv = y1_t.matmul(&d_v).expect("shape");
        let d_y1 = d_q
            .matmul(&self.wq.transpose())
            .expect("shape")
            .add(&d_k.matmul(&self.wk.transpose()).expect("shape"))
            .expect("shape")
            .add(&d_v.matmul(&self.wv.transpose()).expect("shape"))
            .expect("shape");

        // ln1 (input gradient discarded)
        let _ = layer_norm_backward(
            &d_y1,
            &cache.xhat1,
            &cache.inv1,
            &self.ln1.gain,
            &mut grads.ln1_gain,
            &mut grads.ln1_bias,
        );
        grads
    }
}

/// Backward through layer norm; accumulates gain/bias gradients and returns
/// the input gradient.
fn layer_norm_backward(
    d_y: &Matrix,
    xhat: &Matrix,
    inv_std: &[f64],
    gain: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) -> Matrix {
    let (rows, cols) = (d_y.rows(), d_y.cols());
    let n = cols as f64;
    let mut d_x = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..cols {
            let dxh = d_y.get(r, c) * gain[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat.get(r, c);
            d_gain[c] += d_y.get(r, c) * xhat.get(r, c);
            d_bias[c] += d_y.get(r, c);
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for c in 0..cols {
            let dxh = d_y.get(r, c) * gain[c];
            d_x.set(
                r,
                c,
                inv_std[r] * (dxh - mean_dxhat - xhat.get(r, c) * mean_dxhat_xhat),
            );
        }
    }
    d_x
}

/// Mean activation per channel over trigger samples and token positions.
pub fn pooled_activation(outputs: &[Matrix]) -> Vec<f64> {
    assert!(!outputs.is_empty(), "no activations to pool");
    let cols = outputs[0].cols();
    let mut acc = vec![0.0; cols];
    let mut count = 0usize;
    for out in outputs {
        for r in 0..out.rows() {
            for (a, &v) in acc.iter_mut().zip(out.row(r)) {
                *a += v;
            }
        }
        count += out.rows();
    }
    let n = count.max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Projection of the pooled, channel-selected activations of `block` run on
/// each checkpoint in `prevs`.
pub fn watermark_projection(
    block: &ToyBlock,
    prevs: &[Matrix],
    channels: &[usize],
    projection: &Matrix,
) -> Result<Vec<f64>> {
    if projection.cols() != channels.len() {
        return Err(Error::dim(format!(
            "projection has {} columns for {} channels",
            projection.cols(),
            channels.len()
        )));
    }
    let outs: Vec<Matrix> = prevs
        .iter()
        .map(|p| block.forward(p))
        .collect::<Result<_>>()?;
    let pooled = pooled_activation(&outs);
    let sel: Vec<f64> = channels.iter().map(|&c| pooled[c]).collect();
    Ok(project(projection, &sel))
}

fn project(projection: &Matrix, sel: &[f64]) -> Vec<f64> {
    (0..projection.rows())
        .map(|j| {
            projection
                .row(j)
                .iter()
                .zip(sel)
                .map(|(&w, &s)| w * s)
                .sum()
        })
        .collect()
}

fn watermark_term(proj: &[f64], targets: &[f64]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    proj.iter()
        .zip(targets)
        .map(|(&p, &t)| (p - t).abs())
        .sum::<f64>()
        / targets.len() as f64
}

/// Loss only: watermark term plus `alpha` times squared drift from
/// `reference`.
pub fn watermark_loss(
    block: &ToyBlock,
    projection: &Matrix,
    prevs: &[Matrix],
    channels: &[usize],
    targets: &[f64],
    alpha: f64,
    reference: &ToyBlock,
) -> Result<LossParts> {
    let proj = watermark_projection(block, prevs, channels, projection)?;
    let wm = watermark_term(&proj, targets);
    let drift = block.drift_sq(reference);
    let total = wm + alpha * drift;
    if !total.is_finite() {
        return Err(Error::NonFinite("watermark loss".into()));
    }
    Ok(LossParts {
        total,
        watermark: wm,
        drift,
    })
}

/// Loss and analytic gradients for the block and the projection matrix.
pub fn watermark_loss_and_grads(
    block: &ToyBlock,
    projection: &Matrix,
    prevs: &[Matrix],
    channels: &[usize],
    targets: &[f64],
    alpha: f64,
    reference: &ToyBlock,
) -> Result<(LossParts, BlockGrads, Matrix)> {
    if alpha < 0.0 {
        return Err(Error::invalid("alpha must be nonnegative"));
    }
    if projection.rows() != targets.len() {
        return Err(Error::dim(format!(
            "projection has {} rows for {} targets",
            projection.rows(),
            targets.len()
        )));
    }
    let caches: Vec<(Matrix, BlockCache)> = prevs
        .iter()
        .map(|p| block.forward_cached(p))
        .collect::<Result<_>>()?;
    let outs: Vec<Matrix> = caches.iter().map(|(o, _)| o.clone()).collect();
    let pooled = pooled_activation(&outs);
    let sel: Vec<f64> = channels.iter().map(|&c| pooled[c]).collect();
    let proj = project(projection, &sel);
    let wm = watermark_term(&proj, targets);
    let drift = block.drift_sq(reference);
    let total = wm + alpha * drift;
    if !total.is_finite() {
        return Err(Error::NonFinite("watermark loss".into()));
    }

    let bits = targets.len();
    // dL/dproj_j: L1 subgradient, zero exactly at the target
    let d_proj: Vec<f64> = proj
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            if p > t {
                1.0 / bits as f64
            } else if p < t {
                -1.0 / bits as f64
            } else {
                0.0
            }
        })
        .collect();

    // dL/dWM[j,c] = d_proj_j * sel_c
    let mut d_projection = Matrix::zeros(projection.rows(), projection.cols());
    for (j, &dj) in d_proj.iter().enumerate() {
        for (c, &s) in sel.iter().enumerate() {
            d_projection.set(j, c, dj * s);
        }
    }

    // dL/dpooled through the channel gather
    let mut d_pooled = vec![0.0; pooled.len()];
    for (c, &ch) in channels.iter().enumerate() {
        let mut acc = 0.0;
        for (j, &dj) in d_proj.iter().enumerate() {
            acc += dj * projection.get(j, c);
        }
        d_pooled[ch] += acc;
    }

    // pooled averages over every token of every sample
    let total_rows: usize = prevs.iter().map(|p| p.rows()).sum();
    let inv_rows = 1.0 / total_rows.max(1) as f64;
    let mut grads = BlockGrads::zeros(block);
    for (_, cache) in &caches {
        let rows = cache.x.rows();
        let mut d_out = Matrix::zeros(rows, pooled.len());
        for r in 0..rows {
            for (c, &dp) in d_pooled.iter().enumerate() {
                d_out.set(r, c, dp * inv_rows);
            }
        }
        grads.accumulate(&block.backward(cache, &d_out));
    }

    // drift term: d/dw alpha*(w - w_ref)^2
    if alpha > 0.0 {
        let mut drift_grads = BlockGrads::zeros(block);
        fn dm(out: &mut Matrix, w: &Matrix, r: &Matrix, alpha: f64) {
            for ((o, &a), &b) in out.data_mut().iter_mut().zip(w.data()).zip(r.data()) {
                *o = 2.0 * alpha * (a - b);
            }
        }
        fn dv(out: &mut [f64], w: &[f64], r: &[f64], alpha: f64) {
            for ((o, &a), &b) in out.iter_mut().zip(w).zip(r) {
                *o = 2.0 * alpha * (a - b);
            }
        }
        dm(&mut drift_grads.wq, &block.wq, &reference.wq, alpha);
        dm(&mut drift_grads.wk, &block.wk, &reference.wk, alpha);
        dm(&mut drift_grads.wv, &block.wv, &reference.wv, alpha);
        dm(&mut drift_grads.wo, &block.wo, &reference.wo, alpha);
        dm(&mut drift_grads.w1, &block.w1, &reference.w1, alpha);
        dm(&mut drift_grads.w2, &block.w2, &reference.w2, alpha);
        dv(&mut drift_grads.ln1_gain, &block.ln1.gain, &reference.ln1.gain, alpha);
        dv(&mut drift_grads.ln1_bias, &block.ln1.bias, &reference.ln1.bias, alpha);
        dv(&mut drift_grads.ln2_gain, &block.ln2.gain, &reference.ln2.gain, alpha);
        dv(&mut drift_grads.ln2_bias, &block.ln2.bias, &reference.ln2.bias, alpha);
        grads.accumulate(&drift_grads);
    }

    Ok((
        LossParts {
            total,
            watermark: wm,
            drift,
        },
        grads,
        d_projection,
    ))
}

impl BlockGrads {
    /// Gradient for the canonical flat parameter index (same order as
    /// `ToyBlock::get_param`).
    pub fn get(&self, block: &ToyBlock, idx: usize) -> f64 {
        let h = block.hidden();
        let f = block.ffn();
        let sizes = [h * h, h * h, h * h, h * h, h * f, f * h, h, h, h, h];
        let mut rem = idx;
        for (tensor, &size) in sizes.iter().enumerate() {
            if rem < size {
                return match tensor {
                    0 => self.wq.data()[rem],
                    1 => self.wk.data()[rem],
                    2 => self.wv.data()[rem],
                    3 => self.wo.data()[rem],
                    4 => self.w1.data()[rem],
                    5 => self.w2.data()[rem],
                    6 => self.ln1_gain[rem],
                    7 => self.ln1_bias[rem],
                    8 => self.ln2_gain[rem],
                    _ => self.ln2_bias[rem],
                };
            }
            rem -= size;
        }
        panic!("parameter index {idx} out of range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::SeededRng;

    fn setup(
        seed: u64,
        bits: usize,
    ) -> (ToyBlock, Matrix, Vec<Matrix>, Vec<usize>, Vec<f64>, ToyBlock) {
        let mut rng = SeededRng::new(seed);
        let block = ToyBlock::random(8, 16, 2, &mut rng);
        let reference = block.clone();
        let projection = Matrix::random_normal(bits, 3, 1.0, &mut rng);
        let prevs = vec![
            Matrix::random_normal(4, 8, 1.0, &mut rng),
            Matrix::random_normal(4, 8, 1.0, &mut rng),
        ];
        let channels = vec![1, 4, 6];
        let targets: Vec<f64> = (0..bits).map(|_| rng.rademacher()).collect();
        (block, projection, prevs, channels, targets, reference)
    }

    #[test]
    fn loss_zero_when_targets_met_and_no_drift() {
        let (block, _, prevs, channels, _, reference) = setup(1, 2);
        // construct a projection row that lands exactly on +1
        let outs: Vec<Matrix> = prevs.iter().map(|p| block.forward(p).unwrap()).collect();
        let pooled = pooled_activation(&outs);
        let sel: Vec<f64> = channels.iter().map(|&c| pooled[c]).collect();
        let norm_sq: f64 = sel.iter().map(|s| s * s).sum();
        let row: Vec<f64> = sel.iter().map(|s| s / norm_sq).collect();
        let projection = Matrix::from_vec(1, 3, row).unwrap();
        let targets = vec![1.0];
        let (loss, grads, _) = watermark_loss_and_grads(
            &block,
            &projection,
            &prevs,
            &channels,
            &targets,
            1e-3,
            &reference,
        )
        .unwrap();
        assert!(loss.watermark < 1e-12);
        assert!(loss.drift == 0.0);
        // at exact equality the subgradient is zero everywhere
        for i in [0usize, 7, 100, 200] {
            assert_eq!(grads.get(&block, i), 0.0);
        }
    }

    #[test]
    fn doubling_projection_doubles_projections() {
        let (block, projection, prevs, channels, _, _) = setup(2, 3);
        let p1 = watermark_projection(&block, &prevs, &channels, &projection).unwrap();
        let p2 = watermark_projection(&block, &prevs, &channels, &projection.scale(2.0)).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_zero_reduces_to_pure_watermark_term() {
        let (block, projection, prevs, channels, targets, _) = setup(3, 2);
        let mut moved = block.clone();
        // introduce drift so the alpha term would be visible
        let w = moved.wq.get(0, 0);
        moved.wq.set(0, 0, w + 0.5);
        let loss = watermark_loss(
            &moved,
            &projection,
            &prevs,
            &channels,
            &targets,
            0.0,
            &block,
        )
        .unwrap();
        assert!(loss.drift > 0.0);
        assert_eq!(loss.total, loss.watermark);
    }

    /// Central finite differences over a spread of parameter coordinates;
    /// this is the oracle that certifies the hand-written backward pass.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (block, projection, prevs, channels, targets, reference) = setup(7, 2);
        let alpha = 1e-3;
        let (_, grads, d_projection) = watermark_loss_and_grads(
            &block,
            &projection,
            &prevs,
            &channels,
            &targets,
            alpha,
            &reference,
        )
        .unwrap();

        let eval = |b: &ToyBlock, wm: &Matrix| {
            watermark_loss(b, wm, &prevs, &channels, &targets, alpha, &reference)
                .unwrap()
                .total
        };

        let step = 1e-5;
        let count = block.param_count();
        let mut rng = SeededRng::new(70);
        let mut checked = 0;
        let mut max_rel: f64 = 0.0;
        while checked < 120 {
            let idx = rng.below(count);
            let orig = block.get_param(idx);
            let mut plus = block.clone();
            plus.set_param(idx, orig + step);
            let mut minus = block.clone();
            minus.set_param(idx, orig - step);
            let numeric = (eval(&plus, &projection) - eval(&minus, &projection)) / (2.0 * step);
            let analytic = grads.get(&block, idx);
            if numeric.abs() < 1e-10 && analytic.abs() < 1e-10 {
                continue; // both zero: coordinate does not influence the loss
            }
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
            max_rel = max_rel.max(rel);
            assert!(
                rel < 1e-4,
                "param {idx}: analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.3e})"
            );
            checked += 1;
        }
        // projection matrix gradient
        for j in 0..projection.rows() {
            for c in 0..projection.cols() {
                let mut plus = projection.clone();
                plus.set(j, c, projection.get(j, c) + step);
                let mut minus = projection.clone();
                minus.set(j, c, projection.get(j, c) - step);
                let numeric = (eval(&block, &plus) - eval(&block, &minus)) / (2.0 * step);
                let analytic = d_projection.get(j, c);
                if numeric.abs() < 1e-10 && analytic.abs() < 1e-10 {
                    continue;
                }
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
                assert!(rel < 1e-4, "WM[{j},{c}]: rel {rel:.3e}");
            }
        }
        assert!(max_rel < 1e-4, "worst relative error {max_rel:.3e}");
    }
}
