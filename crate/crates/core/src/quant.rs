//! Post-training INT8/INT4 quantization of toy blocks.
//!
//! Weight matrices are quantized per output channel (column) with a
//! symmetric affine scheme: `q = round_ties_even(w / scale)` clamped to the
//! signed range, `scale = max|column| / qmax`, zero point 0. Layer-norm
//! parameters stay full precision. Zeroth-order updates operate directly in
//! integer step space so the weights never leave the grid.

use crate::error::{Error, Result};
use crate::model::{ActivationTrace, LayerNorm, ModelShape, ToyBlock, ToyModel};
use crate::numkit::Matrix;
use serde::{Deserialize, Serialize};

/// Scales for all-zero channels are floored here so dequantization is
/// well-defined.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitWidth {
    Int8,
    Int4,
}

impl BitWidth {
    pub fn bits(self) -> u8 {
        match self {
            BitWidth::Int8 => 8,
            BitWidth::Int4 => 4,
        }
    }

    /// Symmetric integer range is [-qmax, qmax].
    pub fn qmax(self) -> i32 {
        match self {
            BitWidth::Int8 => 127,
            BitWidth::Int4 => 7,
        }
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            8 => Ok(BitWidth::Int8),
            4 => Ok(BitWidth::Int4),
            other => Err(Error::invalid(format!("unsupported bit width {other}"))),
        }
    }
}

/// One weight matrix on the integer grid, with per-column scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    /// Row-major integers in [-qmax, qmax]; INT4 values also live in `i8`
    /// in memory and are nibble-packed only on disk.
    q: Vec<i8>,
    /// One positive scale per output channel (column), stored as the f32 it
    /// serializes to.
    scales: Vec<f32>,
    bits: BitWidth,
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[i8] {
        &self.q
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn from_parts(
        rows: usize,
        cols: usize,
        q: Vec<i8>,
        scales: Vec<f32>,
        bits: BitWidth,
    ) -> Result<Self> {
        if q.len() != rows * cols || scales.len() != cols {
            return Err(Error::Format("quantized tensor shape mismatch".into()));
        }
        let qmax = bits.qmax() as i8;
        if q.iter().any(|&v| v < -qmax || v > qmax) {
            return Err(Error::Format("quantized value out of range".into()));
        }
        Ok(QuantizedTensor {
            rows,
            cols,
            q,
            scales,
            bits,
        })
    }

    pub fn dequantize(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = self.q[r * self.cols + c] as f64 * self.scales[c] as f64;
                m.set(r, c, v);
            }
        }
        m
    }
}

/// Quantize one matrix per output channel.
pub fn quantize_tensor(w: &Matrix, bits: BitWidth) -> QuantizedTensor {
    let qmax = bits.qmax();
    let (rows, cols) = (w.rows(), w.cols());
    let mut scales = vec![0.0f32; cols];
    for c in 0..cols {
        let mut max_abs = 0.0f64;
        for r in 0..rows {
            max_abs = max_abs.max(w.get(r, c).abs());
        }
        scales[c] = (max_abs / qmax as f64).max(SCALE_FLOOR) as f32;
    }
    let mut q = vec![0i8; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let scaled = w.get(r, c) / scales[c] as f64;
            let rounded = scaled.round_ties_even().clamp(-(qmax as f64), qmax as f64);
            q[r * cols + c] = rounded as i8;
        }
    }
    QuantizedTensor {
        rows,
        cols,
        q,
        scales,
        bits,
    }
}

/// A block on the integer grid; layer norm stays full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub wq: QuantizedTensor,
    pub wk: QuantizedTensor,
    pub wv: QuantizedTensor,
    pub wo: QuantizedTensor,
    pub w1: QuantizedTensor,
    pub w2: QuantizedTensor,
    pub heads: usize,
    pub residual: bool,
    pub bits: BitWidth,
}

/// Round-to-nearest-even per-channel symmetric quantization of a block.
pub fn quantize_block(block: &ToyBlock, bits: BitWidth) -> QuantizedBlock {
    QuantizedBlock {
        ln1: block.ln1.clone(),
        ln2: block.ln2.clone(),
        wq: quantize_tensor(&block.wq, bits),
        wk: quantize_tensor(&block.wk, bits),
        wv: quantize_tensor(&block.wv, bits),
        wo: quantize_tensor(&block.wo, bits),
        w1: quantize_tensor(&block.w1, bits),
        w2: quantize_tensor(&block.w2, bits),
        heads: block.heads,
        residual: block.residual,
        bits,
    }
}

impl QuantizedBlock {
    /// Reconstruct a full-precision block from the grid.
    pub fn dequantize(&self) -> ToyBlock {
        ToyBlock {
            ln1: self.ln1.clone(),
            ln2: self.ln2.clone(),
            wq: self.wq.dequantize(),
            wk: self.wk.dequantize(),
            wv: self.wv.dequantize(),
            wo: self.wo.dequantize(),
            w1: self.w1.dequantize(),
            w2: self.w2.dequantize(),
            heads: self.heads,
            residual: self.residual,
        }
    }

    /// Identical contract to `ToyBlock::forward` on the dequantized weights.
    pub fn forward(&self, prev: &Matrix) -> Result<Matrix> {
        self.dequantize().forward(prev)
    }

    /// Number of integer parameters (the six weight matrices, canonical
    /// order; layer norm is not on the grid).
    pub fn grid_param_count(&self) -> usize {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2]
            .iter()
            .map(|t| t.q.len())
            .sum()
    }

    fn tensor_sizes(&self) -> [usize; 6] {
        [
            self.wq.q.len(),
            self.wk.q.len(),
            self.wv.q.len(),
            self.wo.q.len(),
            self.w1.q.len(),
            self.w2.q.len(),
        ]
    }

    fn tensor_mut(&mut self, t: usize) -> &mut QuantizedTensor {
        match t {
            0 => &mut self.wq,
            1 => &mut self.wk,
            2 => &mut self.wv,
            3 => &mut self.wo,
            4 => &mut self.w1,
            _ => &mut self.w2,
        }
    }

    /// Column (output channel) a flat grid index belongs to, and which of
    /// the six tensors it lives in.
    pub fn locate_grid(&self, idx: usize) -> (usize, usize, usize) {
        let sizes = self.tensor_sizes();
        let cols = [
            self.wq.cols,
            self.wk.cols,
            self.wv.cols,
            self.wo.cols,
            self.w1.cols,
            self.w2.cols,
        ];
        let mut rem = idx;
        for (t, &size) in sizes.iter().enumerate() {
            if rem < size {
                return (t, rem, rem % cols[t]);
            }
            rem -= size;
        }
        panic!("grid index {idx} out of range");
    }

    /// Flat grid indices of all entries whose output channel is in
    /// `channels`, restricted to the tensors that write those channels
    /// directly (the attention output and second FFN projections).
    pub fn output_aligned_indices(&self, channels: &[usize]) -> Vec<usize> {
        let sizes = self.tensor_sizes();
        let offset_wo: usize = sizes[..3].iter().sum();
        let offset_w2: usize = sizes[..5].iter().sum();
        let mut out = Vec::new();
        for r in 0..self.wo.rows {
            for &c in channels {
                out.push(offset_wo + r * self.wo.cols + c);
            }
        }
        for r in 0..self.w2.rows {
            for &c in channels {
                out.push(offset_w2 + r * self.w2.cols + c);
            }
        }
        out
    }
}

/// A whole model with quantized blocks; the embedding table stays full
/// precision.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub shape: ModelShape,
    pub embedding: Matrix,
    pub blocks: Vec<QuantizedBlock>,
    pub bits: BitWidth,
}

impl QuantizedModel {
    pub fn from_model(model: &ToyModel, bits: BitWidth) -> QuantizedModel {
        QuantizedModel {
            shape: model.shape,
            embedding: model.embedding.roundtrip_f32(),
            blocks: model
                .blocks
                .iter()
                .map(|b| quantize_block(b, bits))
                .collect(),
            bits,
        }
    }

    /// Dequantize every block into a full-precision model.
    pub fn dequantize(&self) -> ToyModel {
        ToyModel {
            shape: self.shape,
            embedding: self.embedding.clone(),
            blocks: self.blocks.iter().map(|b| b.dequantize()).collect(),
        }
    }

    /// Forward pass through the dequantized weights.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture: bool,
    ) -> Result<(Matrix, Option<ActivationTrace>)> {
        self.dequantize().forward(tokens, capture)
    }
}

/// Shift the selected grid entries by whole quantization steps, clamping to
/// the bit-width range. Scales are untouched.
pub fn perturb_quantized(
    qblock: &QuantizedBlock,
    indices: &[usize],
    deltas: &[i32],
) -> Result<QuantizedBlock> {
    if indices.len() != deltas.len() {
        return Err(Error::invalid("indices and deltas differ in length"));
    }
    let total = qblock.grid_param_count();
    let qmax = qblock.bits.qmax();
    let mut out = qblock.clone();
    for (&idx, &delta) in indices.iter().zip(deltas) {
        if idx >= total {
            return Err(Error::invalid(format!("grid index {idx} out of range")));
        }
        let (t, offset, _) = out.locate_grid(idx);
        let tensor = out.tensor_mut(t);
        let v = tensor.q[offset] as i32 + delta;
        tensor.q[offset] = v.clamp(-qmax, qmax) as i8;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::SeededRng;

    #[test]
    fn all_zero_weights_quantize_to_zero_point() {
        let w = Matrix::zeros(4, 3);
        let q = quantize_tensor(&w, BitWidth::Int8);
        assert!(q.values().iter().all(|&v| v == 0));
        assert!(q.dequantize().data().iter().all(|&v| v == 0.0));
        assert!(q.scales().iter().all(|&s| s == SCALE_FLOOR as f32));
    }

    #[test]
    fn int8_half_scale_value_rounds_to_64() {
        // channel spanning [-1, 1]: scale = 1/127, 0.5/scale = 63.5 which
        // rounds to even = 64, dequantizing to 64/127
        let w = Matrix::from_vec(3, 1, vec![1.0, -1.0, 0.5]).unwrap();
        let q = quantize_tensor(&w, BitWidth::Int8);
        assert_eq!(q.values(), &[127, -127, 64]);
        let deq = q.dequantize();
        assert!((deq.get(2, 0) - 64.0 / 127.0).abs() < 1e-6);
        assert!((deq.get(2, 0) - 0.50394).abs() < 1e-4);
    }

    #[test]
    fn round_trip_error_bounded_by_half_scale() {
        let mut rng = SeededRng::new(8);
        for trial in 0..10 {
            let bits = if trial % 2 == 0 {
                BitWidth::Int8
            } else {
                BitWidth::Int4
            };
            let block = ToyBlock::random(8, 16, 2, &mut rng);
            let q = quantize_block(&block, bits);
            let deq = q.dequantize();
            for (orig, (qt, dt)) in [
                (&block.wq, (&q.wq, &deq.wq)),
                (&block.w1, (&q.w1, &deq.w1)),
                (&block.w2, (&q.w2, &deq.w2)),
            ] {
                for r in 0..orig.rows() {
                    for c in 0..orig.cols() {
                        let err = (orig.get(r, c) - dt.get(r, c)).abs();
                        let bound = qt.scales()[c] as f64 / 2.0 + 1e-12;
                        assert!(err <= bound, "trial {trial}: err {err} > {bound}");
                    }
                }
            }
        }
    }

    #[test]
    fn quantization_is_idempotent() {
        let mut rng = SeededRng::new(9);
        let block = ToyBlock::random(8, 16, 2, &mut rng);
        for bits in [BitWidth::Int8, BitWidth::Int4] {
            let q1 = quantize_block(&block, bits);
            let q2 = quantize_block(&q1.dequantize(), bits);
            assert_eq!(q1.wq.values(), q2.wq.values());
            assert_eq!(q1.w2.values(), q2.w2.values());
        }
    }

    #[test]
    fn dequantized_forward_equals_block_forward_on_dequantized_weights() {
        let mut rng = SeededRng::new(10);
        let block = ToyBlock::random(8, 16, 2, &mut rng);
        let q = quantize_block(&block, BitWidth::Int8);
        let x = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let via_q = q.forward(&x).unwrap();
        let via_deq = q.dequantize().forward(&x).unwrap();
        assert_eq!(via_q, via_deq);
    }

    #[test]
    fn int4_degrades_more_than_int8() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(20 + seed);
            let block = ToyBlock::random(8, 16, 2, &mut rng);
            let x = Matrix::random_normal(6, 8, 1.0, &mut rng);
            let full = block.forward(&x).unwrap();
            let out8 = quantize_block(&block, BitWidth::Int8).forward(&x).unwrap();
            let out4 = quantize_block(&block, BitWidth::Int4).forward(&x).unwrap();
            let d8 = full.linf_distance(&out8);
            let d4 = full.linf_distance(&out4);
            assert!(d4 > d8, "seed {seed}: int4 {d4} <= int8 {d8}");
        }
    }

    #[test]
    fn perturb_zero_delta_is_identity() {
        let mut rng = SeededRng::new(11);
        let q = quantize_block(&ToyBlock::random(8, 16, 2, &mut rng), BitWidth::Int4);
        let out = perturb_quantized(&q, &[0, 5, 100], &[0, 0, 0]).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn perturb_round_trip_away_from_clamp() {
        let mut rng = SeededRng::new(12);
        let q = quantize_block(&ToyBlock::random(8, 16, 2, &mut rng), BitWidth::Int8);
        // pick interior indices (not at the range boundary)
        let mut indices = Vec::new();
        for (idx, &v) in q.wq.values().iter().enumerate() {
            if v.abs() < 100 && indices.len() < 10 {
                indices.push(idx);
            }
        }
        let plus = perturb_quantized(&q, &indices, &vec![1; indices.len()]).unwrap();
        let back = perturb_quantized(&plus, &indices, &vec![-1; indices.len()]).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn perturb_clamps_at_range_max() {
        let mut rng = SeededRng::new(13);
        let mut block = ToyBlock::random(2, 2, 1, &mut rng);
        // column 0 spans [-1, 1]: its max quantizes to exactly +qmax
        block.wq = Matrix::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.2]).unwrap();
        let q = quantize_block(&block, BitWidth::Int4);
        assert_eq!(q.wq.values()[0], 7);
        let out = perturb_quantized(&q, &[0], &[1]).unwrap();
        assert_eq!(out.wq.values()[0], 7, "saturated value must not move");
    }

    #[test]
    fn perturbation_steps_commute_with_dequantization() {
        let mut rng = SeededRng::new(14);
        let q = quantize_block(&ToyBlock::random(8, 16, 2, &mut rng), BitWidth::Int8);
        let idx = 3usize;
        let (_, _, col) = q.locate_grid(idx);
        if q.wq.values()[idx].abs() < 127 {
            let plus = perturb_quantized(&q, &[idx], &[1]).unwrap();
            let before = q.dequantize().wq.data()[idx];
            let after = plus.dequantize().wq.data()[idx];
            let step = q.wq.scales()[col] as f64;
            assert!((after - before - step).abs() < 1e-12);
        }
    }
}
