//! Model bundle file format.
//!
//! Layout (little-endian): magic `ATLM`, version u16, quantization tag u8
//! (0 = f32, 1 = int8, 2 = int4), then L/H/heads/ffn/vocab as u32, the
//! embedding table as f32, and per-block weights. Full-precision blocks
//! store raw f32 tensors; quantized blocks store per-column f32 scales plus
//! int8 bytes or nibble-packed int4 (low nibble = even flat index).
//!
//! A JSON manifest sidecar (`<bundle>.manifest.json`) carries the shapes and
//! the SHA-256 of the bundle bytes. The hash declared there is what the key
//! store binds to.

use crate::error::{Error, Result};
use crate::model::{LayerNorm, ModelShape, ToyBlock, ToyModel};
use crate::numkit::Matrix;
use crate::quant::{BitWidth, QuantizedBlock, QuantizedModel, QuantizedTensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ops::Range;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"ATLM";
const VERSION: u16 = 1;

/// The weights held by a bundle.
#[derive(Debug, Clone)]
pub enum BundleModel {
    Full(ToyModel),
    Quantized(QuantizedModel),
}

/// Owned per-block weights, full precision or on the grid.
#[derive(Debug, Clone)]
pub enum BlockWeights {
    Full(ToyBlock),
    Quantized(QuantizedBlock),
}

impl BlockWeights {
    pub fn forward(&self, prev: &Matrix) -> Result<Matrix> {
        match self {
            BlockWeights::Full(b) => b.forward(prev),
            BlockWeights::Quantized(q) => q.forward(prev),
        }
    }
}

/// Serialized model plus its identity: the canonical bytes, their SHA-256,
/// and the hash the manifest declares (these differ only when an adversary
/// spoofs the manifest).
#[derive(Debug, Clone)]
pub struct ModelBundle {
    model: BundleModel,
    bytes: Vec<u8>,
    block_ranges: Vec<Range<usize>>,
    content_hash: [u8; 32],
    declared_hash: [u8; 32],
}

/// Manifest sidecar contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format: String,
    pub version: u16,
    pub quant: String,
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub sha256: String,
}

impl ModelBundle {
    pub fn from_full(model: ToyModel) -> Result<Self> {
        Self::build(BundleModel::Full(model))
    }

    pub fn from_quantized(model: QuantizedModel) -> Result<Self> {
        Self::build(BundleModel::Quantized(model))
    }

    fn build(model: BundleModel) -> Result<Self> {
        let (bytes, block_ranges) = serialize_model(&model)?;
        let content_hash = sha256(&bytes);
        // Serialization rounds weights through f32; reparse so the in-memory
        // model is exactly what any later load sees.
        let (model, _) = parse_model(&bytes)?;
        Ok(ModelBundle {
            model,
            bytes,
            block_ranges,
            content_hash,
            declared_hash: content_hash,
        })
    }

    pub fn model(&self) -> &BundleModel {
        &self.model
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn content_hash(&self) -> [u8; 32] {
        self.content_hash
    }

    pub fn declared_hash(&self) -> [u8; 32] {
        self.declared_hash
    }

    /// Claim a different identity in the manifest; used by the adversary
    /// harnesses to present a substituted model as the authentic one.
    pub fn spoof_declared_hash(&mut self, hash: [u8; 32]) {
        self.declared_hash = hash;
    }

    pub fn shape(&self) -> ModelShape {
        match &self.model {
            BundleModel::Full(m) => m.shape,
            BundleModel::Quantized(m) => m.shape,
        }
    }

    pub fn quant_tag(&self) -> u8 {
        match &self.model {
            BundleModel::Full(_) => 0,
            BundleModel::Quantized(m) => match m.bits {
                BitWidth::Int8 => 1,
                BitWidth::Int4 => 2,
            },
        }
    }

    pub fn block_count(&self) -> usize {
        self.shape().blocks
    }

    /// The serialized bytes of one block, as staged for the enclave.
    pub fn block_bytes(&self, idx: usize) -> &[u8] {
        &self.bytes[self.block_ranges[idx].clone()]
    }

    pub fn block_weights(&self, idx: usize) -> BlockWeights {
        match &self.model {
            BundleModel::Full(m) => BlockWeights::Full(m.blocks[idx].clone()),
            BundleModel::Quantized(m) => BlockWeights::Quantized(m.blocks[idx].clone()),
        }
    }

    pub fn manifest(&self) -> BundleManifest {
        let shape = self.shape();
        BundleManifest {
            format: "atlm".into(),
            version: VERSION,
            quant: match self.quant_tag() {
                0 => "fp32",
                1 => "int8",
                _ => "int4",
            }
            .into(),
            blocks: shape.blocks,
            hidden: shape.hidden,
            heads: shape.heads,
            ffn: shape.ffn,
            vocab: shape.vocab,
            sha256: hex::encode(self.declared_hash),
        }
    }
}

pub fn bundle_manifest_path(bundle_path: &Path) -> PathBuf {
    let mut os = bundle_path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

/// Write the bundle and its manifest sidecar.
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    std::fs::write(path, bundle.bytes())?;
    let manifest = serde_json::to_string_pretty(&bundle.manifest())
        .map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(bundle_manifest_path(path), manifest)?;
    Ok(())
}

/// Load a bundle and its manifest. The declared hash comes from the
/// manifest; the content hash is recomputed from the bytes.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path)?;
    let manifest_text = std::fs::read_to_string(bundle_manifest_path(path))?;
    let manifest: BundleManifest =
        serde_json::from_str(&manifest_text).map_err(|e| Error::Format(e.to_string()))?;
    let declared: [u8; 32] = hex::decode(&manifest.sha256)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::Format("manifest sha256 is not 32 hex bytes".into()))?;
    let content_hash = sha256(&bytes);
    let (model, block_ranges) = parse_model(&bytes)?;
    Ok(ModelBundle {
        model,
        bytes,
        block_ranges,
        content_hash,
        declared_hash: declared,
    })
}

pub(crate) fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

// ---- byte-level encoding ----------------------------------------------

pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn new() -> Self {
        Writer(Vec::new())
    }

    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f32(v as f32);
        }
    }

    pub fn bytes(&mut self, vs: &[u8]) {
        self.0.extend_from_slice(vs);
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn byte_slice(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_matrix_f32(w: &mut Writer, m: &Matrix) {
    w.f32_slice(m.data());
}

fn read_matrix_f32(r: &mut Reader, rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, r.f32_vec(rows * cols)?)
}

fn write_quant_tensor(w: &mut Writer, t: &QuantizedTensor) {
    for &s in t.scales() {
        w.f32(s);
    }
    match t.bits() {
        BitWidth::Int8 => {
            for &q in t.values() {
                w.u8(q as u8);
            }
        }
        BitWidth::Int4 => {
            // two values per byte: low nibble = even flat index
            let vals = t.values();
            for pair in vals.chunks(2) {
                let lo = (pair[0] as u8) & 0x0f;
                let hi = if pair.len() > 1 {
                    (pair[1] as u8) & 0x0f
                } else {
                    0
                };
                w.u8(lo | (hi << 4));
            }
        }
    }
}

fn read_quant_tensor(
    r: &mut Reader,
    rows: usize,
    cols: usize,
    bits: BitWidth,
) -> Result<QuantizedTensor> {
    let mut scales = vec![0.0f32; cols];
    for s in scales.iter_mut() {
        *s = r.f32()?;
    }
    let count = rows * cols;
    let q = match bits {
        BitWidth::Int8 => r
            .byte_slice(count)?
            .iter()
            .map(|&b| b as i8)
            .collect::<Vec<i8>>(),
        BitWidth::Int4 => {
            let packed = r.byte_slice(count.div_ceil(2))?;
            let mut out = Vec::with_capacity(count);
            for (i, &byte) in packed.iter().enumerate() {
                let lo = sign_extend_4(byte & 0x0f);
                out.push(lo);
                if 2 * i + 1 < count {
                    out.push(sign_extend_4(byte >> 4));
                }
            }
            out
        }
    };
    QuantizedTensor::from_parts(rows, cols, q, scales, bits)
}

fn sign_extend_4(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}

fn write_layer_norm(w: &mut Writer, ln: &LayerNorm) {
    w.f32_slice(&ln.gain);
    w.f32_slice(&ln.bias);
}

fn read_layer_norm(r: &mut Reader, width: usize) -> Result<LayerNorm> {
    Ok(LayerNorm {
        gain: r.f32_vec(width)?,
        bias: r.f32_vec(width)?,
    })
}

/// Serialize a single full-precision block (the staged unit).
pub(crate) fn write_full_block(w: &mut Writer, b: &ToyBlock) {
    write_layer_norm(w, &b.ln1);
    write_layer_norm(w, &b.ln2);
    w.u8(b.residual as u8);
    for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
        write_matrix_f32(w, m);
    }
}

pub(crate) fn read_full_block(r: &mut Reader, shape: &ModelShape) -> Result<ToyBlock> {
    let (h, f) = (shape.hidden, shape.ffn);
    let ln1 = read_layer_norm(r, h)?;
    let ln2 = read_layer_norm(r, h)?;
    let residual = r.u8()? != 0;
    let dims = [(h, h), (h, h), (h, h), (h, h), (h, f), (f, h)];
    let mut ms = Vec::with_capacity(6);
    for (rows, cols) in dims {
        ms.push(read_matrix_f32(r, rows, cols)?);
    }
    let mut it = ms.into_iter();
    Ok(ToyBlock {
        ln1,
        ln2,
        wq: it.next().unwrap(),
        wk: it.next().unwrap(),
        wv: it.next().unwrap(),
        wo: it.next().unwrap(),
        w1: it.next().unwrap(),
        w2: it.next().unwrap(),
        heads: shape.heads,
        residual,
    })
}

pub(crate) fn write_quant_block(w: &mut Writer, b: &QuantizedBlock) {
    write_layer_norm(w, &b.ln1);
    write_layer_norm(w, &b.ln2);
    w.u8(b.residual as u8);
    for t in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
        write_quant_tensor(w, t);
    }
}

pub(crate) fn read_quant_block(
    r: &mut Reader,
    shape: &ModelShape,
    bits: BitWidth,
) -> Result<QuantizedBlock> {
    let (h, f) = (shape.hidden, shape.ffn);
    let ln1 = read_layer_norm(r, h)?;
    let ln2 = read_layer_norm(r, h)?;
    let residual = r.u8()? != 0;
    let dims = [(h, h), (h, h), (h, h), (h, h), (h, f), (f, h)];
    let mut ts = Vec::with_capacity(6);
    for (rows, cols) in dims {
        ts.push(read_quant_tensor(r, rows, cols, bits)?);
    }
    let mut it = ts.into_iter();
    Ok(QuantizedBlock {
        ln1,
        ln2,
        wq: it.next().unwrap(),
        wk: it.next().unwrap(),
        wv: it.next().unwrap(),
        wo: it.next().unwrap(),
        w1: it.next().unwrap(),
        w2: it.next().unwrap(),
        heads: shape.heads,
        residual,
        bits,
    })
}

/// Parse one staged block payload (as the enclave does from its private
/// copy).
pub fn parse_block_bytes(bytes: &[u8], shape: &ModelShape, quant_tag: u8) -> Result<BlockWeights> {
    let mut r = Reader::new(bytes);
    let block = match quant_tag {
        0 => BlockWeights::Full(read_full_block(&mut r, shape)?),
        1 => BlockWeights::Quantized(read_quant_block(&mut r, shape, BitWidth::Int8)?),
        2 => BlockWeights::Quantized(read_quant_block(&mut r, shape, BitWidth::Int4)?),
        other => return Err(Error::Format(format!("unknown quant tag {other}"))),
    };
    if !r.done() {
        return Err(Error::Format("trailing bytes after block".into()));
    }
    Ok(block)
}

fn serialize_model(model: &BundleModel) -> Result<(Vec<u8>, Vec<Range<usize>>)> {
    let mut w = Writer::new();
    let (shape, quant_tag) = match model {
        BundleModel::Full(m) => (m.shape, 0u8),
        BundleModel::Quantized(m) => (
            m.shape,
            match m.bits {
                BitWidth::Int8 => 1,
                BitWidth::Int4 => 2,
            },
        ),
    };
    shape.validate()?;
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u8(quant_tag);
    w.u32(shape.blocks as u32);
    w.u32(shape.hidden as u32);
    w.u32(shape.heads as u32);
    w.u32(shape.ffn as u32);
    w.u32(shape.vocab as u32);
    match model {
        BundleModel::Full(m) => w.f32_slice(m.embedding.data()),
        BundleModel::Quantized(m) => w.f32_slice(m.embedding.data()),
    }
    let mut ranges = Vec::with_capacity(shape.blocks);
    match model {
        BundleModel::Full(m) => {
            for b in &m.blocks {
                let start = w.0.len();
                write_full_block(&mut w, b);
                ranges.push(start..w.0.len());
            }
        }
        BundleModel::Quantized(m) => {
            for b in &m.blocks {
                let start = w.0.len();
                write_quant_block(&mut w, b);
                ranges.push(start..w.0.len());
            }
        }
    }
    Ok((w.0, ranges))
}

fn parse_model(bytes: &[u8]) -> Result<(BundleModel, Vec<Range<usize>>)> {
    let mut r = Reader::new(bytes);
    if r.byte_slice(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let quant_tag = r.u8()?;
    let shape = ModelShape {
        blocks: r.u32()? as usize,
        hidden: r.u32()? as usize,
        heads: r.u32()? as usize,
        ffn: r.u32()? as usize,
        vocab: r.u32()? as usize,
    };
    shape.validate()?;
    let embedding = read_matrix_f32(&mut r, shape.vocab, shape.hidden)?;
    let mut ranges = Vec::with_capacity(shape.blocks);
    let model = match quant_tag {
        0 => {
            let mut blocks = Vec::with_capacity(shape.blocks);
            for _ in 0..shape.blocks {
                let start = r.position();
                blocks.push(read_full_block(&mut r, &shape)?);
                ranges.push(start..r.position());
            }
            BundleModel::Full(ToyModel {
                shape,
                embedding,
                blocks,
            })
        }
        1 | 2 => {
            let bits = if quant_tag == 1 {
                BitWidth::Int8
            } else {
                BitWidth::Int4
            };
            let mut blocks = Vec::with_capacity(shape.blocks);
            for _ in 0..shape.blocks {
                let start = r.position();
                blocks.push(read_quant_block(&mut r, &shape, bits)?);
                ranges.push(start..r.position());
            }
            BundleModel::Quantized(QuantizedModel {
                shape,
                embedding,
                blocks,
                bits,
            })
        }
        other => return Err(Error::Format(format!("unknown quant tag {other}"))),
    };
    if !r.done() {
        return Err(Error::Format("trailing bytes after model".into()));
    }
    Ok((model, ranges))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::SeededRng;
    use crate::quant::QuantizedModel;

    fn shape() -> ModelShape {
        ModelShape {
            blocks: 2,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab: 12,
        }
    }

    #[test]
    fn full_bundle_round_trips_through_disk() {
        let model = ToyModel::random(shape(), &mut SeededRng::new(6)).unwrap();
        let bundle = ModelBundle::from_full(model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.atlm");
        save_bundle(&bundle, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(loaded.bytes(), bundle.bytes());
        assert_eq!(loaded.content_hash(), bundle.content_hash());
        assert_eq!(loaded.declared_hash(), bundle.content_hash());
        // weights identical through the f32 round trip
        let (a, b) = match (bundle.model(), loaded.model()) {
            (BundleModel::Full(a), BundleModel::Full(b)) => (a, b),
            _ => panic!("wrong variant"),
        };
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.blocks[1].w2, b.blocks[1].w2);
    }

    #[test]
    fn quantized_bundle_round_trips_both_widths() {
        for bits in [BitWidth::Int8, BitWidth::Int4] {
            let model = ToyModel::random(shape(), &mut SeededRng::new(7)).unwrap();
            let q = QuantizedModel::from_model(&model, bits);
            let bundle = ModelBundle::from_quantized(q.clone()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.atlm");
            save_bundle(&bundle, &path).unwrap();
            let loaded = load_bundle(&path).unwrap();
            let lq = match loaded.model() {
                BundleModel::Quantized(m) => m,
                _ => panic!("wrong variant"),
            };
            for (a, b) in q.blocks.iter().zip(&lq.blocks) {
                assert_eq!(a.wq.values(), b.wq.values());
                assert_eq!(a.w1.values(), b.w1.values());
                assert_eq!(a.wq.scales(), b.wq.scales());
            }
        }
    }

    #[test]
    fn staged_block_bytes_parse_to_same_weights() {
        let model = ToyModel::random(shape(), &mut SeededRng::new(8)).unwrap();
        let q = QuantizedModel::from_model(&model, BitWidth::Int4);
        let bundle = ModelBundle::from_quantized(q).unwrap();
        for i in 0..bundle.block_count() {
            let parsed =
                parse_block_bytes(bundle.block_bytes(i), &bundle.shape(), bundle.quant_tag())
                    .unwrap();
            let direct = bundle.block_weights(i);
            let mut rng = SeededRng::new(99);
            let x = Matrix::random_normal(3, 8, 1.0, &mut rng);
            assert_eq!(
                parsed.forward(&x).unwrap(),
                direct.forward(&x).unwrap(),
                "block {i}"
            );
        }
    }

    #[test]
    fn int4_packing_is_low_nibble_even_index() {
        let m = Matrix::from_vec(1, 2, vec![7.0, -7.0]).unwrap();
        // scale 1.0 per column with qmax 7
        let t = crate::quant::quantize_tensor(&m, BitWidth::Int4);
        assert_eq!(t.values(), &[7, -7]);
        let mut w = Writer::new();
        write_quant_tensor(&mut w, &t);
        // after 2 f32 scales: one packed byte, 7 | (-7 & 0xf) << 4 = 0x97
        assert_eq!(w.0[8], 0x97);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let model = ToyModel::random(shape(), &mut SeededRng::new(9)).unwrap();
        let bundle = ModelBundle::from_full(model).unwrap();
        let mut bytes = bundle.bytes().to_vec();
        bytes[0] = b'X';
        assert!(parse_model(&bytes).is_err());
    }
}
