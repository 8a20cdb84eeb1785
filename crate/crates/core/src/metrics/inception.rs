//! Inception-v3 in the variant used for FID (pool3 features, 2048-d; 1008-way
//! logits), with weights read from a local safetensors file whose sha256 is
//! pinned by the caller.
//!
//! Tensor names follow the common PyTorch port of the FID network, e.g.
//! `Mixed_5b.branch1x1.conv.weight`, `Mixed_5b.branch1x1.bn.running_var`,
//! `fc.weight`. Batch normalization (eps 1e-3) is folded into the preceding
//! bias-free convolution at load time.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::extractor::{softmax_rows, FeatureExtractor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::{avg_pool2d, conv2d, global_avg_pool, linear, max_pool2d, resize_bilinear, ConvGeom};
use crate::tensor::Tensor;

pub const INPUT_SIZE: usize = 299;
pub const FEATURE_DIM: usize = 2048;
const BN_EPS: f64 = 1e-3;

/// A raw tensor read from a safetensors file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Deserialize)]
struct EntryHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

/// Parse a safetensors buffer (F32 or F64 tensors).
pub fn parse_safetensors(bytes: &[u8]) -> Result<HashMap<String, RawTensor>> {
    let bad = |m: String| Error::Checkpoint(format!("safetensors: {m}"));
    if bytes.len() < 8 {
        return Err(bad("file shorter than its length prefix".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let end = 8usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: HashMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..end]).map_err(|e| Error::json("safetensors header", e))?;
    let data = &bytes[end..];
    let mut out = HashMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let e: EntryHeader = serde_json::from_value(value).map_err(|e| Error::json(format!("safetensors entry {name}"), e))?;
        let raw = data
            .get(e.data_offsets.0..e.data_offsets.1)
            .ok_or_else(|| bad(format!("{name} lies outside the data section")))?;
        let numel: usize = e.shape.iter().product();
        let values: Vec<f64> = match e.dtype.as_str() {
            "F32" if raw.len() == numel * 4 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            "F64" if raw.len() == numel * 8 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(bad(format!("{name}: unsupported dtype {other} or size mismatch"))),
        };
        out.insert(name, RawTensor { shape: e.shape, data: values });
    }
    Ok(out)
}

/// Serialize F32 tensors in safetensors layout (sorted by name).
pub fn write_safetensors(tensors: &[(String, RawTensor)]) -> Vec<u8> {
    let mut sorted: Vec<&(String, RawTensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut header = serde_json::Map::new();
    let mut payload = Vec::new();
    for (name, t) in sorted {
        let start = payload.len();
        for &v in &t.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        header.insert(
            name.clone(),
            serde_json::json!({"dtype": "F32", "shape": t.shape, "data_offsets": [start, payload.len()]}),
        );
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// One bias-free convolution followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

fn cs(name: String, cin: usize, cout: usize, k: (usize, usize), s: usize, p: (usize, usize)) -> ConvSpec {
    ConvSpec {
        name,
        cin,
        cout,
        geom: ConvGeom {
            kh: k.0,
            kw: k.1,
            sh: s,
            sw: s,
            ph: p.0,
            pw: p.1,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    A(usize),
    B,
    C(usize),
    D,
    E { max_pool: bool },
}

const BLOCKS: [(&str, usize, Block); 11] = [
    ("Mixed_5b", 192, Block::A(32)),
    ("Mixed_5c", 256, Block::A(64)),
    ("Mixed_5d", 288, Block::A(64)),
    ("Mixed_6a", 288, Block::B),
    ("Mixed_6b", 768, Block::C(128)),
    ("Mixed_6c", 768, Block::C(160)),
    ("Mixed_6d", 768, Block::C(160)),
    ("Mixed_6e", 768, Block::C(192)),
    ("Mixed_7a", 768, Block::D),
    ("Mixed_7b", 1280, Block::E { max_pool: false }),
    ("Mixed_7c", 2048, Block::E { max_pool: true }),
];

fn block_convs(prefix: &str, cin: usize, block: Block) -> Vec<ConvSpec> {
    let n = |s: &str| format!("{prefix}.{s}");
    match block {
        Block::A(pool) => vec![
            cs(n("branch1x1"), cin, 64, (1, 1), 1, (0, 0)),
            cs(n("branch5x5_1"), cin, 48, (1, 1), 1, (0, 0)),
            cs(n("branch5x5_2"), 48, 64, (5, 5), 1, (2, 2)),
            cs(n("branch3x3dbl_1"), cin, 64, (1, 1), 1, (0, 0)),
            cs(n("branch3x3dbl_2"), 64, 96, (3, 3), 1, (1, 1)),
            cs(n("branch3x3dbl_3"), 96, 96, (3, 3), 1, (1, 1)),
            cs(n("branch_pool"), cin, pool, (1, 1), 1, (0, 0)),
        ],
        Block::B => vec![
            cs(n("branch3x3"), cin, 384, (3, 3), 2, (0, 0)),
            cs(n("branch3x3dbl_1"), cin, 64, (1, 1), 1, (0, 0)),
            cs(n("branch3x3dbl_2"), 64, 96, (3, 3), 1, (1, 1)),
            cs(n("branch3x3dbl_3"), 96, 96, (3, 3), 2, (0, 0)),
        ],
        Block::C(c7) => vec![
            cs(n("branch1x1"), cin, 192, (1, 1), 1, (0, 0)),
            cs(n("branch7x7_1"), cin, c7, (1, 1), 1, (0, 0)),
            cs(n("branch7x7_2"), c7, c7, (1, 7), 1, (0, 3)),
            cs(n("branch7x7_3"), c7, 192, (7, 1), 1, (3, 0)),
            cs(n("branch7x7dbl_1"), cin, c7, (1, 1), 1, (0, 0)),
            cs(n("branch7x7dbl_2"), c7, c7, (7, 1), 1, (3, 0)),
            cs(n("branch7x7dbl_3"), c7, c7, (1, 7), 1, (0, 3)),
            cs(n("branch7x7dbl_4"), c7, c7, (7, 1), 1, (3, 0)),
            cs(n("branch7x7dbl_5"), c7, 192, (1, 7), 1, (0, 3)),
            cs(n("branch_pool"), cin, 192, (1, 1), 1, (0, 0)),
        ],
        Block::D => vec![
            cs(n("branch3x3_1"), cin, 192, (1, 1), 1, (0, 0)),
            cs(n("branch3x3_2"), 192, 320, (3, 3), 2, (0, 0)),
            cs(n("branch7x7x3_1"), cin, 192, (1, 1), 1, (0, 0)),
            cs(n("branch7x7x3_2"), 192, 192, (1, 7), 1, (0, 3)),
            cs(n("branch7x7x3_3"), 192, 192, (7, 1), 1, (3, 0)),
            cs(n("branch7x7x3_4"), 192, 192, (3, 3), 2, (0, 0)),
        ],
        Block::E { .. } => vec![
            cs(n("branch1x1"), cin, 320, (1, 1), 1, (0, 0)),
            cs(n("branch3x3_1"), cin, 384, (1, 1), 1, (0, 0)),
            cs(n("branch3x3_2a"), 384, 384, (1, 3), 1, (0, 1)),
            cs(n("branch3x3_2b"), 384, 384, (3, 1), 1, (1, 0)),
            cs(n("branch3x3dbl_1"), cin, 448, (1, 1), 1, (0, 0)),
            cs(n("branch3x3dbl_2"), 448, 384, (3, 3), 1, (1, 1)),
            cs(n("branch3x3dbl_3a"), 384, 384, (1, 3), 1, (0, 1)),
            cs(n("branch3x3dbl_3b"), 384, 384, (3, 1), 1, (1, 0)),
            cs(n("branch_pool"), cin, 192, (1, 1), 1, (0, 0)),
        ],
    }
}

fn stem_convs() -> Vec<ConvSpec> {
    vec![
        cs("Conv2d_1a_3x3".into(), 3, 32, (3, 3), 2, (0, 0)),
        cs("Conv2d_2a_3x3".into(), 32, 32, (3, 3), 1, (0, 0)),
        cs("Conv2d_2b_3x3".into(), 32, 64, (3, 3), 1, (1, 1)),
        cs("Conv2d_3b_1x1".into(), 64, 80, (1, 1), 1, (0, 0)),
        cs("Conv2d_4a_3x3".into(), 80, 192, (3, 3), 1, (0, 0)),
    ]
}

/// Every convolution of the network in forward order.
pub fn conv_specs() -> Vec<ConvSpec> {
    let mut out = stem_convs();
    for (prefix, cin, block) in BLOCKS {
        out.extend(block_convs(prefix, cin, block));
    }
    out
}

/// Name and shape of every tensor the weights file must provide.
pub fn expected_tensors(num_logits: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for c in conv_specs() {
        out.push((format!("{}.conv.weight", c.name), vec![c.cout, c.cin, c.geom.kh, c.geom.kw]));
        for s in ["weight", "bias", "running_mean", "running_var"] {
            out.push((format!("{}.bn.{s}", c.name), vec![c.cout]));
        }
    }
    out.push(("fc.weight".into(), vec![num_logits, FEATURE_DIM]));
    out.push(("fc.bias".into(), vec![num_logits]));
    out
}

struct FoldedConv<T> {
    w: Tensor<T>,
    b: Tensor<T>,
    geom: ConvGeom,
}

impl<T: Scalar> FoldedConv<T> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(conv2d(x, &self.w, Some(&self.b), &self.geom)?.map(|v| v.max(T::zero())))
    }
}

pub struct InceptionV3<T> {
    convs: HashMap<String, FoldedConv<T>>,
    fc: (Tensor<T>, Tensor<T>),
    id: String,
}

fn take(tensors: &HashMap<String, RawTensor>, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let t = tensors
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("inception weights lack {name}")))?;
    if t.shape != shape {
        return Err(Error::Checkpoint(format!("{name} has shape {:?}, expected {shape:?}", t.shape)));
    }
    Ok(t.data.clone())
}

impl<T: Scalar> InceptionV3<T> {
    /// Load from a safetensors file, refusing it unless its sha256 equals
    /// `expected_sha256` (hex, case-insensitive).
    pub fn load(path: &Path, expected_sha256: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let actual = hex::encode(Sha256::digest(&bytes));
        if !actual.eq_ignore_ascii_case(expected_sha256.trim()) {
            return Err(Error::Checkpoint(format!(
                "{} has sha256 {actual}, pinned value is {expected_sha256}",
                path.display()
            )));
        }
        let tensors = parse_safetensors(&bytes)?;
        Self::from_tensors(&tensors, format!("inception-v3-fid:{}", &actual[..16]))
    }

    pub fn from_tensors(tensors: &HashMap<String, RawTensor>, id: String) -> Result<Self> {
        let num_logits = tensors
            .get("fc.bias")
            .map(|t| t.data.len())
            .ok_or_else(|| Error::Checkpoint("inception weights lack fc.bias".into()))?;
        let mut convs = HashMap::new();
        for c in conv_specs() {
            let w = take(tensors, &format!("{}.conv.weight", c.name), &[c.cout, c.cin, c.geom.kh, c.geom.kw])?;
            let bn = |s: &str| take(tensors, &format!("{}.bn.{s}", c.name), &[c.cout]);
            let (gamma, beta, mean, var) = (bn("weight")?, bn("bias")?, bn("running_mean")?, bn("running_var")?);
            let per = c.cin * c.geom.kh * c.geom.kw;
            let mut wf = Vec::with_capacity(w.len());
            let mut bf = Vec::with_capacity(c.cout);
            for o in 0..c.cout {
                let scale = gamma[o] / (var[o] + BN_EPS).sqrt();
                wf.extend(w[o * per..(o + 1) * per].iter().map(|&v| T::from_f64_lossy(v * scale)));
                bf.push(T::from_f64_lossy(beta[o] - mean[o] * scale));
            }
            convs.insert(
                c.name.clone(),
                FoldedConv {
                    w: Tensor::from_vec(&[c.cout, c.cin, c.geom.kh, c.geom.kw], wf)?,
                    b: Tensor::from_vec(&[c.cout], bf)?,
                    geom: c.geom,
                },
            );
        }
        let fw = take(tensors, "fc.weight", &[num_logits, FEATURE_DIM])?;
        let fb = take(tensors, "fc.bias", &[num_logits])?;
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>();
        Ok(InceptionV3 {
            convs,
            fc: (
                Tensor::from_vec(&[num_logits, FEATURE_DIM], cast(fw))?,
                Tensor::from_vec(&[num_logits], cast(fb))?,
            ),
            id,
        })
    }

    fn conv(&self, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.convs
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no convolution {name}")))?
            .apply(x)
    }

    fn chain(&self, prefix: &str, names: &[&str], x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.conv(&format!("{prefix}.{}", names[0]), x)?;
        for n in &names[1..] {
            h = self.conv(&format!("{prefix}.{n}"), &h)?;
        }
        Ok(h)
    }

    fn block(&self, prefix: &str, block: Block, x: &Tensor<T>) -> Result<Tensor<T>> {
        let parts = match block {
            Block::A(_) => vec![
                self.chain(prefix, &["branch1x1"], x)?,
                self.chain(prefix, &["branch5x5_1", "branch5x5_2"], x)?,
                self.chain(prefix, &["branch3x3dbl_1", "branch3x3dbl_2", "branch3x3dbl_3"], x)?,
                self.chain(prefix, &["branch_pool"], &avg_pool2d(x, 3, 1, 1, false)?)?,
            ],
            Block::B => vec![
                self.chain(prefix, &["branch3x3"], x)?,
                self.chain(prefix, &["branch3x3dbl_1", "branch3x3dbl_2", "branch3x3dbl_3"], x)?,
                max_pool2d(x, 3, 2)?,
            ],
            Block::C(_) => vec![
                self.chain(prefix, &["branch1x1"], x)?,
                self.chain(prefix, &["branch7x7_1", "branch7x7_2", "branch7x7_3"], x)?,
                self.chain(
                    prefix,
                    &["branch7x7dbl_1", "branch7x7dbl_2", "branch7x7dbl_3", "branch7x7dbl_4", "branch7x7dbl_5"],
                    x,
                )?,
                self.chain(prefix, &["branch_pool"], &avg_pool2d(x, 3, 1, 1, false)?)?,
            ],
            Block::D => vec![
                self.chain(prefix, &["branch3x3_1", "branch3x3_2"], x)?,
                self.chain(prefix, &["branch7x7x3_1", "branch7x7x3_2", "branch7x7x3_3", "branch7x7x3_4"], x)?,
                max_pool2d(x, 3, 2)?,
            ],
            Block::E { max_pool } => {
                let b3 = self.chain(prefix, &["branch3x3_1"], x)?;
                let d3 = self.chain(prefix, &["branch3x3dbl_1", "branch3x3dbl_2"], x)?;
                let pooled = if max_pool { max_pool_same(x)? } else { avg_pool2d(x, 3, 1, 1, false)? };
                vec![
                    self.chain(prefix, &["branch1x1"], x)?,
                    self.chain(prefix, &["branch3x3_2a"], &b3)?,
                    self.chain(prefix, &["branch3x3_2b"], &b3)?,
                    self.chain(prefix, &["branch3x3dbl_3a"], &d3)?,
                    self.chain(prefix, &["branch3x3dbl_3b"], &d3)?,
                    self.chain(prefix, &["branch_pool"], &pooled)?,
                ]
            }
        };
        cat_channels(&parts)
    }

    /// pool3 features and logits of a batch already at 299x299.
    pub fn forward_299(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut h = self.conv("Conv2d_1a_3x3", x)?;
        h = self.conv("Conv2d_2a_3x3", &h)?;
        h = self.conv("Conv2d_2b_3x3", &h)?;
        h = max_pool2d(&h, 3, 2)?;
        h = self.conv("Conv2d_3b_1x1", &h)?;
        h = self.conv("Conv2d_4a_3x3", &h)?;
        h = max_pool2d(&h, 3, 2)?;
        for (prefix, _, block) in BLOCKS {
            h = self.block(prefix, block, &h)?;
        }
        let feats = global_avg_pool(&h)?;
        let logits = linear(&feats, &self.fc.0, Some(&self.fc.1))?;
        Ok((feats, logits))
    }
}

/// 3x3 max pooling, stride 1, padding 1 (padding never wins).
fn max_pool_same<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = Tensor::zeros(x.shape());
    for nc in 0..b * c {
        let p = &x.data()[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut m = T::neg_infinity();
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xs in xx.saturating_sub(1)..(xx + 2).min(w) {
                        m = m.max(p[yy * w + xs]);
                    }
                }
                out.data_mut()[nc * h * w + y * w + xx] = m;
            }
        }
    }
    Ok(out)
}

/// Concatenate (B, C_i, H, W) tensors along channels.
fn cat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (b, h, w) = (parts[0].dim(0), parts[0].dim(2), parts[0].dim(3));
    if parts.iter().any(|p| p.rank() != 4 || p.dim(0) != b || p.dim(2) != h || p.dim(3) != w) {
        return Err(Error::Shape("branch outputs disagree in batch or spatial size".into()));
    }
    let c: usize = parts.iter().map(|p| p.dim(1)).sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(b * c * plane);
    for n in 0..b {
        for p in parts {
            let ci = p.dim(1);
            data.extend_from_slice(&p.data()[n * ci * plane..(n + 1) * ci * plane]);
        }
    }
    Tensor::from_vec(&[b, c, h, w], data)
}

impl<T: Scalar> FeatureExtractor<T> for InceptionV3<T> {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    fn class_count(&self) -> usize {
        self.fc.1.numel()
    }

    fn chunk_size(&self) -> usize {
        8
    }

    /// Inputs in [-1, 1] are resized bilinearly to 299x299; the network
    /// expects exactly that range, so no further normalization applies.
    fn extract(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if images.rank() != 4 || images.dim(1) != 3 {
            return Err(Error::Shape(format!("inception expects (n, 3, H, W), got {:?}", images.shape())));
        }
        let x = resize_bilinear(images, INPUT_SIZE, INPUT_SIZE)?;
        let (feats, logits) = self.forward_299(&x)?;
        Ok((feats, softmax_rows(&logits)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn safetensors_roundtrip() {
        let t = RawTensor {
            shape: vec![2, 3],
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5],
        };
        let bytes = write_safetensors(&[("a.b".into(), t.clone())]);
        let back = parse_safetensors(&bytes).unwrap();
        assert_eq!(back["a.b"], t);
        assert!(parse_safetensors(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn architecture_channel_bookkeeping() {
        // Every block's declared input width equals the previous output width.
        let out_width = |block: Block, cin: usize| match block {
            Block::A(p) => 64 + 64 + 96 + p,
            Block::B => 384 + 96 + cin,
            Block::C(_) => 4 * 192,
            Block::D => 320 + 192 + cin,
            Block::E { .. } => 320 + 2 * 384 + 2 * 384 + 192,
        };
        let mut width = 192;
        for (_, cin, block) in BLOCKS {
            assert_eq!(cin, width);
            width = out_width(block, cin);
        }
        assert_eq!(width, FEATURE_DIM);
        let params: usize = expected_tensors(1008).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        // Conv weights, four BN vectors per conv and the 1008-way classifier.
        assert_eq!(params, 23_885_392);
    }
}
