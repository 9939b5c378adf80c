//! Sparse mask generation: a multi-scale convolutional importance map over the
//! BEV grid, top-k filtering, uniform b-bit quantization, and the
//! straight-through gradient rule for the non-differentiable post-processing.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::nn;
use crate::tensor::{Graph, NodeId, ParamStore, Primitive, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BITS: u8 = 4;
pub const BRANCH_KERNELS: [usize; 3] = [3, 5, 7];

/// Quantizer bit width `b ∈ [1, 8]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitWidth(u8);

impl BitWidth {
    pub fn new(bits: u8) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return invalid(format!("bit width must be in 1..=8, got {bits}"));
        }
        Ok(Self(bits))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Largest code, `2^b − 1`.
    pub fn max_code(self) -> u8 {
        ((1u16 << self.0) - 1) as u8
    }

    /// Quantizer step `δ = 1 / (2^b − 1)`.
    pub fn step(self) -> f64 {
        1.0 / f64::from(self.max_code())
    }

    /// `clamp(round(v / δ), 0, 2^b − 1)` with ties rounded away from zero.
    pub fn quantize_value(self, v: f64) -> u8 {
        let levels = f64::from(self.max_code());
        (v * levels).round().clamp(0.0, levels) as u8
    }

    /// `code · δ`, evaluated as `code / (2^b − 1)` so the top code maps to 1.0 exactly.
    pub fn dequantize_code(self, code: u8) -> f64 {
        f64::from(code) / f64::from(self.max_code())
    }
}

/// `k = max(1, ⌊α·n⌋)`. A relative guard of 1e-9 absorbs binary representation
/// error in `α` (e.g. `0.29·100` evaluating to `28.999…`).
pub fn retained_count(alpha: f64, n: usize) -> usize {
    let raw = alpha * n as f64;
    ((raw + raw.abs() * 1e-9).floor() as usize).clamp(1, n.max(1))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return invalid(format!("retention ratio must be in (0, 1], got {alpha}"));
    }
    Ok(())
}

/// Dense `H×W` importance map with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DenseMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return shape_err(
                "dense_mask",
                format!("{height}x{width} mask needs {} values, got {}", height * width, values.len()),
            );
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("mask value {v} outside [0, 1]"));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[1, h, w] | &[h, w] => Self::new(h, w, t.data().to_vec()),
            s => shape_err("dense_mask", format!("expected (1,H,W) or (H,W), got {s:?}")),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Top-k retained positions (strictly increasing row-major indices) and their values.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMask {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseMask {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Scatters into a `(1, H, W)` tensor with zeros off-support.
    pub fn to_dense_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros([1, self.height, self.width]);
        let d = t.data_mut();
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            d[i as usize] = v;
        }
        t
    }
}

/// Sparse mask carried on the wire: indices plus b-bit codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedSparseMask {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<u32>,
    pub codes: Vec<u8>,
    pub bits: BitWidth,
}

impl QuantizedSparseMask {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn step(&self) -> f64 {
        self.bits.step()
    }

    /// Checks the structural invariants: matching lengths, `k ≥ 1`, strictly
    /// increasing in-range indices, codes within `2^b − 1`.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.indices.len() != self.codes.len() {
            return invalid(format!(
                "{} indices but {} codes",
                self.indices.len(),
                self.codes.len()
            ));
        }
        if self.indices.is_empty() || self.indices.len() > n {
            return invalid(format!("k = {} outside 1..={n}", self.indices.len()));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("indices not strictly increasing");
        }
        if self.indices.last().is_some_and(|&i| i as usize >= n) {
            return invalid("index outside the grid");
        }
        if let Some(c) = self.codes.iter().find(|&&c| c > self.bits.max_code()) {
            return invalid(format!("code {c} exceeds {}", self.bits.max_code()));
        }
        Ok(())
    }
}

/// Keeps the `k = max(1, ⌊α·H·W⌋)` largest entries, ties going to the smaller
/// linear index, and emits them in index order.
pub fn topk_filter(m: &DenseMask, alpha: f64) -> Result<SparseMask> {
    check_alpha(alpha)?;
    let n = m.values.len();
    let k = retained_count(alpha, n);
    let mut order: Vec<u32> = (0..n as u32).collect();
    let v = &m.values;
    let by_rank = |a: &u32, b: &u32| v[*b as usize].total_cmp(&v[*a as usize]).then(a.cmp(b));
    if k < n {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable();
    let values = order.iter().map(|&i| v[i as usize]).collect();
    Ok(SparseMask {
        height: m.height,
        width: m.width,
        indices: order,
        values,
    })
}

pub fn quantize(s: &SparseMask, bits: u8) -> Result<QuantizedSparseMask> {
    let bits = BitWidth::new(bits)?;
    Ok(QuantizedSparseMask {
        height: s.height,
        width: s.width,
        indices: s.indices.clone(),
        codes: s.values.iter().map(|&v| bits.quantize_value(v)).collect(),
        bits,
    })
}

pub fn dequantize(q: &QuantizedSparseMask) -> SparseMask {
    SparseMask {
        height: q.height,
        width: q.width,
        indices: q.indices.clone(),
        values: q.codes.iter().map(|&c| q.bits.dequantize_code(c)).collect(),
    }
}

/// Differentiable quantize→dequantize of the sparse values: forward rounds to
/// the b-bit grid, backward passes the incoming gradient through unchanged.
pub fn quantize_ste(g: &mut Graph, values: NodeId, bits: u8) -> Result<NodeId> {
    BitWidth::new(bits)?;
    g.apply(Primitive::QuantizeSte { bits }, &[values])
}

/// Dense `(1,H,W)` mask → top-k → b-bit → dequantized, scattered back to
/// `(1,H,W)`. The straight-through rule treats the whole chain as the identity
/// in the backward pass; with `straight_through = false` gradients stop here.
pub fn sparsify_ste(g: &mut Graph, mask: NodeId, alpha: f64, bits: u8, straight_through: bool) -> Result<NodeId> {
    check_alpha(alpha)?;
    BitWidth::new(bits)?;
    g.apply(
        Primitive::SparsifyQuantize {
            alpha,
            bits,
            straight_through,
        },
        &[mask],
    )
}

/// Branch layout of the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmgConfig {
    pub channels: usize,
    /// Keep only the 3×3 branch (the "simple generator" ablation).
    pub single_branch: bool,
}

impl SmgConfig {
    pub fn kernels(&self) -> &'static [usize] {
        if self.single_branch {
            &BRANCH_KERNELS[..1]
        } else {
            &BRANCH_KERNELS
        }
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &SmgConfig, rng: &mut impl Rng) {
    let c = cfg.channels;
    for &k in cfg.kernels() {
        nn::init_conv(store, &format!("smg.branch{k}"), c, c, k, rng);
    }
    nn::init_conv(store, "smg.merge", c, c * cfg.kernels().len(), 1, rng);
    nn::init_conv(store, "smg.proj", 1, c, 1, rng);
}

/// `sigmoid(W_proj(merge([relu(conv_s(Z)) | s ∈ {3,5,7}]) + Z))`, shape `(1,H,W)`.
pub fn generate_mask(g: &mut Graph, store: &ParamStore, cfg: &SmgConfig, z: NodeId) -> Result<NodeId> {
    let Some((c, _, _)) = g.value(z).chw() else {
        return shape_err("generate_mask", format!("Z must be (C,H,W), got {:?}", g.value(z).shape()));
    };
    if c != cfg.channels {
        return shape_err("generate_mask", format!("Z has {c} channels, generator expects {}", cfg.channels));
    }
    let mut branches = Vec::with_capacity(3);
    for &k in cfg.kernels() {
        let b = nn::conv(g, store, &format!("smg.branch{k}"), z, 1, k / 2)?;
        branches.push(nn::relu(g, b)?);
    }
    let cat = g.apply(Primitive::ConcatChannels, &branches)?;
    let merged = nn::conv(g, store, "smg.merge", cat, 1, 0)?;
    let res = nn::add(g, merged, z)?;
    let proj = nn::conv(g, store, "smg.proj", res, 1, 0)?;
    g.apply(Primitive::Sigmoid, &[proj])
}

/// Sender-side mask pipeline on plain tensors: generate, filter, quantize.
pub fn compute_sparse_mask(store: &ParamStore, cfg: &SmgConfig, z: &Tensor, alpha: f64, bits: u8) -> Result<QuantizedSparseMask> {
    let mut g = Graph::new();
    let zi = g.input(z.clone());
    let m = generate_mask(&mut g, store, cfg, zi)?;
    let dense = DenseMask::from_tensor(g.value(m))?;
    quantize(&topk_filter(&dense, alpha)?, bits)
}
