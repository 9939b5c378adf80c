//! Multi-scale decoding: rebuilds a `C×H×W` feature from the latent `E` and the
//! dequantized sparse mask.
//!
//! The ladder runs from `(C·2^K, H/2^K, W/2^K)` at stage 0 to `(C, H, W)` at
//! stage `K`, halving channels and doubling each spatial dim per stage.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn;
use crate::tensor::{Graph, NodeId, ParamStore, Primitive, Tensor};

pub const DEFAULT_STAGES: usize = 3;

/// Where the decoder multiplies features by the mask pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskGuidance {
    /// Initial feature and every upsampling stage.
    #[default]
    AllStages,
    /// Only the full-resolution output.
    FinalOnly,
    /// No modulation; the output depends on `E` alone.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsdConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stages: usize,
    pub latent_dim: usize,
    pub guidance: MaskGuidance,
}

impl MsdConfig {
    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.stages;
        if self.stages == 0 || self.height % f != 0 || self.width % f != 0 || self.channels == 0 || self.latent_dim == 0 {
            return shape_err(
                "msd_config",
                format!(
                    "{}x{} with {} stages: spatial dims must be divisible by {f}",
                    self.height, self.width, self.stages
                ),
            );
        }
        Ok(())
    }

    /// `(C^i, H^i, W^i)` for stage `i ∈ 0..=K`.
    pub fn ladder(&self, i: usize) -> (usize, usize, usize) {
        let s = self.stages - i;
        (self.channels << s, self.height >> s, self.width >> s)
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &MsdConfig, rng: &mut impl Rng) {
    let (c0, h0, w0) = cfg.ladder(0);
    nn::init_fc(store, "msd.fc", c0 * h0 * w0, cfg.latent_dim, rng);
    for j in 1..=cfg.stages {
        // 2×2 average pooling as the starting point for each mask reducer.
        store.insert(format!("msd.mask_down{j}.w"), Tensor::full([1, 1, 2, 2], 0.25));
    }
    for i in 1..=cfg.stages {
        let (c_prev, _, _) = cfg.ladder(i - 1);
        let (c_i, _, _) = cfg.ladder(i);
        nn::init_conv_t(store, &format!("msd.up{i}"), c_prev, c_i, 4, rng);
    }
}

/// `F⁰_init`: fully connected expansion of `E` reshaped to `(C⁰, H⁰, W⁰)`.
pub fn init_feature(g: &mut Graph, store: &ParamStore, cfg: &MsdConfig, e: NodeId) -> Result<NodeId> {
    cfg.validate()?;
    let d = g.value(e).numel();
    if d != cfg.latent_dim {
        return shape_err("msd_init_feature", format!("latent has {d} entries, decoder expects {}", cfg.latent_dim));
    }
    let (c0, h0, w0) = cfg.ladder(0);
    let flat = nn::fc(g, store, "msd.fc", e)?;
    g.apply(Primitive::Reshape { shape: vec![c0, h0, w0] }, &[flat])
}

/// Mask pyramid `[M⁰, M¹, …, M^K]` from the dense dequantized mask `(1,H,W)`;
/// `M^K` is the mask itself and each coarser level is one stride-2 2×2
/// convolution (no bias) of the next finer one.
pub fn stage_masks(g: &mut Graph, store: &ParamStore, cfg: &MsdConfig, dense_mask: NodeId) -> Result<Vec<NodeId>> {
    cfg.validate()?;
    if g.value(dense_mask).shape() != [1, cfg.height, cfg.width] {
        return shape_err(
            "msd_stage_mask",
            format!("mask {:?} must be [1, {}, {}]", g.value(dense_mask).shape(), cfg.height, cfg.width),
        );
    }
    let mut levels = vec![dense_mask];
    let mut m = dense_mask;
    for j in 1..=cfg.stages {
        m = nn::conv(g, store, &format!("msd.mask_down{j}"), m, 2, 0)?;
        levels.push(m);
    }
    levels.reverse();
    Ok(levels)
}

fn modulate(g: &mut Graph, x: NodeId, m: NodeId) -> Result<NodeId> {
    g.apply(Primitive::BroadcastScale, &[x, m])
}

/// Full decoder: `F⁰ = F⁰_init ⊙ M⁰`, then per stage transposed conv, relu,
/// `⊙ Mⁱ`. Returns `F^K` with shape `(C, H, W)`, entries `≥ 0`.
pub fn decode(g: &mut Graph, store: &ParamStore, cfg: &MsdConfig, e: NodeId, dense_mask: NodeId) -> Result<NodeId> {
    let mut f = init_feature(g, store, cfg, e)?;
    let masks = match cfg.guidance {
        MaskGuidance::Off => Vec::new(),
        _ => stage_masks(g, store, cfg, dense_mask)?,
    };
    let guided = |i: usize| match cfg.guidance {
        MaskGuidance::AllStages => true,
        MaskGuidance::FinalOnly => i == cfg.stages,
        MaskGuidance::Off => false,
    };
    if guided(0) {
        f = modulate(g, f, masks[0])?;
    }
    for i in 1..=cfg.stages {
        f = nn::conv_t(g, store, &format!("msd.up{i}"), f, 2, 1)?;
        f = nn::relu(g, f)?;
        if guided(i) {
            f = modulate(g, f, masks[i])?;
        }
        let expect = cfg.ladder(i);
        if g.value(f).chw() != Some(expect) {
            return shape_err("msd_decode", format!("stage {i} produced {:?}, ladder says {expect:?}", g.value(f).shape()));
        }
    }
    Ok(f)
}

/// Plain-tensor decoder.
pub fn decode_tensor(store: &ParamStore, cfg: &MsdConfig, e: &[f64], dense_mask: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ei = g.input(Tensor::new([e.len()], e.to_vec())?);
    let mi = g.input(dense_mask.clone());
    let f = decode(&mut g, store, cfg, ei, mi)?;
    Ok(g.value(f).clone())
}
