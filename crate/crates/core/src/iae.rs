//! Information-aware encoding: condenses a BEV feature `Z (C×H×W)` into the
//! parameters of a diagonal Gaussian posterior over a `D`-dimensional latent,
//! samples it with the reparameterization trick, and scores it against a
//! standard-normal prior.
//!
//! Network: three stride-2 stages (`C → 2C → 4C`), each followed by two
//! residual basic blocks, then a 4×4 adaptive max pool, a `2D`-wide fully
//! connected trunk, and two parallel `D`-wide heads for `μ` and `log σ²`.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::nn;
use crate::tensor::{Graph, NodeId, ParamStore, Primitive, Tensor};

pub const DEFAULT_LATENT_DIM: usize = 256;
pub const POOLED: usize = 4;
const STAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IaeConfig {
    pub channels: usize,
    pub latent_dim: usize,
    /// Replace the encoder stack by a single 3×3 conv + relu ("naive encoder" ablation).
    pub simple: bool,
}

impl IaeConfig {
    fn pooled_len(&self) -> usize {
        let c = if self.simple {
            self.channels
        } else {
            self.channels << (STAGES - 1)
        };
        c * POOLED * POOLED
    }
}

/// Posterior parameters `(μ, σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return shape_err("gaussian_latent", format!("mu has {} entries, sigma {}", mu.len(), sigma.len()));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return invalid(format!("sigma must be positive and finite, got {s}"));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return invalid("mu must be finite");
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// The transmitted latent `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFeature {
    pub values: Vec<f64>,
}

impl LatentFeature {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Checks `D < C·H·W / 100`, the "much smaller than the feature map" contract.
    pub fn check_compression(&self, c: usize, h: usize, w: usize) -> Result<()> {
        if self.dim() * 100 >= c * h * w {
            return invalid(format!("latent dim {} is not ≪ {c}×{h}×{w}", self.dim()));
        }
        Ok(())
    }
}

/// Graph handles for `(μ, σ)`.
#[derive(Clone, Copy, Debug)]
pub struct LatentNodes {
    pub mu: NodeId,
    pub sigma: NodeId,
}

fn stage_name(s: usize) -> String {
    format!("iae.stage{s}")
}

pub fn init_params(store: &mut ParamStore, cfg: &IaeConfig, rng: &mut impl Rng) {
    let (c, d) = (cfg.channels, cfg.latent_dim);
    if cfg.simple {
        nn::init_conv(store, "iae.naive", c, c, 3, rng);
        nn::init_fc(store, "iae.mu", d, cfg.pooled_len(), rng);
        nn::init_fc(store, "iae.logvar", d, cfg.pooled_len(), rng);
        store.init_zeros("iae.logvar.w", &[d, cfg.pooled_len()]);
        return;
    }
    let mut c_in = c;
    for s in 0..STAGES {
        let c_out = c << s;
        let name = stage_name(s);
        nn::init_conv(store, &format!("{name}.down"), c_out, c_in, 3, rng);
        for blk in 0..2 {
            nn::init_conv(store, &format!("{name}.block{blk}.conv1"), c_out, c_out, 3, rng);
            nn::init_conv(store, &format!("{name}.block{blk}.conv2"), c_out, c_out, 3, rng);
            // Residual branches start closed so depth does not inflate the scale.
            store.init_zeros(&format!("{name}.block{blk}.conv2.w"), &[c_out, c_out, 3, 3]);
        }
        c_in = c_out;
    }
    nn::init_fc(store, "iae.trunk", 2 * d, cfg.pooled_len(), rng);
    nn::init_fc(store, "iae.mu", d, 2 * d, rng);
    nn::init_fc(store, "iae.logvar", d, 2 * d, rng);
    // Unit variance at the start whatever the trunk's scale.
    store.init_zeros("iae.logvar.w", &[d, 2 * d]);
}

fn basic_block(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    let h = nn::conv(g, store, &format!("{name}.conv1"), x, 1, 1)?;
    let h = nn::relu(g, h)?;
    let h = nn::conv(g, store, &format!("{name}.conv2"), h, 1, 1)?;
    let s = nn::add(g, x, h)?;
    nn::relu(g, s)
}

/// `(μ, σ) = IAEncoder(Z)` with `σ = exp(½·logvar)`.
pub fn encode(g: &mut Graph, store: &ParamStore, cfg: &IaeConfig, z: NodeId) -> Result<LatentNodes> {
    let Some((c, h, w)) = g.value(z).chw() else {
        return shape_err("iae_encode", format!("Z must be (C,H,W), got {:?}", g.value(z).shape()));
    };
    if c != cfg.channels {
        return shape_err("iae_encode", format!("Z has {c} channels, encoder expects {}", cfg.channels));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return shape_err("iae_encode", format!("spatial dims {h}x{w} must be divisible by 8"));
    }
    let pool = Primitive::AdaptiveMaxPool {
        out_h: POOLED,
        out_w: POOLED,
    };
    let features = if cfg.simple {
        let x = nn::conv(g, store, "iae.naive", z, 1, 1)?;
        let x = nn::relu(g, x)?;
        g.apply(pool, &[x])?
    } else {
        let mut x = z;
        for s in 0..STAGES {
            let name = stage_name(s);
            x = nn::conv(g, store, &format!("{name}.down"), x, 2, 1)?;
            x = nn::relu(g, x)?;
            for blk in 0..2 {
                x = basic_block(g, store, &format!("{name}.block{blk}"), x)?;
            }
        }
        let pooled = g.apply(pool, &[x])?;
        let t = nn::fc(g, store, "iae.trunk", pooled)?;
        nn::relu(g, t)?
    };
    let mu = nn::fc(g, store, "iae.mu", features)?;
    let logvar = nn::fc(g, store, "iae.logvar", features)?;
    let half = g.apply(Primitive::Affine { scale: 0.5, shift: 0.0 }, &[logvar])?;
    let sigma = g.apply(Primitive::Exp, &[half])?;
    Ok(LatentNodes { mu, sigma })
}

/// Plain-tensor encoder.
pub fn encode_tensor(store: &ParamStore, cfg: &IaeConfig, z: &Tensor) -> Result<GaussianLatent> {
    let mut g = Graph::new();
    let zi = g.input(z.clone());
    let n = encode(&mut g, store, cfg, zi)?;
    GaussianLatent::new(g.value(n.mu).data().to_vec(), g.value(n.sigma).data().to_vec())
}

/// `E = μ + σ ⊙ ε` on the graph; `eps` enters as a constant input.
pub fn sample(g: &mut Graph, latent: LatentNodes, eps: &[f64]) -> Result<NodeId> {
    let d = g.value(latent.mu).numel();
    if eps.len() != d {
        return shape_err("sample", format!("eps has {} entries, latent has {d}", eps.len()));
    }
    let e = g.input(Tensor::new([d], eps.to_vec())?);
    let scaled = g.apply(Primitive::Mul, &[latent.sigma, e])?;
    g.apply(Primitive::Add, &[latent.mu, scaled])
}

pub fn sample_tensor(latent: &GaussianLatent, eps: &[f64]) -> Result<LatentFeature> {
    if eps.len() != latent.dim() {
        return shape_err("sample", format!("eps has {} entries, latent has {}", eps.len(), latent.dim()));
    }
    let values = latent
        .mu
        .iter()
        .zip(&latent.sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect();
    Ok(LatentFeature { values })
}

/// Draws `ε ~ N(0, I)`.
pub fn draw_eps(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// `½ Σ (μ² + σ² − ln σ² − 1)` in nats.
pub fn kl_to_standard_normal(latent: &GaussianLatent) -> Result<f64> {
    if let Some(s) = latent.sigma.iter().find(|s| !(**s > 0.0)) {
        return invalid(format!("sigma must be positive, got {s}"));
    }
    Ok(0.5
        * latent
            .mu
            .iter()
            .zip(&latent.sigma)
            .map(|(m, s)| m * m + s * s - (s * s).ln() - 1.0)
            .sum::<f64>())
}

/// Differentiable KL term on the graph.
pub fn kl_node(g: &mut Graph, latent: LatentNodes) -> Result<NodeId> {
    let d = g.value(latent.mu).numel() as f64;
    let mu2 = g.apply(Primitive::Mul, &[latent.mu, latent.mu])?;
    let s2 = g.apply(Primitive::Mul, &[latent.sigma, latent.sigma])?;
    let ln_s = g.apply(Primitive::Ln, &[latent.sigma])?;
    let two_ln_s = g.apply(Primitive::Affine { scale: 2.0, shift: 0.0 }, &[ln_s])?;
    let a = g.apply(Primitive::Add, &[mu2, s2])?;
    let b = g.apply(Primitive::Sub, &[a, two_ln_s])?;
    let total = g.apply(Primitive::Sum, &[b])?;
    g.apply(Primitive::Affine { scale: 0.5, shift: -0.5 * d }, &[total])
}
