//! One model builder for every collaboration mode and ablation variant.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};

use crate::detect::{self, HeadNodes};
use crate::error::{invalid, shape_err, Error, Result};
use crate::iae::{self, IaeConfig};
use crate::msd::{self, MaskGuidance, MsdConfig};
use crate::smg::{self, BitWidth, SmgConfig};
use crate::tensor::{Graph, NodeId, ParamStore, Primitive};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CollabMode {
    /// Ego-only perception.
    None,
    /// Exchange of decoded boxes.
    Late,
    /// Exchange of the full feature map.
    Standard,
    /// Latent plus sparse mask, rebuilt by the receiver.
    InfoCom,
}

impl CollabMode {
    pub const ALL: [CollabMode; 4] = [CollabMode::None, CollabMode::Late, CollabMode::Standard, CollabMode::InfoCom];

    pub fn as_str(self) -> &'static str {
        match self {
            CollabMode::None => "none",
            CollabMode::Late => "late",
            CollabMode::Standard => "standard",
            CollabMode::InfoCom => "infocom",
        }
    }

    /// The mode whose weights drive this one; late collaboration runs the
    /// ego-only detector on every agent.
    pub fn trained_as(self) -> CollabMode {
        match self {
            CollabMode::Late => CollabMode::None,
            m => m,
        }
    }
}

impl fmt::Display for CollabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CollabMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}` (expected none, late, standard, infocom)")))
    }
}

/// Switches that turn the full model into one of the ablated variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub simple_encoder: bool,
    pub simple_generator: bool,
    pub no_ste: bool,
    pub no_mask: bool,
    pub single_scale_rec: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 6] = [
        "full",
        "simple_encoder",
        "simple_generator",
        "no_ste",
        "no_mask",
        "single_scale_rec",
    ];

    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "full" => {}
            "simple_encoder" => a.simple_encoder = true,
            "simple_generator" => a.simple_generator = true,
            "no_ste" => a.no_ste = true,
            "no_mask" => a.no_mask = true,
            "single_scale_rec" => a.single_scale_rec = true,
            _ => return invalid(format!("unknown variant `{name}`")),
        }
        Ok(a)
    }

    pub fn guidance(&self) -> MaskGuidance {
        if self.no_mask {
            MaskGuidance::Off
        } else if self.single_scale_rec {
            MaskGuidance::FinalOnly
        } else {
            MaskGuidance::AllStages
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub stages: usize,
    pub alpha: f64,
    pub bits: u8,
    pub ablation: Ablation,
    /// Let the message path backpropagate into the sender's backbone. Off by
    /// default: the backbone then learns only from its own ego detection loss.
    pub sender_backprop: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.latent_dim == 0 {
            return invalid("channels and latent dim must be positive");
        }
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height == 0 || self.width == 0 {
            return shape_err("model_config", format!("grid {}x{} must be divisible by 8", self.height, self.width));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return invalid(format!("retention ratio must be in (0, 1], got {}", self.alpha));
        }
        BitWidth::new(self.bits)?;
        self.msd().validate()
    }

    pub fn iae(&self) -> IaeConfig {
        IaeConfig {
            channels: self.channels,
            latent_dim: self.latent_dim,
            simple: self.ablation.simple_encoder,
        }
    }

    pub fn smg(&self) -> SmgConfig {
        SmgConfig {
            channels: self.channels,
            single_branch: self.ablation.simple_generator,
        }
    }

    pub fn msd(&self) -> MsdConfig {
        MsdConfig {
            channels: self.channels,
            height: self.height,
            width: self.width,
            stages: self.stages,
            latent_dim: self.latent_dim,
            guidance: self.ablation.guidance(),
        }
    }
}

/// Parameters plus the configuration and mode they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub mode: CollabMode,
    pub params: ParamStore,
}

/// Prefixes of the communication modules' parameters.
pub const COMM_PREFIXES: [&str; 3] = ["iae.", "smg.", "msd."];

impl Model {
    /// Backbone and head for every mode; encoder, generator, and decoder
    /// only for InfoCom.
    pub fn init(cfg: ModelConfig, mode: CollabMode, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        detect::init_backbone(&mut params, cfg.channels, rng);
        detect::init_head(&mut params, cfg.channels, rng);
        if mode == CollabMode::InfoCom {
            iae::init_params(&mut params, &cfg.iae(), rng);
            smg::init_params(&mut params, &cfg.smg(), rng);
            msd::init_params(&mut params, &cfg.msd(), rng);
        }
        Ok(Self {
            cfg,
            mode: mode.trained_as(),
            params,
        })
    }

    /// Wraps loaded parameters after checking every expected name is present.
    pub fn from_params(cfg: ModelConfig, mode: CollabMode, params: ParamStore) -> Result<Self> {
        let reference = Self::init(cfg, mode, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self {
            cfg,
            mode: mode.trained_as(),
            params,
        })
    }
}

/// What the sender puts on the graph for one agent in InfoCom mode.
#[derive(Clone, Copy, Debug)]
pub struct SenderNodes {
    pub latent: iae::LatentNodes,
    pub e: NodeId,
    pub dense_mask: NodeId,
    pub sparse_mask: NodeId,
    pub kl: NodeId,
}

/// Per-ego detection heads plus the KL terms of every sender.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub features: Vec<NodeId>,
    pub heads: Vec<HeadNodes>,
    pub kl: Vec<NodeId>,
    pub senders: Vec<SenderNodes>,
}

/// `E`, dense mask, straight-through sparse mask, and KL for one sender.
/// With `eps = None` the latent is the posterior mean.
pub fn sender(g: &mut Graph, model: &Model, z: NodeId, eps: Option<&[f64]>) -> Result<SenderNodes> {
    let cfg = &model.cfg;
    let latent = iae::encode(g, &model.params, &cfg.iae(), z)?;
    let e = match eps {
        Some(eps) => iae::sample(g, latent, eps)?,
        None => latent.mu,
    };
    let kl = iae::kl_node(g, latent)?;
    let dense_mask = smg::generate_mask(g, &model.params, &cfg.smg(), z)?;
    let sparse_mask = smg::sparsify_ste(g, dense_mask, cfg.alpha, cfg.bits, !cfg.ablation.no_ste)?;
    Ok(SenderNodes {
        latent,
        e,
        dense_mask,
        sparse_mask,
        kl,
    })
}

/// Builds the whole multi-agent pass on one graph. `observations` are in
/// ascending agent order; every agent acts as ego once. `eps[j]` is sender
/// `j`'s reparameterization noise (ignored outside InfoCom).
pub fn forward(g: &mut Graph, model: &Model, observations: &[NodeId], eps: Option<&[Vec<f64>]>) -> Result<ForwardPass> {
    if observations.is_empty() {
        return invalid("need at least one agent");
    }
    let store = &model.params;
    let features = observations
        .iter()
        .map(|&o| detect::backbone(g, store, o))
        .collect::<Result<Vec<_>>>()?;
    let n = features.len();
    let mut senders = Vec::new();
    let mut kl = Vec::new();
    let fused: Vec<NodeId> = match model.mode {
        CollabMode::None | CollabMode::Late => features.clone(),
        CollabMode::Standard => {
            let all = g.apply(Primitive::Maximum, &features)?;
            vec![all; n]
        }
        CollabMode::InfoCom => {
            if n > 1 {
                for (j, &z) in features.iter().enumerate() {
                    let z = if model.cfg.sender_backprop { z } else { g.detach(z) };
                    let s = sender(g, model, z, eps.map(|e| e[j].as_slice()))?;
                    kl.push(s.kl);
                    senders.push(s);
                }
            }
            let mut rebuilt = Vec::with_capacity(senders.len());
            for s in &senders {
                rebuilt.push(msd::decode(g, store, &model.cfg.msd(), s.e, s.sparse_mask)?);
            }
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let inputs: Vec<NodeId> = (0..n).map(|j| if j == i { features[i] } else { rebuilt[j] }).collect();
                out.push(if n == 1 { features[i] } else { g.apply(Primitive::Maximum, &inputs)? });
            }
            out
        }
    };
    let heads = fused
        .iter()
        .map(|&f| detect::head(g, store, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardPass {
        features,
        heads,
        kl,
        senders,
    })
}
