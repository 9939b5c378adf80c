use std::time::Instant;

use rand::Rng;

use crate::codec::{baseline_volume, decode_message, encode_message, reported_volume, BaselineMode, MessageUnit};
use crate::detect::{self, BoundingBox, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};
use crate::error::{invalid, Result};
use crate::iae;
use crate::model::{CollabMode, Model};
use crate::msd;
use crate::smg;
use crate::tensor::{apply_primitive, Graph, Primitive, Tensor};

use super::link::{transmit_time, LinkModel};
use super::scene::{render_observation, Scene};

/// Elementwise maximum over agent features, taken in the order given.
pub fn fuse(features: &[&Tensor]) -> Result<Tensor> {
    if features.is_empty() {
        return invalid("fuse needs at least one feature");
    }
    apply_primitive(&Primitive::Maximum, features)
}

/// Accounting and detections for one exchange round.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleResult {
    pub mode: CollabMode,
    /// Boxes produced by each agent acting as ego, in agent order.
    pub detections: Vec<Vec<BoundingBox>>,
    /// Sum over directed links of the payload-formula size.
    pub reported_bytes: f64,
    /// Sum over directed links of the bytes actually serialized.
    pub wire_bytes: usize,
    /// Slowest directed link; every link has its own rate budget.
    pub transmit_seconds: f64,
    pub compute_seconds: f64,
    pub completed_within_deadline: bool,
    pub dropped_links: usize,
}

pub fn backbone_tensor(model: &Model, obs: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(obs.clone());
    let z = detect::backbone(&mut g, &model.params, x)?;
    Ok(g.value(z).clone())
}

pub fn detect_from_feature(model: &Model, feature: &Tensor) -> Result<Vec<BoundingBox>> {
    let mut g = Graph::new();
    let f = g.input(feature.clone());
    let h = detect::head(&mut g, &model.params, f)?;
    let out = detect::head_output(&g, h)?;
    detect::decode_boxes(&out, DEFAULT_SCORE_THRESHOLD, DEFAULT_NMS_IOU)
}

/// Sender side of InfoCom: posterior mean as `E`, top-k quantized mask.
pub fn build_message(model: &Model, z: &Tensor, agent_id: u32, frame_id: u32) -> Result<MessageUnit> {
    let cfg = &model.cfg;
    let latent = iae::encode_tensor(&model.params, &cfg.iae(), z)?;
    let mask = smg::compute_sparse_mask(&model.params, &cfg.smg(), z, cfg.alpha, cfg.bits)?;
    Ok(MessageUnit {
        agent_id,
        frame_id,
        channels: cfg.channels as u32,
        latent: latent.mu.iter().map(|&v| v as f32).collect(),
        mask,
    })
}

/// Receiver side of InfoCom: rebuild the sender's feature from a message.
pub fn reconstruct(model: &Model, unit: &MessageUnit) -> Result<Tensor> {
    let e: Vec<f64> = unit.latent.iter().map(|&v| f64::from(v)).collect();
    let dense = smg::dequantize(&unit.mask).to_dense_tensor();
    msd::decode_tensor(&model.params, &model.cfg.msd(), &e, &dense)
}

/// One exchange round among all agents of `scene`. Each directed link may
/// drop its payload with the link's loss probability; a dropped payload is
/// still counted as sent and the receiver proceeds without it.
pub fn run_cycle(mode: CollabMode, scene: &Scene, model: &Model, link: &LinkModel, frame_id: u32, rng: &mut impl Rng) -> Result<CycleResult> {
    if model.mode != mode.trained_as() {
        return invalid(format!("mode {mode} needs a model trained as {}, got {}", mode.trained_as(), model.mode));
    }
    let started = Instant::now();
    let n = scene.agents.len();
    let observations = (0..n).map(|i| render_observation(scene, i)).collect::<Result<Vec<_>>>()?;
    let features = observations
        .iter()
        .map(|o| backbone_tensor(model, o))
        .collect::<Result<Vec<_>>>()?;
    let cfg = &model.cfg;
    // delivered[j][i]: sender j's payload reaches receiver i.
    let mut delivered = vec![vec![false; n]; n];
    let mut dropped_links = 0;
    for (j, row) in delivered.iter_mut().enumerate() {
        for (i, ok) in row.iter_mut().enumerate() {
            if i == j || mode == CollabMode::None {
                continue;
            }
            let lost = rng.random::<f64>() < link.loss_prob;
            dropped_links += usize::from(lost);
            *ok = !lost;
        }
    }
    let links = if mode == CollabMode::None { 0 } else { n * (n - 1) };
    let mut per_link_wire = vec![0usize; n];
    let mut reported = 0.0;
    let detections: Vec<Vec<BoundingBox>> = match mode {
        CollabMode::None => features.iter().map(|z| detect_from_feature(model, z)).collect::<Result<_>>()?,
        CollabMode::Late => {
            let own: Vec<Vec<BoundingBox>> = features.iter().map(|z| detect_from_feature(model, z)).collect::<Result<_>>()?;
            for j in 0..n {
                per_link_wire[j] = baseline_volume(BaselineMode::Late { boxes: own[j].len() }, cfg.channels, cfg.height, cfg.width);
                reported += (per_link_wire[j] * (n - 1)) as f64;
            }
            (0..n)
                .map(|i| {
                    let mut pool = own[i].clone();
                    for j in (0..n).filter(|&j| delivered[j][i]) {
                        pool.extend_from_slice(&own[j]);
                    }
                    detect::nms(&pool, DEFAULT_NMS_IOU)
                })
                .collect()
        }
        CollabMode::Standard => {
            let bytes = baseline_volume(BaselineMode::Standard, cfg.channels, cfg.height, cfg.width);
            per_link_wire.iter_mut().for_each(|b| *b = bytes);
            reported = (bytes * links) as f64;
            (0..n)
                .map(|i| {
                    let inputs: Vec<&Tensor> = (0..n).filter(|&j| j == i || delivered[j][i]).map(|j| &features[j]).collect();
                    detect_from_feature(model, &fuse(&inputs)?)
                })
                .collect::<Result<_>>()?
        }
        CollabMode::InfoCom => {
            let per_link_reported = reported_volume(cfg.latent_dim, cfg.height, cfg.width, cfg.alpha, cfg.bits)?;
            reported = per_link_reported * links as f64;
            let mut frames = Vec::with_capacity(n);
            for (j, z) in features.iter().enumerate() {
                let bytes = encode_message(&build_message(model, z, j as u32, frame_id)?)?;
                per_link_wire[j] = bytes.len();
                frames.push(bytes);
            }
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let mut rebuilt: Vec<Option<Tensor>> = vec![None; n];
                for j in (0..n).filter(|&j| delivered[j][i]) {
                    rebuilt[j] = Some(reconstruct(model, &decode_message(&frames[j])?)?);
                }
                let inputs: Vec<&Tensor> = (0..n)
                    .filter_map(|j| if j == i { Some(&features[i]) } else { rebuilt[j].as_ref() })
                    .collect();
                out.push(detect_from_feature(model, &fuse(&inputs)?)?);
            }
            out
        }
    };
    let wire_bytes = if mode == CollabMode::None {
        0
    } else {
        per_link_wire.iter().sum::<usize>() * (n - 1)
    };
    let mut transmit_seconds = 0.0f64;
    if mode != CollabMode::None {
        for &b in &per_link_wire {
            transmit_seconds = transmit_seconds.max(transmit_time(b as f64, link)?);
        }
    }
    let compute_seconds = started.elapsed().as_secs_f64();
    Ok(CycleResult {
        mode,
        detections,
        reported_bytes: reported,
        wire_bytes,
        transmit_seconds,
        compute_seconds,
        completed_within_deadline: transmit_seconds + compute_seconds <= link.deadline,
        dropped_links,
    })
}
