use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{frame_len, reported_volume, VolumeReport};
use crate::detect::{self, ap_summary, BoundingBox, Targets};
use crate::error::{Error, Result};
use crate::iae;
use crate::model::{self, CollabMode, Model};
use crate::sim::{generate_scene, render_observation, run_cycle, LinkModel, Scene};
use crate::smg::retained_count;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamStore, Primitive, Tensor};

use super::config::TrainConfig;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SCENE_STREAM: u64 = 0x5CE7E;
const NOISE_STREAM: u64 = 0xE95;
const EVAL_STREAM: u64 = 0xE7A1;

/// Adaptive-moment optimizer keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter not matched by `frozen`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, frozen: impl Fn(&str) -> bool) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (name, p) in params.iter_mut() {
            if frozen(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub mode: CollabMode,
    pub epoch: usize,
    pub detect: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeScore {
    pub mode: CollabMode,
    /// AP at IoU 0.3, 0.5, 0.7.
    pub ap: [f64; 3],
    pub mean_ap: f64,
    /// Mean per-cycle totals over the evaluation scenes.
    pub reported_bytes: f64,
    pub wire_bytes: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub losses: Vec<EpochLoss>,
    pub scores: Vec<ModeScore>,
    /// Per directed link at the configured dims.
    pub volume: VolumeReport,
    /// L2 distance the generator's parameters moved during training.
    pub smg_update_norm: Option<f64>,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn score(&self, mode: CollabMode) -> Option<&ModeScore> {
        self.scores.iter().find(|s| s.mode == mode)
    }

    /// Equality on every field except wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        } == Self {
            wall_clock_seconds: 0.0,
            ..other.clone()
        }
    }

    /// Epoch losses of one mode, in order.
    pub fn curve(&self, mode: CollabMode) -> Vec<EpochLoss> {
        self.losses.iter().filter(|l| l.mode == mode.trained_as()).copied().collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub record: RunRecord,
    /// One model per distinct trained mode, in first-requested order.
    pub models: Vec<Model>,
}

impl TrainOutput {
    pub fn model(&self, mode: CollabMode) -> Option<&Model> {
        self.models.iter().find(|m| m.mode == mode.trained_as())
    }
}

/// A scene with its rendered observations and rasterized labels.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene: Scene,
    pub observations: Vec<Tensor>,
    pub labels: Vec<BoundingBox>,
    pub targets: Targets,
}

impl PreparedScene {
    pub fn new(scene: Scene) -> Result<Self> {
        let observations = (0..scene.agents.len()).map(|i| render_observation(&scene, i)).collect::<Result<_>>()?;
        let labels = scene.ground_truth();
        let targets = detect::rasterize_targets(&labels, scene.height, scene.width);
        Ok(Self {
            scene,
            observations,
            labels,
            targets,
        })
    }
}

/// Training and evaluation scenes derived from the run seed.
pub fn fixture(cfg: &TrainConfig) -> Result<(Vec<PreparedScene>, Vec<PreparedScene>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SCENE_STREAM);
    let sc = cfg.scene_config();
    let mut make = |n: usize| -> Result<Vec<PreparedScene>> {
        (0..n)
            .map(|_| PreparedScene::new(generate_scene(rng.random(), &sc)?))
            .collect()
    };
    let train = make(cfg.train_scenes)?;
    let eval = make(cfg.eval_scenes)?;
    Ok((train, eval))
}

/// Fresh weights for `mode`; every mode draws the shared backbone and head
/// from the same stream, so they start identical.
pub fn init_model(cfg: &TrainConfig, mode: CollabMode) -> Result<Model> {
    Model::init(cfg.model_config(), mode, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Loss terms of one scene; gradients are taken of `total`.
pub struct SceneLoss {
    pub graph: Graph,
    pub total: crate::tensor::NodeId,
    pub detect: f64,
    pub kl: f64,
}

/// Mean detection loss over egos plus `β` times the senders' summed KL.
pub fn scene_loss(model: &Model, scene: &PreparedScene, beta: f64, eps: Option<&[Vec<f64>]>) -> Result<SceneLoss> {
    let mut g = Graph::new();
    let obs: Vec<_> = scene.observations.iter().map(|o| g.input(o.clone())).collect();
    let pass = model::forward(&mut g, model, &obs, eps)?;
    let mut per_ego = Vec::with_capacity(pass.heads.len());
    for &h in &pass.heads {
        per_ego.push(detect::detection_loss(&mut g, h, &scene.targets)?);
    }
    let stacked = if per_ego.len() == 1 {
        per_ego[0]
    } else {
        let mut acc = per_ego[0];
        for &l in &per_ego[1..] {
            acc = g.apply(Primitive::Add, &[acc, l])?;
        }
        acc
    };
    let det = g.apply(
        Primitive::Affine {
            scale: 1.0 / per_ego.len() as f64,
            shift: 0.0,
        },
        &[stacked],
    )?;
    let total = detect::total_loss(&mut g, det, &pass.kl, beta)?;
    let kl = pass.kl.iter().map(|&k| g.value(k).item()).sum();
    Ok(SceneLoss {
        detect: g.value(det).item(),
        kl,
        total,
        graph: g,
    })
}

fn train_one(cfg: &TrainConfig, mode: CollabMode, scenes: &[PreparedScene]) -> Result<(Model, Vec<EpochLoss>)> {
    let mut model = init_model(cfg, mode)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let frozen = |name: &str| cfg.freeze_backbone && name.starts_with("backbone.");
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut det, mut kl, mut total) = (0.0, 0.0, 0.0);
        for s in scenes {
            let eps: Option<Vec<Vec<f64>>> = (model.mode == CollabMode::InfoCom)
                .then(|| (0..s.observations.len()).map(|_| iae::draw_eps(&mut noise, cfg.latent_dim)).collect());
            let step = scene_loss(&model, s, cfg.beta, eps.as_deref())?;
            let t = step.graph.value(step.total).item();
            if !t.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let grads = step.graph.backward(step.total)?.for_params(&model.params);
            opt.step(&mut model.params, &grads, frozen);
            det += step.detect;
            kl += step.kl;
            total += t;
        }
        let n = scenes.len() as f64;
        losses.push(EpochLoss {
            mode: model.mode,
            epoch,
            detect: det / n,
            kl: kl / n,
            total: total / n,
        });
    }
    Ok((model, losses))
}

/// AP of `mode` over `scenes` through full exchange cycles on a lossless link.
pub fn evaluate(mode: CollabMode, model: &Model, scenes: &[PreparedScene], seed: u64) -> Result<ModeScore> {
    let link = LinkModel::constant(f64::MAX / 4.0, f64::MAX, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_STREAM);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let (mut reported, mut wire) = (0.0, 0.0);
    for (f, s) in scenes.iter().enumerate() {
        let c = run_cycle(mode, &s.scene, model, &link, f as u32, &mut rng)?;
        reported += c.reported_bytes;
        wire += c.wire_bytes as f64;
        for d in c.detections {
            preds.push(d);
            gts.push(s.labels.clone());
        }
    }
    let (ap, mean_ap) = ap_summary(&preds, &gts)?;
    let n = scenes.len() as f64;
    Ok(ModeScore {
        mode,
        ap,
        mean_ap,
        reported_bytes: reported / n,
        wire_bytes: wire / n,
    })
}

fn smg_distance(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter()
        .filter(|(n, _)| n.starts_with("smg."))
        .map(|(n, t)| b.get(n).map_or(0.0, |u| t.zip_map(u, |x, y| (x - y) * (x - y)).sum()))
        .sum::<f64>()
        .sqrt()
}

/// Trains one model per distinct mode in the list (late reuses the ego-only
/// model), then scores every listed mode on the evaluation scenes.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let (train_scenes, eval_scenes) = fixture(cfg)?;
    let mut models: Vec<Model> = Vec::new();
    let mut losses = Vec::new();
    let mut smg_update_norm = None;
    for &mode in &cfg.modes {
        if models.iter().any(|m| m.mode == mode.trained_as()) {
            continue;
        }
        let (m, l) = train_one(cfg, mode, &train_scenes)?;
        if m.mode == CollabMode::InfoCom {
            smg_update_norm = Some(smg_distance(&m.params, &init_model(cfg, mode)?.params));
        }
        losses.extend(l);
        models.push(m);
    }
    let mut scores = Vec::with_capacity(cfg.modes.len());
    for &mode in &cfg.modes {
        let m = models.iter().find(|m| m.mode == mode.trained_as()).expect("trained above");
        scores.push(evaluate(mode, m, &eval_scenes, cfg.seed)?);
    }
    let k = retained_count(cfg.alpha, cfg.height * cfg.width);
    let volume = VolumeReport {
        reported_bytes: reported_volume(cfg.latent_dim, cfg.height, cfg.width, cfg.alpha, cfg.bits)?,
        wire_bytes: frame_len(cfg.latent_dim, k, cfg.bits),
    };
    Ok(TrainOutput {
        record: RunRecord {
            seed: cfg.seed,
            losses,
            scores,
            volume,
            smg_update_norm,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
        models,
    })
}

/// All models in one checkpoint, parameter names prefixed by `{mode}/`.
pub fn save_models(models: &[Model]) -> Result<Vec<u8>> {
    let mut store = ParamStore::new();
    for m in models {
        for (name, t) in m.params.iter() {
            store.insert(format!("{}/{name}", m.mode), t.clone());
        }
    }
    write_checkpoint(&store)
}

/// Inverse of [`save_models`] for the models trained under `cfg`.
pub fn load_models(bytes: &[u8], cfg: &TrainConfig) -> Result<Vec<Model>> {
    let store = read_checkpoint(bytes)?;
    let mut per_mode: BTreeMap<CollabMode, ParamStore> = BTreeMap::new();
    for (name, t) in store.iter() {
        let Some((mode, param)) = name.split_once('/') else {
            return Err(Error::Checkpoint(format!("parameter `{name}` has no mode prefix")));
        };
        per_mode.entry(mode.parse()?).or_default().insert(param, t.clone());
    }
    per_mode
        .into_iter()
        .map(|(mode, params)| Model::from_params(cfg.model_config(), mode, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("a".to_owned(), Tensor::new([2], vec![3.0, -0.5]).unwrap());
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &g, |_| false);
        let d = p.get("a").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-7 && (d[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_means_zero_update() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::new([1], vec![0.25]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("a".to_owned(), Tensor::zeros([1]));
        let mut opt = Adam::new(0.1);
        for _ in 0..5 {
            opt.step(&mut p, &g, |_| false);
        }
        assert_eq!(p.get("a").unwrap().data(), &[0.25]);
    }
}
