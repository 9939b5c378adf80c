use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::BoundingBox;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Metres per grid cell.
pub const CELL_SIZE: f64 = 1.0;
const RAY_STEP: f64 = 0.25;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub agents: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Box sides are drawn from `min_side..=max_side` cells.
    pub min_side: usize,
    pub max_side: usize,
    /// Sensing radius as a fraction of the shorter grid side.
    pub sensing_fraction: f64,
}

impl SceneConfig {
    pub fn toy(height: usize, width: usize, agents: usize) -> Self {
        let area = (height * width) as f64;
        Self {
            height,
            width,
            agents,
            min_objects: ((area / 170.0).round() as usize).max(1),
            max_objects: ((area / 100.0).round() as usize).max(2),
            min_side: 2,
            max_side: 4,
            sensing_fraction: 0.6,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.agents) {
            return invalid(format!("agent count {} outside 2..=5", self.agents));
        }
        if self.height < 8 || self.width < 8 {
            return invalid("grid must be at least 8x8");
        }
        if self.min_objects > self.max_objects || self.min_side == 0 || self.min_side > self.max_side {
            return invalid("object count and size ranges must be nonempty");
        }
        if self.max_side + 2 > self.height.min(self.width) {
            return invalid("boxes do not fit in the grid");
        }
        if !(self.sensing_fraction > 0.0) {
            return invalid("sensing radius must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Agent {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// Axis-aligned objects and sensing agents on an `H×W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<BoundingBox>,
    pub agents: Vec<Agent>,
}

/// Integer cell footprint `(col0, row0, cols, rows)` of an object.
fn footprint(b: &BoundingBox) -> (usize, usize, usize, usize) {
    let c0 = (b.cx - b.w / 2.0).round() as usize;
    let r0 = (b.cy - b.h / 2.0).round() as usize;
    (c0, r0, b.w.round() as usize, b.h.round() as usize)
}

/// Agents evenly spread on a circle around the grid center (agent 0 on the
/// left), objects placed by rejection sampling with a one-cell gap between
/// boxes and around each agent.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let ring = 0.4 * h.min(w);
    let radius = cfg.sensing_fraction * h.min(w);
    let agents: Vec<Agent> = (0..cfg.agents)
        .map(|i| {
            let theta = std::f64::consts::PI * (1.0 + 2.0 * i as f64 / cfg.agents as f64) + rng.random_range(-0.2..0.2);
            Agent {
                x: (w / 2.0 + ring * theta.cos()).clamp(0.5, w - 0.5),
                y: (h / 2.0 + ring * theta.sin()).clamp(0.5, h - 0.5),
                radius,
            }
        })
        .collect();
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut taken = vec![false; cfg.height * cfg.width];
    for a in &agents {
        let (ac, ar) = (a.x.floor() as i64, a.y.floor() as i64);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (r, c) = (ar + dr, ac + dc);
                if r >= 0 && c >= 0 && (r as usize) < cfg.height && (c as usize) < cfg.width {
                    taken[r as usize * cfg.width + c as usize] = true;
                }
            }
        }
    }
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let bw = rng.random_range(cfg.min_side..=cfg.max_side);
            let bh = rng.random_range(cfg.min_side..=cfg.max_side);
            let c0 = rng.random_range(0..=cfg.width - bw);
            let r0 = rng.random_range(0..=cfg.height - bh);
            let clear = (r0.saturating_sub(1)..(r0 + bh + 1).min(cfg.height))
                .all(|r| (c0.saturating_sub(1)..(c0 + bw + 1).min(cfg.width)).all(|c| !taken[r * cfg.width + c]));
            if !clear {
                continue;
            }
            for r in r0..r0 + bh {
                for c in c0..c0 + bw {
                    taken[r * cfg.width + c] = true;
                }
            }
            objects.push(BoundingBox::new(
                c0 as f64 + bw as f64 / 2.0,
                r0 as f64 + bh as f64 / 2.0,
                bw as f64,
                bh as f64,
                1.0,
            )?);
            break;
        }
    }
    Ok(Scene {
        seed,
        height: cfg.height,
        width: cfg.width,
        objects,
        agents,
    })
}

impl Scene {
    /// Extent in metres `(width, height)`.
    pub fn extent(&self) -> (f64, f64) {
        (self.width as f64 * CELL_SIZE, self.height as f64 * CELL_SIZE)
    }

    /// Row-major occupancy, `true` inside any object.
    pub fn occupancy(&self) -> Vec<bool> {
        let mut occ = vec![false; self.height * self.width];
        for b in &self.objects {
            let (c0, r0, cols, rows) = footprint(b);
            for r in r0..(r0 + rows).min(self.height) {
                for c in c0..(c0 + cols).min(self.width) {
                    occ[r * self.width + c] = true;
                }
            }
        }
        occ
    }

    /// Cells inside the agent's sensing radius whose center can be reached
    /// by a straight ray without crossing another occupied cell.
    pub fn visibility(&self, agent: usize) -> Result<Vec<bool>> {
        let Some(a) = self.agents.get(agent) else {
            return invalid(format!("no agent {agent} (scene has {})", self.agents.len()));
        };
        let occ = self.occupancy();
        Ok(cast_rays(&occ, self.height, self.width, a))
    }

    /// Objects with at least one cell visible to at least one agent.
    pub fn ground_truth(&self) -> Vec<BoundingBox> {
        let vis: Vec<Vec<bool>> = (0..self.agents.len()).map(|i| self.visibility(i).unwrap_or_default()).collect();
        self.objects
            .iter()
            .filter(|b| {
                let (c0, r0, cols, rows) = footprint(b);
                (r0..r0 + rows).any(|r| (c0..c0 + cols).any(|c| vis.iter().any(|v| v[r * self.width + c])))
            })
            .copied()
            .collect()
    }
}

pub(crate) fn cast_rays(occ: &[bool], h: usize, w: usize, a: &Agent) -> Vec<bool> {
    let own = (a.y.floor() as usize).min(h - 1) * w + (a.x.floor() as usize).min(w - 1);
    let mut vis = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let (tx, ty) = (c as f64 + 0.5, r as f64 + 0.5);
            let (dx, dy) = (tx - a.x, ty - a.y);
            let dist = (dx * dx + dy * dy).sqrt();
            if dist > a.radius {
                continue;
            }
            let target = r * w + c;
            let steps = (dist / RAY_STEP).ceil() as usize;
            let blocked = (1..steps).any(|s| {
                let t = s as f64 / steps as f64;
                let (x, y) = (a.x + t * dx, a.y + t * dy);
                let cell = (y.floor() as usize).min(h - 1) * w + (x.floor() as usize).min(w - 1);
                cell != target && cell != own && occ[cell]
            });
            vis[target] = !blocked;
        }
    }
    vis
}

/// Two-channel observation `(2,H,W)`: occupancy where visible, then visibility.
pub fn render_observation(scene: &Scene, agent: usize) -> Result<Tensor> {
    let vis = scene.visibility(agent)?;
    let occ = scene.occupancy();
    let plane = scene.height * scene.width;
    Tensor::new(
        [2, scene.height, scene.width],
        (0..2 * plane)
            .map(|i| {
                let cell = i % plane;
                let seen = vis[cell];
                if i < plane {
                    f64::from(u8::from(seen && occ[cell]))
                } else {
                    f64::from(u8::from(seen))
                }
            })
            .collect(),
    )
}
