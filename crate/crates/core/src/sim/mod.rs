//! Synthetic multi-agent world, link model, and per-cycle exchange.

mod cycle;
mod link;
mod scene;

pub use cycle::{backbone_tensor, build_message, detect_from_feature, fuse, reconstruct, run_cycle, CycleResult};
pub use link::{transmit_time, LinkModel, RATE_0_4_MBPS};
pub use scene::{generate_scene, render_observation, Agent, Scene, SceneConfig, CELL_SIZE};
