use crate::error::{invalid, Error, Result};
use crate::model::{Ablation, CollabMode, ModelConfig};
use crate::sim::SceneConfig;
use crate::smg::BitWidth;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub alpha: f64,
    pub bits: u8,
    pub latent_dim: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub agents: usize,
    pub stages: usize,
    pub modes: Vec<CollabMode>,
    pub ablation: Ablation,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Leave the backbone at its initial weights.
    pub freeze_backbone: bool,
    /// See [`ModelConfig::sender_backprop`].
    pub sender_backprop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 200,
            learning_rate: 0.002,
            beta: 0.01,
            alpha: 0.1,
            bits: 4,
            latent_dim: 64,
            channels: 16,
            height: 64,
            width: 64,
            agents: 2,
            stages: 3,
            modes: CollabMode::ALL.to_vec(),
            ablation: Ablation::default(),
            train_scenes: 10,
            eval_scenes: 5,
            freeze_backbone: false,
            sender_backprop: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        v => invalid(format!("cannot parse `{v}` for `{key}` as a boolean")),
    }
}

/// `key = value` pairs, one per line; blank lines and `#` comments skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return invalid(format!("line {}: expected key=value, got `{line}`", n + 1));
        };
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim().replace('-', "_");
        match k.as_str() {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" | "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "bits" | "b" => self.bits = parse(key, value)?,
            "latent_dim" | "d" => self.latent_dim = parse(key, value)?,
            "channels" | "c" => self.channels = parse(key, value)?,
            "height" | "h" => self.height = parse(key, value)?,
            "width" | "w" => self.width = parse(key, value)?,
            "agents" | "n" => self.agents = parse(key, value)?,
            "stages" => self.stages = parse(key, value)?,
            "train_scenes" => self.train_scenes = parse(key, value)?,
            "eval_scenes" => self.eval_scenes = parse(key, value)?,
            "modes" => {
                self.modes = value
                    .split(',')
                    .map(|m| m.trim().parse())
                    .collect::<Result<Vec<CollabMode>>>()?
            }
            "simple_encoder" => self.ablation.simple_encoder = parse_bool(key, value)?,
            "simple_generator" => self.ablation.simple_generator = parse_bool(key, value)?,
            "no_ste" => self.ablation.no_ste = parse_bool(key, value)?,
            "no_mask" => self.ablation.no_mask = parse_bool(key, value)?,
            "single_scale_rec" => self.ablation.single_scale_rec = parse_bool(key, value)?,
            "freeze_backbone" => self.freeze_backbone = parse_bool(key, value)?,
            "sender_backprop" => self.sender_backprop = parse_bool(key, value)?,
            _ => return invalid(format!("unknown configuration key `{key}`")),
        }
        Ok(())
    }

    /// Defaults overridden by every pair in `text`.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return invalid(format!("beta must be nonnegative, got {}", self.beta));
        }
        BitWidth::new(self.bits)?;
        if self.modes.is_empty() {
            return invalid("mode list is empty");
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return invalid("scene counts must be positive");
        }
        self.model_config().validate()?;
        if !(2..=5).contains(&self.agents) {
            return invalid(format!("agent count {} outside 2..=5", self.agents));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            height: self.height,
            width: self.width,
            latent_dim: self.latent_dim,
            stages: self.stages,
            alpha: self.alpha,
            bits: self.bits,
            ablation: self.ablation,
            sender_backprop: self.sender_backprop,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig::toy(self.height, self.width, self.agents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_toy_scale() {
        let c = TrainConfig::default();
        assert_eq!((c.channels, c.height, c.width, c.latent_dim, c.agents), (16, 64, 64, 64, 2));
        assert_eq!((c.learning_rate, c.beta, c.alpha, c.bits), (0.002, 0.01, 0.1, 4));
        c.validate().unwrap();
    }

    #[test]
    fn file_values_apply_in_order() {
        let c = TrainConfig::from_key_values("# toy\nseed = 7\nepochs=3\nmodes = none, infocom\nno_ste = true\n\nlr=0.01 # faster\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.modes, vec![CollabMode::None, CollabMode::InfoCom]);
        assert!(c.ablation.no_ste);
        assert_eq!(c.learning_rate, 0.01);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(TrainConfig::from_key_values("seed").is_err());
        assert!(TrainConfig::from_key_values("colour = red").is_err());
        assert!(TrainConfig::from_key_values("beta = -1").is_err());
        assert!(TrainConfig::from_key_values("bits = 9").is_err());
        assert!(TrainConfig::from_key_values("height = 60").is_err());
        assert!(TrainConfig::from_key_values("modes = early").is_err());
    }
}
