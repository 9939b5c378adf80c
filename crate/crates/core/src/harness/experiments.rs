use std::fmt;
use std::str::FromStr;

use crate::codec::{baseline_volume, format_bytes, reported_volume, BaselineMode};
use crate::error::{invalid, Error, Result};
use crate::model::{Ablation, CollabMode};
use crate::smg::{retained_count, BitWidth};

use super::config::TrainConfig;
use super::train::train;

/// A value that renders as one CSV line.
pub trait CsvRow {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

pub fn to_csv<R: CsvRow>(rows: &[R]) -> String {
    let mut out = R::HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.fields().join(","));
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Bits,
    Beta,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "b" | "bits" => Ok(Self::Bits),
            "beta" => Ok(Self::Beta),
            _ => invalid(format!("unknown sweep parameter `{s}` (expected alpha, b, beta)")),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Alpha => "alpha",
            Self::Bits => "b",
            Self::Beta => "beta",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub mean_ap: f64,
    pub reported_bytes: f64,
    /// Retained positions, on α rows.
    pub k: Option<usize>,
    /// Quantization step, on b rows.
    pub delta: Option<f64>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CsvRow for SweepRow {
    const HEADER: &'static [&'static str] = &["param", "value", "mean_ap", "reported_bytes", "k", "delta"];

    fn fields(&self) -> Vec<String> {
        vec![
            self.param.to_string(),
            self.value.to_string(),
            format!("{:.6}", self.mean_ap),
            self.reported_bytes.to_string(),
            opt(self.k),
            opt(self.delta),
        ]
    }
}

/// One InfoCom training run per value of `param`.
pub fn sweep(param: SweepParam, values: &[f64], base: &TrainConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = TrainConfig {
            modes: vec![CollabMode::InfoCom],
            ..base.clone()
        };
        match param {
            SweepParam::Alpha => cfg.alpha = value,
            SweepParam::Beta => cfg.beta = value,
            SweepParam::Bits => {
                if value.fract() != 0.0 || !(1.0..=8.0).contains(&value) {
                    return invalid(format!("bit width {value} is not an integer in 1..=8"));
                }
                cfg.bits = value as u8;
            }
        }
        cfg.validate()?;
        let out = train(&cfg)?;
        let score = out.record.score(CollabMode::InfoCom).expect("infocom requested");
        rows.push(SweepRow {
            param,
            value,
            mean_ap: score.mean_ap,
            reported_bytes: out.record.volume.reported_bytes,
            k: (param == SweepParam::Alpha).then(|| retained_count(cfg.alpha, cfg.height * cfg.width)),
            delta: (param == SweepParam::Bits).then(|| BitWidth::new(cfg.bits).map(BitWidth::step)).transpose()?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub ap: [f64; 3],
    pub mean_ap: f64,
    pub smg_update_norm: f64,
}

impl CsvRow for AblationRow {
    const HEADER: &'static [&'static str] = &["variant", "ap_0.3", "ap_0.5", "ap_0.7", "mean_ap", "smg_update_norm"];

    fn fields(&self) -> Vec<String> {
        let mut f = vec![self.variant.to_owned()];
        f.extend(self.ap.iter().map(|a| format!("{a:.6}")));
        f.push(format!("{:.6}", self.mean_ap));
        f.push(self.smg_update_norm.to_string());
        f
    }
}

/// The six variants on identical seeds and scenes. Any flags already set in
/// `base` are replaced by each variant's own.
pub fn ablate(base: &TrainConfig) -> Result<Vec<AblationRow>> {
    Ablation::VARIANTS
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                modes: vec![CollabMode::InfoCom],
                ablation: Ablation::variant(variant)?,
                ..base.clone()
            };
            let out = train(&cfg)?;
            let s = out.record.score(CollabMode::InfoCom).expect("infocom requested");
            Ok(AblationRow {
                variant,
                ap: s.ap,
                mean_ap: s.mean_ap,
                smg_update_norm: out.record.smg_update_norm.unwrap_or(0.0),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRow {
    pub setting: &'static str,
    pub mode: CollabMode,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    pub alpha: f64,
    pub bits: u8,
    pub bytes: f64,
}

impl VolumeRow {
    pub fn display(&self) -> String {
        format_bytes(self.bytes)
    }
}

impl CsvRow for VolumeRow {
    const HEADER: &'static [&'static str] = &["setting", "mode", "c", "h", "w", "d", "alpha", "b", "bytes", "volume"];

    fn fields(&self) -> Vec<String> {
        vec![
            self.setting.to_owned(),
            self.mode.to_string(),
            self.channels.to_string(),
            self.height.to_string(),
            self.width.to_string(),
            self.latent_dim.to_string(),
            self.alpha.to_string(),
            self.bits.to_string(),
            self.bytes.to_string(),
            self.display(),
        ]
    }
}

/// `(setting, C, H, W)` of the benchmark feature maps.
pub const BENCHMARK_DIMS: [(&str, usize, usize, usize); 4] = [
    ("opv2v", 64, 200, 704),
    ("v2xset", 64, 200, 704),
    ("dair-v2x", 64, 200, 504),
    ("attfuse", 256, 100, 352),
];
pub const BENCHMARK_LATENT_DIM: usize = 256;

/// Standard and InfoCom volume per directed link at the benchmark dims.
pub fn volume_table() -> Result<Vec<VolumeRow>> {
    let mut rows = Vec::new();
    for &(setting, c, h, w) in &BENCHMARK_DIMS {
        rows.push(VolumeRow {
            setting,
            mode: CollabMode::Standard,
            channels: c,
            height: h,
            width: w,
            latent_dim: 0,
            alpha: 1.0,
            bits: 32,
            bytes: baseline_volume(BaselineMode::Standard, c, h, w) as f64,
        });
        rows.push(VolumeRow {
            setting,
            mode: CollabMode::InfoCom,
            channels: c,
            height: h,
            width: w,
            latent_dim: BENCHMARK_LATENT_DIM,
            alpha: 0.1,
            bits: 4,
            bytes: reported_volume(BENCHMARK_LATENT_DIM, h, w, 0.1, 4)?,
        });
    }
    Ok(rows)
}
