use crate::error::{invalid, Result};
use crate::smg::{retained_count, BitWidth};

/// Bytes per exchanged box in late collaboration: five binary32 values
/// (x, y, w, h, score).
pub const BYTES_PER_BOX: usize = 20;

/// Reported payload size next to the true frame size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeReport {
    /// `(D·32 + k·b) / 8`; fractional when `k·b` is not a multiple of 8.
    pub reported_bytes: f64,
    /// Length of the serialized frame (header, indices, and CRC included).
    pub wire_bytes: usize,
}

/// Payload bytes `((D·32) + (⌊α·H·W⌋·b)) / 8`.
pub fn reported_volume(d: usize, h: usize, w: usize, alpha: f64, bits: u8) -> Result<f64> {
    if d == 0 || h == 0 || w == 0 {
        return invalid("dimensions must be positive");
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return invalid(format!("retention ratio must be in (0, 1], got {alpha}"));
    }
    let b = BitWidth::new(bits)?;
    let k = retained_count(alpha, h * w);
    let bits_total = d as u64 * 32 + k as u64 * u64::from(b.get());
    Ok(bits_total as f64 / 8.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMode {
    /// Full `C×H×W` binary32 feature map.
    Standard,
    /// `n` detected boxes.
    Late { boxes: usize },
}

pub fn baseline_volume(mode: BaselineMode, c: usize, h: usize, w: usize) -> usize {
    match mode {
        BaselineMode::Standard => c * h * w * 32 / 8,
        BaselineMode::Late { boxes } => boxes * BYTES_PER_BOX,
    }
}

/// 1024-based human-readable size with three decimals: `"7.875 KB"`,
/// `"34.375 MB"`. Values below 1 KB print as bytes.
pub fn format_bytes(bytes: f64) -> String {
    const KB: f64 = 1024.0;
    const MB: f64 = 1024.0 * 1024.0;
    if bytes >= MB {
        format!("{:.3} MB", bytes / MB)
    } else if bytes >= KB {
        format!("{:.3} KB", bytes / KB)
    } else {
        format!("{bytes} B")
    }
}
