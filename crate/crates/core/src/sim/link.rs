use crate::error::{invalid, Result};

/// 0.4 MB/s in bytes per second.
pub const RATE_0_4_MBPS: f64 = 0.4 * 1024.0 * 1024.0;

/// A directed link: piecewise-constant rate schedule, deadline, and drop rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkModel {
    /// `(start_seconds, bytes_per_second)`; the first segment starts at 0 and
    /// the last one extends forever.
    schedule: Vec<(f64, f64)>,
    pub deadline: f64,
    pub loss_prob: f64,
}

impl LinkModel {
    pub fn constant(rate: f64, deadline: f64, loss_prob: f64) -> Result<Self> {
        Self::piecewise(vec![(0.0, rate)], deadline, loss_prob)
    }

    pub fn piecewise(schedule: Vec<(f64, f64)>, deadline: f64, loss_prob: f64) -> Result<Self> {
        match schedule.first() {
            Some(&(t0, _)) if t0 == 0.0 => {}
            _ => return invalid("rate schedule must start at t = 0"),
        }
        if schedule.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return invalid("rate schedule start times must increase");
        }
        if let Some(&(_, r)) = schedule.iter().find(|s| !(s.1 > 0.0 && s.1.is_finite())) {
            return invalid(format!("rate must be positive and finite, got {r}"));
        }
        if !(deadline > 0.0) {
            return invalid(format!("deadline must be positive, got {deadline}"));
        }
        if !(0.0..1.0).contains(&loss_prob) {
            return invalid(format!("loss probability must be in [0, 1), got {loss_prob}"));
        }
        Ok(Self {
            schedule,
            deadline,
            loss_prob,
        })
    }

    pub fn schedule(&self) -> &[(f64, f64)] {
        &self.schedule
    }
}

/// Seconds to push `bytes` through the link starting at t = 0.
pub fn transmit_time(bytes: f64, link: &LinkModel) -> Result<f64> {
    if !(bytes >= 0.0) {
        return invalid(format!("byte count must be nonnegative, got {bytes}"));
    }
    let mut left = bytes;
    for (i, &(start, rate)) in link.schedule.iter().enumerate() {
        match link.schedule.get(i + 1) {
            Some(&(end, _)) if left > rate * (end - start) => left -= rate * (end - start),
            _ => return Ok(start + left / rate),
        }
    }
    unreachable!("schedule is nonempty")
}
