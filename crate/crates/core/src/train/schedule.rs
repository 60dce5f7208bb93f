//! Cosine learning-rate schedule.

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`: starts at `base_lr`,
/// monotone non-increasing, reaches zero at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    let t = (step.min(total_steps) as f64) / (total_steps.max(1) as f64);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
