//! Linear warmup followed by cosine decay.

use std::f64::consts::PI;

/// Warmup length for a fraction of the total step count.
pub fn warmup_steps(total_steps: u64, fraction: f64) -> u64 {
    ((total_steps as f64) * fraction).floor() as u64
}

/// Learning rate at `step`: `base * (step + 1) / (warmup + 1)` during warmup,
/// then `base * (1 + cos(pi * (step - warmup) / (total - warmup))) / 2`,
/// reaching 0 at `step == total`.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64, warmup: u64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup {
        return base_lr * (step + 1) as f64 / (warmup + 1) as f64;
    }
    let span = (total_steps - warmup) as f64;
    let t = (step - warmup) as f64 / span;
    0.5 * base_lr * (1.0 + (PI * t).cos())
}
