//! Linear warmup followed by cosine decay to zero.

/// Learning rate at `step` (0-based) of a `total_steps` run.
///
/// Steps `0..warmup_steps` ramp linearly from `warmup_start_lr` towards
/// `base_lr`; step `warmup_steps` is exactly `base_lr`, and the cosine
/// reaches zero at the final step.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64, warmup_start_lr: f64) -> f64 {
    let warmup = warmup_steps.min(total_steps.saturating_sub(1));
    if step < warmup {
        return warmup_start_lr + (base_lr - warmup_start_lr) * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return base_lr;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let (total, warm, base) = (100, 10, 0.002);
        assert_eq!(lr_schedule(0, total, warm, base, 1e-6), 1e-6);
        assert_eq!(lr_schedule(warm, total, warm, base, 1e-6), base);
        assert!(lr_schedule(total - 1, total, warm, base, 1e-6) < 1e-8 * base);
    }

    #[test]
    fn monotone_phases() {
        let lrs: Vec<f64> = (0..50).map(|s| lr_schedule(s, 50, 5, 1.0, 0.0)).collect();
        assert!(lrs[..=5].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[5..].windows(2).all(|w| w[0] >= w[1]));
    }
}
