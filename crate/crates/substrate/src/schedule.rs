//! Linear warmup followed by cosine annealing.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, max_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!("warmup ({warmup_steps}) must be shorter than the run ({total_steps})")));
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        return Ok(max_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(max_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let (total, warm, lr) = (1000, 100, 5e-4);
        assert_eq!(lr_schedule(0, total, warm, lr).unwrap(), 0.0);
        assert_eq!(lr_schedule(warm, total, warm, lr).unwrap(), lr);
        let mid = lr_schedule((total + warm) / 2, total, warm, lr).unwrap();
        let expected = lr * (PI / 4.0).cos().powi(2);
        assert!((mid - expected).abs() < 1e-15);
        assert!((mid - lr / 2.0).abs() < 1e-15);
        assert!(lr_schedule(total, total, warm, lr).unwrap().abs() < 1e-20);
    }

    #[test]
    fn continuous_at_junction() {
        let (total, warm, lr) = (10_000, 500, 1.0);
        let before = lr_schedule(warm - 1, total, warm, lr).unwrap();
        let at = lr_schedule(warm, total, warm, lr).unwrap();
        let after = lr_schedule(warm + 1, total, warm, lr).unwrap();
        assert!((at - before).abs() < 2.5e-3);
        assert!((at - after).abs() < 1e-6);
    }

    #[test]
    fn warmup_must_fit() {
        assert!(lr_schedule(0, 100, 100, 1.0).is_err());
    }
}
