//! Linear warmup / linear decay learning-rate schedule.

use crate::error::{Error, Result};

/// Rate at `step`: linear ramp 0 → `peak` over `warmup` steps, then linear
/// decay `peak` → 0 at `total`.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> Result<f64> {
    if !(warmup > 0 && warmup < total) {
        return Err(Error::Contract(format!(
            "need 0 < warmup < total, got warmup={warmup} total={total}"
        )));
    }
    if step > total {
        return Err(Error::Contract(format!(
            "step {step} beyond schedule total {total}"
        )));
    }
    if step <= warmup {
        Ok(peak * step as f64 / warmup as f64)
    } else {
        Ok(peak * (total - step) as f64 / (total - warmup) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halfway_up_the_ramp() {
        let lr = lr_at(5_000, 5e-4, 10_000, 1_000_000).unwrap();
        assert!((lr - 2.5e-4).abs() < 1e-18, "{lr}");
    }

    #[test]
    fn peak_at_warmup_end() {
        assert_eq!(lr_at(10_000, 5e-4, 10_000, 1_000_000).unwrap(), 5e-4);
    }

    #[test]
    fn zero_at_total() {
        assert_eq!(lr_at(1_000_000, 5e-4, 10_000, 1_000_000).unwrap(), 0.0);
    }

    #[test]
    fn zero_at_start() {
        assert_eq!(lr_at(0, 5e-4, 10_000, 1_000_000).unwrap(), 0.0);
    }

    #[test]
    fn step_beyond_total_is_rejected() {
        assert!(lr_at(11, 1e-3, 2, 10).is_err());
    }
}
